//! Small end-to-end run on 3x3 FrozenLake with timings. Knobs come from
//! environment variables so budgets can be explored without recompiling.

use std::time::Instant;
use visplan_core::corpus::{build_corpus, CorpusSpec};
use visplan_core::evalx::{eval_suite, exploration_probe, Greedy, UniformLegal};
use visplan_core::train::{train_vpft, train_vprl, RegimeConfig};
use visplan_core::TaskKind;

fn knob(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let seed = knob("SEED", 0) as u64;
    let t = Instant::now();
    let corpus = build_corpus(&CorpusSpec {
        task: TaskKind::FrozenLake,
        sizes: vec![3],
        n_per_size: knob("ENVS", 1250),
        test_fraction: 0.2,
        stage1_budget: knob("S1_BUDGET", 4000),
        stage1_depth_cap: 8,
        ood: false,
        seed,
    })
    .unwrap();
    println!(
        "corpus: {} envs, {} vpft, {} stage1, {} stage2 ({:?})",
        corpus.pool.envs.len(),
        corpus.vpft.len(),
        corpus.stage1.len(),
        corpus.stage2.len(),
        t.elapsed()
    );
    let mut cfg = RegimeConfig::default();
    cfg.model.seed = seed;
    cfg.supervised.seed = seed;
    cfg.stage1.seed = seed + 100;
    cfg.grpo.seed = seed + 200;
    cfg.supervised.epochs = knob("SUP_EPOCHS", 30);
    cfg.stage1.epochs = knob("S1_EPOCHS", 10);
    cfg.grpo.epochs = knob("S2_EPOCHS", 10);
    cfg.grpo.prefixes_per_epoch = Some(knob("S2_PREFIXES", 400));
    cfg.optim.lr = knob("LR_E5", 100) as f64 * 1e-5;
    cfg.rl_optim.lr = knob("RL_LR_E5", 30) as f64 * 1e-5;
    let probe_prefixes: Vec<_> = corpus.pool.test().map(|e| vec![e.start.clone()]).collect();

    let t = Instant::now();
    let (vpft, _) = train_vpft(&corpus, &cfg).unwrap();
    let s = eval_suite(&Greedy(&vpft), &corpus.pool, None, &cfg.judge).unwrap();
    println!("vpft: {:?}\n{}", t.elapsed(), s.to_table());

    let t = Instant::now();
    let (vprl, stage1, rep) = train_vprl(&corpus, &cfg).unwrap();
    let s1 = eval_suite(&Greedy(&stage1), &corpus.pool, None, &cfg.judge).unwrap();
    let probe = exploration_probe(&stage1, &probe_prefixes, 100, 1.0, 7, &cfg.judge).unwrap();
    let uni = eval_suite(&UniformLegal { seed: 1 }, &corpus.pool, None, &cfg.judge).unwrap();
    println!("stage1:\n{}probe {:?}\nuniform EM {}", s1.to_table(), probe, uni.overall().em_pct);
    let s = eval_suite(&Greedy(&vprl), &corpus.pool, None, &cfg.judge).unwrap();
    let rows = rep.column("stage2", |r| r.mean_reward);
    let k = rows.len() / 10;
    for c in rows.chunks(k.max(1)) {
        let m: f64 = c.iter().map(|v| v.unwrap()).sum::<f64>() / c.len() as f64;
        print!("{m:.3} ");
    }
    println!("\nvprl: {:?}\n{}", t.elapsed(), s.to_table());
}
