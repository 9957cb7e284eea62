use std::fs;
use std::path::Path;
use std::process::Command;

use visplan_cli::run::{cmd_eval, cmd_gen, cmd_render, cmd_report, cmd_train, GEN_MANIFEST};
use visplan_cli::{EvalSource, ExperimentConfig, Regime, RenderTarget, TrainOptions, TrainOutcome, Workspace};
use visplan_core::corpus::load_corpus;
use visplan_core::gridworld::text::{encode_layout, encode_state};

const SMOKE: &str = include_str!("../../../configs/smoke.toml");

fn smoke() -> ExperimentConfig {
    ExperimentConfig::from_toml(SMOKE).unwrap()
}

fn ws(root: &Path) -> Workspace {
    Workspace::new(root, smoke()).unwrap()
}

fn opts(resume: bool, halt_after: Option<usize>) -> TrainOptions {
    TrainOptions { resume, force: false, halt_after }
}

fn finished(o: TrainOutcome) -> visplan_cli::RunManifest {
    match o {
        TrainOutcome::Finished(m) => m,
        other => panic!("expected a finished run, got {other:?}"),
    }
}

fn visplan(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_visplan"))
        .env("VISPLAN_OUT", out)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let straight = tempfile::tempdir().unwrap();
    let a = ws(straight.path());
    cmd_gen(&a, false).unwrap();
    let full_vpft = finished(cmd_train(&a, Regime::Vpft, &opts(false, None)).unwrap());
    let full_vprl = finished(cmd_train(&a, Regime::Vprl, &opts(false, None)).unwrap());

    let broken = tempfile::tempdir().unwrap();
    let b = ws(broken.path());
    cmd_gen(&b, false).unwrap();
    assert_eq!(cmd_train(&b, Regime::Vpft, &opts(false, Some(1))).unwrap(), TrainOutcome::Halted { epochs: 1 });
    assert_eq!(finished(cmd_train(&b, Regime::Vpft, &opts(true, None)).unwrap()), full_vpft);

    // halt inside Stage 2, after crossing the stage boundary
    assert_eq!(cmd_train(&b, Regime::Vprl, &opts(false, Some(3))).unwrap(), TrainOutcome::Halted { epochs: 3 });
    assert_eq!(finished(cmd_train(&b, Regime::Vprl, &opts(true, None)).unwrap()), full_vprl);
}

#[test]
fn resume_refuses_a_changed_config() {
    let root = tempfile::tempdir().unwrap();
    let a = ws(root.path());
    cmd_gen(&a, false).unwrap();
    cmd_train(&a, Regime::Vpft, &opts(false, Some(1))).unwrap();
    let mut cfg = smoke();
    cfg.optim.lr *= 2.0;
    let b = Workspace::new(root.path(), cfg).unwrap();
    let err = cmd_train(&b, Regime::Vpft, &opts(true, None)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let run = |threads: usize| {
        let root = tempfile::tempdir().unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let w = ws(root.path());
            cmd_gen(&w, false).unwrap();
            let m = finished(cmd_train(&w, Regime::Vprl, &opts(false, None)).unwrap());
            let (summary, _) = cmd_eval(&w, &EvalSource::Regime(Regime::Vprl), "vprl", false).unwrap();
            (fs::read(w.corpus_dir().join(GEN_MANIFEST)).unwrap(), m, summary.to_table())
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn oracle_is_perfect_and_report_collects_evaluations() {
    let root = tempfile::tempdir().unwrap();
    let w = ws(root.path());
    cmd_gen(&w, false).unwrap();
    assert!(w.corpus_dir().join(GEN_MANIFEST).exists());
    let (oracle, warnings) = cmd_eval(&w, &EvalSource::Oracle, "oracle", false).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(oracle.overall().em_pct, 100.0);
    assert_eq!(oracle.overall().pr_pct, 100.0);
    assert_eq!(oracle.overall().invalid_failure_ratio, None);
    let (uniform, _) = cmd_eval(&w, &EvalSource::Uniform { seed: 0 }, "uniform", false).unwrap();
    assert!(uniform.overall().em_pct < 100.0);

    // a second eval under the same label needs --force
    assert_eq!(cmd_eval(&w, &EvalSource::Oracle, "oracle", false).unwrap_err().exit_code(), 3);
    cmd_eval(&w, &EvalSource::Oracle, "oracle", true).unwrap();

    let report = fs::read_to_string(cmd_report(&w).unwrap()).unwrap();
    assert!(report.contains("oracle") && report.contains("uniform"), "{report}");
}

#[test]
fn render_draws_corpus_envs_and_trajectory_files() {
    let root = tempfile::tempdir().unwrap();
    let w = ws(root.path());
    cmd_gen(&w, false).unwrap();
    let corpus = load_corpus(&w.corpus_dir()).unwrap();
    let env = &corpus.pool.envs[0];
    let paths = cmd_render(&w, &RenderTarget::Env(env.id.clone()), false).unwrap();
    assert!(paths.len() >= 2);
    assert!(paths.iter().all(|p| fs::read(p).unwrap().starts_with(b"P5")));

    let file = root.path().join("walk.txt");
    fs::write(&file, format!("{}\n{}\n", encode_layout(&env.start.layout), encode_state(&env.start))).unwrap();
    let paths = cmd_render(&w, &RenderTarget::Trajectory(file), false).unwrap();
    assert_eq!(paths.len(), 2);

    let err = cmd_render(&w, &RenderTarget::Env("nope".into()), false).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn binary_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("smoke.toml");
    fs::write(&cfg, SMOKE).unwrap();
    let cfg = cfg.to_str().unwrap();

    // usage errors
    assert_eq!(visplan(root.path(), &["train"]).status.code(), Some(2));
    // config errors: unknown key and invalid value
    let bad = root.path().join("bad.toml");
    fs::write(&bad, SMOKE.replace("[model]", "[model]\nwidth = 3")).unwrap();
    assert_eq!(visplan(root.path(), &["gen", "-c", bad.to_str().unwrap()]).status.code(), Some(2));
    fs::write(&bad, SMOKE.replace("n_heads = 4", "n_heads = 5")).unwrap();
    assert_eq!(visplan(root.path(), &["gen", "-c", bad.to_str().unwrap()]).status.code(), Some(2));
    // data errors: training before gen, then regenerating without --force
    assert_eq!(visplan(root.path(), &["train", "-c", cfg, "--regime", "vpft"]).status.code(), Some(3));
    let ok = visplan(root.path(), &["gen", "-c", cfg]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(root.path().join("smoke/corpus").exists());
    assert_eq!(visplan(root.path(), &["gen", "-c", cfg]).status.code(), Some(3));
    assert_eq!(visplan(root.path(), &["gen", "-c", cfg, "--force"]).status.code(), Some(0));

    let out = visplan(root.path(), &["eval", "-c", cfg, "--source", "oracle"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("100.00"));
}

#[test]
fn defaults_round_trip_through_the_parser() {
    let out = Command::new(env!("CARGO_BIN_EXE_visplan")).args(["defaults", "--name", "x"]).output().unwrap();
    let cfg = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, ExperimentConfig::desk("x", 0));
}
