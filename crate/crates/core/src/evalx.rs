//! Rollout evaluation: exact match, progress rate, invalid-failure ratio,
//! per-size summaries and a sampling probe of action entropy.

use crate::corpus::{Environment, Pool};
use crate::gridworld::{
    apply_action, compute_progress_map, enumerate_optimal_actions, legal_actions, EnvState, ProgressMap,
};
use crate::parse::{parse_transition, ParsedOutcome};
use crate::policy::{
    decode_tokens, encode_state, greedy_next_state, plugin_entropy, policy_context, sample_group, Frame, Params,
    PolicyError, Token,
};
use crate::raster::{render, Raster, RasterError};
use crate::reward::{classify, ActionClass};
use crate::train::Judge;
use crate::{par, rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepClass {
    Optimal,
    NonOptimal,
    Invalid,
    /// The generated tokens do not decode to a state.
    Malformed,
}

impl From<ActionClass> for StepClass {
    fn from(c: ActionClass) -> Self {
        match c {
            ActionClass::Optimal => StepClass::Optimal,
            ActionClass::NonOptimal => StepClass::NonOptimal,
            ActionClass::Invalid => StepClass::Invalid,
        }
    }
}

/// One generated plan and its per-step classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub env_id: String,
    /// Horizon: the start state's distance unless overridden.
    pub horizon: usize,
    /// Generated states in token form (one entry per decoded step).
    pub states: Vec<Vec<Token>>,
    pub steps: Vec<StepClass>,
    pub em: bool,
    pub pr: f64,
}

/// Length of the leading run of optimal steps. A step only counts when
/// every earlier step did; optimal steps reduce the distance by exactly one.
pub fn correct_prefix(steps: &[StepClass]) -> usize {
    steps.iter().take_while(|&&c| c == StepClass::Optimal).count()
}

impl RolloutRecord {
    pub fn from_steps(env_id: impl Into<String>, horizon: usize, steps: Vec<StepClass>, states: Vec<Vec<Token>>) -> Self {
        let k = correct_prefix(&steps).min(horizon);
        let pr = if horizon == 0 { 1.0 } else { k as f64 / horizon as f64 };
        RolloutRecord {
            env_id: env_id.into(),
            horizon,
            states,
            em: k == horizon,
            pr,
            steps,
        }
    }

    pub fn has_invalid(&self) -> bool {
        self.steps.iter().any(|c| matches!(c, StepClass::Invalid | StepClass::Malformed))
    }
}

pub fn exact_match(record: &RolloutRecord) -> u8 {
    record.em as u8
}

pub fn progress_rate(record: &RolloutRecord) -> f64 {
    record.pr
}

/// Among failed rollouts, the fraction with at least one invalid step;
/// `None` when nothing failed.
pub fn invalid_failure_ratio<'a>(records: impl IntoIterator<Item = &'a RolloutRecord>) -> Option<f64> {
    let (mut failed, mut invalid) = (0usize, 0usize);
    for r in records {
        if !r.em {
            failed += 1;
            invalid += r.has_invalid() as usize;
        }
    }
    (failed > 0).then(|| invalid as f64 / failed as f64)
}

// ---- planners -----------------------------------------------------------------

/// Anything that proposes the next state's tokens from a visited history.
pub trait Planner: Sync {
    fn next_state(&self, states: &[EnvState], pmap: &ProgressMap) -> Result<Vec<Token>, PolicyError>;
}

/// Greedy decoding of a trained policy.
pub struct Greedy<'a>(pub &'a Params);

impl Planner for Greedy<'_> {
    fn next_state(&self, states: &[EnvState], _: &ProgressMap) -> Result<Vec<Token>, PolicyError> {
        let last = states.last().ok_or(PolicyError::EmptyPrefix)?;
        greedy_next_state(self.0, Frame::of(last), &policy_context(self.0, states))
    }
}

/// Follows the progress map; takes the first optimal action.
pub struct Oracle;

impl Planner for Oracle {
    fn next_state(&self, states: &[EnvState], pmap: &ProgressMap) -> Result<Vec<Token>, PolicyError> {
        let last = states.last().ok_or(PolicyError::EmptyPrefix)?;
        let next = match enumerate_optimal_actions(last, pmap).first() {
            Some(&a) => apply_action(last, a).expect("optimal action is legal"),
            None => last.clone(),
        };
        Ok(encode_state(&next))
    }
}

/// Uniform choice among legal actions, seeded by the visited history.
pub struct UniformLegal {
    pub seed: u64,
}

fn history_key(states: &[EnvState]) -> u64 {
    states
        .iter()
        .flat_map(encode_state)
        .fold(states.len() as u64, |acc, t| rng::mix(acc ^ t as u64))
}

impl Planner for UniformLegal {
    fn next_state(&self, states: &[EnvState], _: &ProgressMap) -> Result<Vec<Token>, PolicyError> {
        let last = states.last().ok_or(PolicyError::EmptyPrefix)?;
        let legal = legal_actions(last);
        if legal.is_empty() {
            return Ok(encode_state(last));
        }
        let mut r = rng::rng_at(self.seed, &[history_key(states)]);
        let a = legal[r.gen_range(0..legal.len())];
        Ok(encode_state(&apply_action(last, a).expect("legal action")))
    }
}

// ---- rollouts -----------------------------------------------------------------

/// Generate `horizon` states (default: the start's distance) and classify
/// each step with the training parse and reward pipeline.
///
/// Generation stops early only when the tokens do not decode. After an
/// invalid step the plan continues from the decoded state when it shares the
/// episode layout; a step that rewrites the static scene ends the rollout,
/// since later steps could not be classified against the episode's map.
pub fn rollout(
    planner: &dyn Planner,
    env_id: &str,
    start: &EnvState,
    pmap: &ProgressMap,
    judge: &Judge,
    horizon: Option<usize>,
) -> Result<RolloutRecord, PolicyError> {
    let n = horizon.unwrap_or_else(|| pmap.distance(start).unwrap_or(0) as usize);
    let mut history = vec![start.clone()];
    let mut steps = Vec::with_capacity(n);
    let mut generated = Vec::with_capacity(n);
    for _ in 0..n {
        let input = history.last().expect("non-empty history").clone();
        let tokens = planner.next_state(&history, pmap)?;
        let decoded = decode_tokens(&tokens, &input.layout);
        generated.push(tokens);
        let Ok(next) = decoded else {
            steps.push(StepClass::Malformed);
            break;
        };
        let outcome = parse_transition(&input, &render(&next, &judge.atlas), &judge.atlas, &judge.parse);
        steps.push(classify(&input, &outcome, pmap).into());
        let same_scene = Arc::ptr_eq(&next.layout, &input.layout);
        history.push(next);
        if !same_scene {
            break;
        }
    }
    Ok(RolloutRecord::from_steps(env_id, n, steps, generated))
}

/// Side-by-side strip of a rollout's start and generated states.
pub fn rollout_strip(start: &EnvState, record: &RolloutRecord, judge: &Judge) -> Result<Raster, RasterError> {
    let mut frames = vec![render(start, &judge.atlas)];
    for t in &record.states {
        match decode_tokens(t, &start.layout) {
            Ok(s) => frames.push(render(&s, &judge.atlas)),
            Err(_) => frames.push(Raster::filled(frames[0].width, frames[0].height, 0)),
        }
    }
    Raster::hstack(&frames)
}

// ---- summaries ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// "test", "ood" or "all".
    pub split: String,
    pub size: Option<usize>,
    pub count: usize,
    pub em_pct: f64,
    pub pr_pct: f64,
    pub failures: usize,
    pub invalid_failures: usize,
    pub invalid_failure_ratio: Option<f64>,
}

impl SummaryRow {
    fn of(split: &str, size: Option<usize>, records: &[&RolloutRecord]) -> SummaryRow {
        let count = records.len();
        let denom = count.max(1) as f64;
        let failures = records.iter().filter(|r| !r.em).count();
        let invalid_failures = records.iter().filter(|r| !r.em && r.has_invalid()).count();
        SummaryRow {
            split: split.into(),
            size,
            count,
            em_pct: 100.0 * records.iter().filter(|r| r.em).count() as f64 / denom,
            pr_pct: 100.0 * records.iter().map(|r| r.pr).sum::<f64>() / denom,
            failures,
            invalid_failures,
            invalid_failure_ratio: invalid_failure_ratio(records.iter().copied()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub task: String,
    pub judge_digest: String,
    /// Per-size test rows, then the aggregate, then OOD if evaluated.
    pub rows: Vec<SummaryRow>,
    pub records: Vec<RolloutRecord>,
}

impl EvalSummary {
    pub fn row(&self, split: &str, size: Option<usize>) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.split == split && r.size == size)
    }

    pub fn overall(&self) -> &SummaryRow {
        self.row("all", None).expect("aggregate row")
    }

    /// Flat table, one row per line.
    pub fn to_table(&self) -> String {
        let mut out = String::from("split\tsize\tcount\tem_pct\tpr_pct\tfailures\tinvalid_failures\tinvalid_failure_ratio\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.2}\t{:.2}\t{}\t{}\t{}",
                r.split,
                r.size.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                r.count,
                r.em_pct,
                r.pr_pct,
                r.failures,
                r.invalid_failures,
                r.invalid_failure_ratio.map(|v| format!("{:.4}", v)).unwrap_or_else(|| "-".into())
            );
        }
        out
    }
}

fn run_all(planner: &dyn Planner, envs: &[&Environment], judge: &Judge) -> Result<Vec<RolloutRecord>, PolicyError> {
    par::map(envs, |e| {
        let pmap = compute_progress_map(e.layout());
        rollout(planner, &e.id, &e.start, &pmap, judge, None)
    })
    .into_iter()
    .collect()
}

/// Roll out on every test environment of `pool` (and every environment of
/// `ood`, when given) and summarize per size. Records keep pool order.
pub fn eval_suite(
    planner: &dyn Planner,
    pool: &Pool,
    ood: Option<&Pool>,
    judge: &Judge,
) -> Result<EvalSummary, PolicyError> {
    let test: Vec<&Environment> = pool.test().collect();
    let mut records = run_all(planner, &test, judge)?;
    let mut by_size: BTreeMap<usize, Vec<&RolloutRecord>> = BTreeMap::new();
    for (e, r) in test.iter().zip(&records) {
        by_size.entry(e.size()).or_default().push(r);
    }
    let mut rows: Vec<SummaryRow> = by_size.iter().map(|(&s, rs)| SummaryRow::of("test", Some(s), rs)).collect();
    rows.push(SummaryRow::of("all", None, &records.iter().collect::<Vec<_>>()));
    if let Some(ood) = ood {
        let envs: Vec<&Environment> = ood.envs.iter().collect();
        let ood_records = run_all(planner, &envs, judge)?;
        let size = envs.first().map(|e| e.size());
        rows.push(SummaryRow::of("ood", size, &ood_records.iter().collect::<Vec<_>>()));
        records.extend(ood_records);
    }
    Ok(EvalSummary {
        task: pool.task.tag().to_string(),
        judge_digest: judge.digest(),
        rows,
        records,
    })
}

// ---- exploration probe ---------------------------------------------------------------

/// Sampled action statistics over a set of prefixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Mean over prefixes of the per-prefix action entropy (nats).
    pub mean_entropy: f64,
    /// Entropy of the action distribution pooled over all prefixes (nats).
    pub pooled_entropy: f64,
    /// Fraction of samples that decode to a state.
    pub wellformed_ratio: f64,
    /// Fraction of samples parsed as invalid (malformed included).
    pub invalid_ratio: f64,
    /// Pooled counts per action index.
    pub counts: [usize; 6],
    pub samples: usize,
}

/// Sample `n` candidates at each prefix and parse them.
pub fn exploration_probe(
    params: &Params,
    prefixes: &[Vec<EnvState>],
    n: usize,
    temperature: f64,
    seed: u64,
    judge: &Judge,
) -> Result<ProbeResult, PolicyError> {
    let mut pooled = [0usize; 6];
    let (mut entropy_sum, mut wellformed, mut invalid) = (0.0, 0usize, 0usize);
    for (i, states) in prefixes.iter().enumerate() {
        let input = states.last().ok_or(PolicyError::EmptyPrefix)?;
        let cands = sample_group(
            params,
            Frame::of(input),
            &policy_context(params, states),
            n,
            temperature,
            rng::derive(seed, &[i as u64]),
        )?;
        let outcomes = par::map(&cands, |t| match decode_tokens(t, &input.layout) {
            Ok(s) => Some(parse_transition(input, &render(&s, &judge.atlas), &judge.atlas, &judge.parse)),
            Err(_) => None,
        });
        let mut counts = [0usize; 6];
        for o in outcomes {
            match o {
                None => invalid += 1,
                Some(o) => {
                    wellformed += 1;
                    match o {
                        ParsedOutcome::Action(a) => counts[a.index()] += 1,
                        ParsedOutcome::Stay => {}
                        ParsedOutcome::Invalid(_) => invalid += 1,
                    }
                }
            }
        }
        entropy_sum += plugin_entropy(&counts);
        for (p, c) in pooled.iter_mut().zip(counts) {
            *p += c;
        }
    }
    let total = (prefixes.len() * n).max(1) as f64;
    Ok(ProbeResult {
        mean_entropy: entropy_sum / prefixes.len().max(1) as f64,
        pooled_entropy: plugin_entropy(&pooled),
        wellformed_ratio: wellformed as f64 / total,
        invalid_ratio: invalid as f64 / total,
        counts: pooled,
        samples: prefixes.len() * n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_environment_pool;
    use crate::gridworld::TaskKind;
    use StepClass::*;

    #[test]
    fn formula_examples() {
        let r = RolloutRecord::from_steps("a", 4, vec![Optimal, Optimal, Invalid, Optimal], vec![]);
        assert_eq!((exact_match(&r), progress_rate(&r)), (0, 0.5));
        let r = RolloutRecord::from_steps("b", 4, vec![Optimal, Optimal, Optimal, NonOptimal], vec![]);
        assert_eq!(progress_rate(&r), 0.75);
        let r = RolloutRecord::from_steps("c", 3, vec![Invalid, Optimal, Optimal], vec![]);
        assert_eq!((exact_match(&r), progress_rate(&r)), (0, 0.0));
        let r = RolloutRecord::from_steps("d", 2, vec![Optimal, Optimal], vec![]);
        assert_eq!((exact_match(&r), progress_rate(&r)), (1, 1.0));
        // early stop on malformed counts the missing steps as wrong
        let r = RolloutRecord::from_steps("e", 4, vec![Optimal, Malformed], vec![]);
        assert_eq!(progress_rate(&r), 0.25);
    }

    #[test]
    fn failure_ratio() {
        let detour = RolloutRecord::from_steps("a", 2, vec![NonOptimal, Optimal], vec![]);
        let broken = RolloutRecord::from_steps("b", 2, vec![Optimal, Invalid], vec![]);
        let fine = RolloutRecord::from_steps("c", 1, vec![Optimal], vec![]);
        assert_eq!(invalid_failure_ratio([&detour, &detour]), Some(0.0));
        assert_eq!(invalid_failure_ratio([&broken, &fine]), Some(1.0));
        assert_eq!(invalid_failure_ratio([&detour, &broken]), Some(0.5));
        assert_eq!(invalid_failure_ratio([&fine]), None);
    }

    #[test]
    fn oracle_is_perfect_and_counts_match() {
        for task in TaskKind::ALL {
            let size = crate::gridworld::size_range(task).0;
            let pool = build_environment_pool(task, &[size], 12, 0.5, 4).unwrap();
            let s = eval_suite(&Oracle, &pool, None, &Judge::default()).unwrap();
            let all = s.overall();
            assert_eq!(all.count, pool.test().count());
            assert_eq!((all.em_pct, all.pr_pct), (100.0, 100.0));
            assert_eq!(all.invalid_failure_ratio, None);
            assert_eq!(s.to_table().lines().count(), 3);
        }
    }

    #[test]
    fn uniform_planner_is_deterministic() {
        let pool = build_environment_pool(TaskKind::FrozenLake, &[4], 16, 0.5, 2).unwrap();
        let j = Judge::default();
        let a = eval_suite(&UniformLegal { seed: 3 }, &pool, None, &j).unwrap();
        let b = eval_suite(&UniformLegal { seed: 3 }, &pool, None, &j).unwrap();
        assert_eq!(a, b);
        assert!(a.records.iter().all(|r| !r.has_invalid()));
    }

    #[test]
    fn strip_spans_all_states() {
        let pool = build_environment_pool(TaskKind::Maze, &[3], 4, 0.5, 1).unwrap();
        let e = pool.test().next().unwrap();
        let pmap = compute_progress_map(e.layout());
        let j = Judge::default();
        let r = rollout(&Oracle, &e.id, &e.start, &pmap, &j, None).unwrap();
        let strip = rollout_strip(&e.start, &r, &j).unwrap();
        let one = render(&e.start, &j.atlas);
        assert_eq!(strip.width, one.width * (r.horizon + 1));
    }
}
