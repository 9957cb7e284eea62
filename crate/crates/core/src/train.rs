//! Training regimes: supervised next-state fitting (used for VPFT, the
//! random-walk warm-up, and VPFT initialized from the warm-up) and
//! group-relative policy optimization with a clipped surrogate and a KL
//! anchor to a frozen reference.

use crate::corpus::{Corpus, PrefixPair};
use crate::gridworld::{compute_progress_map, EnvState, ProgressMap};
use crate::parse::{ParseConfig, ParsedOutcome};
use crate::policy::optim::{AdamW, OptimConfig};
use crate::policy::{
    encode_state, grad_token_weighted, judge_tokens, plugin_entropy, policy_context, sample_group_scored, token_logprobs, Frame,
    Params, PolicyError, Token, WeightedTokens,
};
use crate::raster::TileAtlas;
use crate::reward::{classify, progress_reward, ActionClass, RewardConfig};
use crate::{par, rng};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("numeric failure at {stage} step {step}: {msg}")]
    Numeric { stage: String, step: usize, msg: String },
    #[error("nothing to train on: {0}")]
    Empty(String),
    #[error("{0}")]
    Hook(String),
}

/// Settings for the supervised regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            epochs: 10,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    /// Candidates sampled per prefix.
    pub group_size: usize,
    /// Clip radius of the importance ratio.
    pub epsilon: f64,
    /// Weight of the KL penalty to the reference policy.
    pub beta: f64,
    pub temperature: f64,
    pub epochs: usize,
    /// Prefixes per update.
    pub batch_size: usize,
    /// Cap on prefixes visited per epoch (drawn from the epoch's shuffle).
    #[serde(default)]
    pub prefixes_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 10,
            epsilon: 0.2,
            beta: 0.001,
            temperature: 1.0,
            epochs: 10,
            batch_size: 8,
            prefixes_per_epoch: None,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.group_size < 2 {
            return Err("group_size must be at least 2".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err("epsilon must lie in (0, 1)".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err("beta must be non-negative".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err("temperature must be positive".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Rendering, parsing and reward settings shared by training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Judge {
    pub atlas: TileAtlas,
    pub parse: ParseConfig,
    pub reward: RewardConfig,
}

impl Default for Judge {
    fn default() -> Self {
        Judge {
            atlas: TileAtlas::default(),
            parse: ParseConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

impl Judge {
    /// Parse and score sampled tokens against their input state.
    pub fn score(&self, input: &EnvState, tokens: &[Token], pmap: &ProgressMap) -> (f64, ActionClass, ParsedOutcome) {
        let outcome = judge_tokens(input, tokens, &self.atlas, &self.parse);
        let cls = classify(input, &outcome, pmap);
        (progress_reward(cls, &self.reward), cls, outcome)
    }

    /// Digest of every setting that affects classification; training and
    /// evaluation must agree on it.
    pub fn digest(&self) -> String {
        let v = serde_json::json!({
            "tile_px": self.atlas.tile_px,
            "wall_thickness": self.atlas.wall_thickness,
            "parse": self.parse,
            "reward": self.reward,
        });
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

// ---- report ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub step: usize,
    pub mean_reward: Option<f64>,
    pub reward_std: Option<f64>,
    pub loss: f64,
    pub kl: Option<f64>,
    pub invalid_ratio: Option<f64>,
    pub entropy: Option<f64>,
}

/// Rewards and advantages of one sampled group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLog {
    pub step: usize,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<StepRecord>,
    pub groups: Vec<GroupLog>,
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl TrainReport {
    pub fn append(&mut self, other: TrainReport) {
        self.rows.extend(other.rows);
        self.groups.extend(other.groups);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,step,mean_reward,reward_std,loss,kl,invalid_ratio,entropy\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.stage,
                r.step,
                opt_field(r.mean_reward),
                opt_field(r.reward_std),
                r.loss,
                opt_field(r.kl),
                opt_field(r.invalid_ratio),
                opt_field(r.entropy)
            );
        }
        out
    }

    pub fn groups_csv(&self) -> String {
        let mut out = String::from("step,rewards,advantages\n");
        for g in &self.groups {
            let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
            let _ = writeln!(out, "{},{},{}", g.step, join(&g.rewards), join(&g.advantages));
        }
        out
    }

    /// One column of a stage, in step order; `None` where the value is absent.
    pub fn column(&self, stage: &str, field: fn(&StepRecord) -> Option<f64>) -> Vec<Option<f64>> {
        self.rows.iter().filter(|r| r.stage == stage).map(field).collect()
    }
}

/// Gaussian-smoothed copy of a series (kernel truncated at 3σ, renormalized
/// over present neighbours). The input is left untouched.
pub fn gaussian_smooth(values: &[Option<f64>], sigma: f64) -> Vec<Option<f64>> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    (0..values.len() as isize)
        .map(|i| {
            let (mut num, mut den) = (0.0, 0.0);
            for j in (i - radius).max(0)..=(i + radius).min(values.len() as isize - 1) {
                if let Some(v) = values[j as usize] {
                    let w = (-((j - i) as f64).powi(2) / (2.0 * sigma * sigma)).exp();
                    num += w * v;
                    den += w;
                }
            }
            (den > 0.0).then(|| num / den)
        })
        .collect()
}

/// Smoothing width used for derived report views.
pub const REPORT_SIGMA: f64 = 5.0;

// ---- GRPO pieces ----------------------------------------------------------

/// Floor below which a reward spread counts as zero.
pub const STD_FLOOR: f64 = 1e-8;

/// Group-normalized advantages `(r - mean) / std` with the population
/// standard deviation; all zeros when the spread is below [`STD_FLOOR`].
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len().max(1) as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < STD_FLOOR {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// `min(ρA, clip(ρ, 1-ε, 1+ε)A)`.
pub fn clipped_surrogate(rho: f64, advantage: f64, epsilon: f64) -> f64 {
    (rho * advantage).min(rho.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// Derivative of [`clipped_surrogate`] with respect to `log ρ`.
pub fn surrogate_slope(rho: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if rho * advantage <= clipped {
        rho * advantage
    } else {
        0.0
    }
}

/// Largest log-ratio magnitude before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 20.0;

/// Mean over tokens of `exp(lr - lt) - (lr - lt) - 1`, a non-negative
/// estimate of KL(θ ‖ ref) from tokens sampled under θ.
pub fn kl_estimate(logp_theta: &[f64], logp_ref: &[f64]) -> f64 {
    if logp_theta.is_empty() {
        return 0.0;
    }
    logp_theta
        .iter()
        .zip(logp_ref)
        .map(|(&lt, &lr)| {
            let x = (lr - lt).clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
            x.exp() - x - 1.0
        })
        .sum::<f64>()
        / logp_theta.len() as f64
}

/// Everything recorded about one prefix's sampled group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub prefix: Vec<Token>,
    pub candidates: Vec<Vec<Token>>,
    pub outcomes: Vec<ParsedOutcome>,
    pub classes: Vec<ActionClass>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Sequence log-probability of each candidate under the behavior snapshot.
    pub behavior_logp: Vec<f64>,
    pub ratios: Vec<f64>,
    pub kl: Vec<f64>,
}

/// A GRPO input: visited states and the progress map of their layout.
pub struct PrefixInput<'a> {
    pub states: &'a [EnvState],
    pub pmap: &'a ProgressMap,
}

/// First index of each distinct candidate, and each candidate's slot in
/// that list.
fn distinct(candidates: &[Vec<Token>]) -> (Vec<usize>, Vec<usize>) {
    let mut uniq: Vec<usize> = Vec::new();
    let slot = (0..candidates.len())
        .map(|k| match uniq.iter().position(|&u| candidates[u] == candidates[k]) {
            Some(j) => j,
            None => {
                uniq.push(k);
                uniq.len() - 1
            }
        })
        .collect();
    (uniq, slot)
}

/// Gradient items for one group: repeated candidates are folded into a
/// single item with summed token weights, and all-zero items are dropped.
/// The weighted log-likelihood is linear in the weights, so the gradient is
/// unchanged.
fn merge_candidates(frame: Frame, ctx: &[Token], candidates: &[Vec<Token>], weights: Vec<Vec<f64>>) -> Vec<WeightedTokens> {
    let (uniq, slot) = distinct(candidates);
    let mut merged: Vec<Vec<f64>> = uniq.iter().map(|&u| vec![0.0; candidates[u].len()]).collect();
    for (k, w) in weights.into_iter().enumerate() {
        for (a, b) in merged[slot[k]].iter_mut().zip(w) {
            *a += b;
        }
    }
    uniq.iter()
        .zip(merged)
        .filter(|(_, w)| w.iter().any(|&x| x != 0.0))
        .map(|(&u, weights)| WeightedTokens {
            frame,
            prefix: ctx.to_vec(),
            cont: candidates[u].clone(),
            weights,
        })
        .collect()
}

/// One GRPO update over a batch of prefixes. Candidates are sampled from
/// `behavior` only; `params` is updated in place unless every token weight
/// is zero, in which case it stays bit-identical.
///
/// Returns the objective value (before the update) and the group logs.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step(
    params: &mut Params,
    opt: &mut AdamW,
    behavior: &Params,
    reference: &Params,
    prefixes: &[PrefixInput],
    cfg: &GrpoConfig,
    judge: &Judge,
    seed: u64,
) -> Result<(f64, Vec<GroupSample>), TrainError> {
    let g = cfg.group_size;
    let scale = 1.0 / (g * prefixes.len().max(1)) as f64;
    let same_behavior = behavior.data == params.data;
    let mut objective = 0.0;
    let mut items = Vec::new();
    let mut logs = Vec::new();
    for (b, pre) in prefixes.iter().enumerate() {
        let input = pre.states.last().ok_or(PolicyError::EmptyPrefix)?;
        let frame = Frame::of(input);
        let ctx = policy_context(behavior, pre.states);
        let (candidates, sampled_lp): (Vec<_>, Vec<_>) =
            sample_group_scored(behavior, frame, &ctx, g, cfg.temperature, rng::derive(seed, &[b as u64]))?
                .into_iter()
                .unzip();
        let scored = par::map(&candidates, |c| judge.score(input, c, pre.pmap));
        let rewards: Vec<f64> = scored.iter().map(|s| s.0).collect();
        let advantages = compute_advantages(&rewards);
        // identical candidates share their scores
        let (uniq, slot) = distinct(&candidates);
        let seq_lp = |p: &Params| -> Result<Vec<Vec<f64>>, PolicyError> {
            let lp: Vec<Vec<f64>> =
                par::map(&uniq, |&u| token_logprobs(p, frame, &ctx, &candidates[u])).into_iter().collect::<Result<_, _>>()?;
            Ok(slot.iter().map(|&j| lp[j].clone()).collect())
        };
        let mut weighted = Vec::with_capacity(g);
        // the sampler already scored the candidates under the behavior weights
        let old = sampled_lp;
        let theta = if same_behavior { old.clone() } else { seq_lp(params)? };
        let refs = if cfg.beta > 0.0 { seq_lp(reference)? } else { theta.clone() };
        let mut ratios = Vec::with_capacity(g);
        let mut kls = Vec::with_capacity(g);
        for k in 0..g {
            let log_ratio = (theta[k].iter().sum::<f64>() - old[k].iter().sum::<f64>())
                .clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
            let rho = log_ratio.exp();
            let kl = kl_estimate(&theta[k], &refs[k]);
            objective += scale * (clipped_surrogate(rho, advantages[k], cfg.epsilon) - cfg.beta * kl);
            let slope = surrogate_slope(rho, advantages[k], cfg.epsilon);
            let n_tok = theta[k].len() as f64;
            let weights: Vec<f64> = theta[k]
                .iter()
                .zip(&refs[k])
                .map(|(&lt, &lr)| {
                    let x = (lr - lt).clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
                    scale * (slope + cfg.beta * (x.exp() - 1.0) / n_tok)
                })
                .collect();
            weighted.push(weights);
            ratios.push(rho);
            kls.push(kl);
        }
        items.extend(merge_candidates(frame, &ctx, &candidates, weighted));
        logs.push(GroupSample {
            prefix: ctx,
            outcomes: scored.iter().map(|s| s.2).collect(),
            classes: scored.iter().map(|s| s.1).collect(),
            rewards,
            advantages,
            behavior_logp: old.iter().map(|v| v.iter().sum()).collect(),
            ratios,
            kl: kls,
            candidates,
        });
    }
    if !items.is_empty() {
        let (grad, _) = grad_token_weighted(params, &items)?;
        let descent: Vec<f64> = grad.iter().map(|x| -x).collect();
        opt.step(params, &descent);
    }
    Ok((objective, logs))
}

// ---- supervised -------------------------------------------------------------

/// One supervised update: each pair contributes the negative log-likelihood
/// of one uniformly drawn candidate. Returns the mean loss before the update.
pub fn vpft_step(params: &mut Params, opt: &mut AdamW, batch: &[&PrefixPair], seed: u64) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Empty("empty batch".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let mut r = rng::rng(seed);
    let items: Vec<WeightedTokens> = batch
        .iter()
        .map(|pair| {
            let target = &pair.candidates[r.gen_range(0..pair.candidates.len())];
            let cont = encode_state(target);
            WeightedTokens {
                frame: Frame::of(target),
                prefix: policy_context(params, &pair.prefix),
                weights: vec![w; cont.len()],
                cont,
            }
        })
        .collect();
    let (grad, logps) = grad_token_weighted(params, &items)?;
    let loss = -logps.iter().map(|v| v.iter().sum::<f64>()).sum::<f64>() * w;
    let descent: Vec<f64> = grad.iter().map(|x| -x).collect();
    opt.step(params, &descent);
    Ok(loss)
}

/// State handed to the per-epoch callback.
pub struct EpochEnd<'a> {
    pub stage: &'a str,
    /// Number of completed epochs in this stage.
    pub epoch: usize,
    pub params: &'a Params,
    pub opt: &'a AdamW,
    pub report: &'a TrainReport,
}

pub type EpochHook<'h> = dyn FnMut(EpochEnd) -> Result<(), TrainError> + 'h;

fn check_finite(params: &Params, stage: &str, step: usize, loss: f64) -> Result<(), TrainError> {
    if !loss.is_finite() || !params.all_finite() {
        return Err(TrainError::Numeric {
            stage: stage.to_string(),
            step,
            msg: "loss or weights became non-finite".into(),
        });
    }
    Ok(())
}

/// Supervised training over prefix pairs, resuming at `start_epoch`.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    stage: &str,
    params: &mut Params,
    opt: &mut AdamW,
    pairs: &[PrefixPair],
    cfg: &SupervisedConfig,
    start_epoch: usize,
    report: &mut TrainReport,
    hook: &mut EpochHook,
) -> Result<(), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::Empty(format!("{stage} has no pairs")));
    }
    let per_epoch = pairs.len().div_ceil(cfg.batch_size.max(1));
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng::rng_at(cfg.seed, &[epoch as u64]));
        for (b, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let step = epoch * per_epoch + b;
            let batch: Vec<&PrefixPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let loss = vpft_step(params, opt, &batch, rng::derive(cfg.seed, &[epoch as u64, b as u64, 1]))?;
            check_finite(params, stage, step, loss)?;
            report.rows.push(StepRecord {
                stage: stage.to_string(),
                step,
                mean_reward: None,
                reward_std: None,
                loss,
                kl: None,
                invalid_ratio: None,
                entropy: None,
            });
        }
        hook(EpochEnd {
            stage,
            epoch: epoch + 1,
            params,
            opt,
            report,
        })?;
    }
    Ok(())
}

/// Random-walk warm-up: supervised training on every (prefix, successor)
/// pair of the Stage 1 set.
pub fn train_stage1(
    params: &mut Params,
    opt: &mut AdamW,
    corpus: &Corpus,
    cfg: &SupervisedConfig,
    start_epoch: usize,
    report: &mut TrainReport,
    hook: &mut EpochHook,
) -> Result<(), TrainError> {
    train_supervised("stage1", params, opt, &flatten_pairs(&corpus.stage1), cfg, start_epoch, report, hook)
}

/// One single-candidate pair per (prefix, successor), so every legal
/// successor is fitted in every epoch.
pub fn flatten_pairs(pairs: &[PrefixPair]) -> Vec<PrefixPair> {
    pairs
        .iter()
        .flat_map(|p| {
            p.candidates.iter().map(move |c| PrefixPair {
                env: p.env,
                prefix: p.prefix.clone(),
                candidates: vec![c.clone()],
            })
        })
        .collect()
}

/// Progress maps for every environment of the corpus pool, by index.
pub fn pool_progress_maps(corpus: &Corpus) -> Vec<ProgressMap> {
    par::map(&corpus.pool.envs, |e| compute_progress_map(e.layout()))
}

/// GRPO over the Stage 2 prefixes. The behavior snapshot is refreshed
/// before every update; `reference` stays fixed throughout.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    params: &mut Params,
    opt: &mut AdamW,
    reference: &Params,
    corpus: &Corpus,
    pmaps: &[ProgressMap],
    cfg: &GrpoConfig,
    judge: &Judge,
    start_epoch: usize,
    report: &mut TrainReport,
    hook: &mut EpochHook,
) -> Result<(), TrainError> {
    cfg.validate().map_err(TrainError::Empty)?;
    let prefixes = &corpus.stage2;
    if prefixes.is_empty() {
        return Err(TrainError::Empty("stage2 has no prefixes".into()));
    }
    let visit = cfg.prefixes_per_epoch.unwrap_or(usize::MAX).min(prefixes.len());
    let per_epoch = visit.div_ceil(cfg.batch_size);
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..prefixes.len()).collect();
        order.shuffle(&mut rng::rng_at(cfg.seed, &[epoch as u64, 2]));
        order.truncate(visit);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * per_epoch + b;
            let inputs: Vec<PrefixInput> = chunk
                .iter()
                .map(|&i| PrefixInput {
                    states: &prefixes[i].states,
                    pmap: &pmaps[prefixes[i].env],
                })
                .collect();
            let behavior = params.clone();
            let (objective, groups) = grpo_step(
                params,
                opt,
                &behavior,
                reference,
                &inputs,
                cfg,
                judge,
                rng::derive(cfg.seed, &[epoch as u64, b as u64, 3]),
            )?;
            check_finite(params, "stage2", step, objective)?;
            let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
            let n = rewards.len() as f64;
            let mean = rewards.iter().sum::<f64>() / n;
            let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            let invalid = groups.iter().flat_map(|g| &g.classes).filter(|&&c| c == ActionClass::Invalid).count();
            let mut counts = [0usize; 6];
            for o in groups.iter().flat_map(|g| &g.outcomes) {
                if let ParsedOutcome::Action(a) = o {
                    counts[a.index()] += 1;
                }
            }
            let kl = groups.iter().flat_map(|g| &g.kl).sum::<f64>() / n;
            report.rows.push(StepRecord {
                stage: "stage2".into(),
                step,
                mean_reward: Some(mean),
                reward_std: Some(std),
                loss: -objective,
                kl: Some(kl),
                invalid_ratio: Some(invalid as f64 / n),
                entropy: Some(plugin_entropy(&counts)),
            });
            for g in groups {
                report.groups.push(GroupLog {
                    step,
                    rewards: g.rewards,
                    advantages: g.advantages,
                });
            }
        }
        hook(EpochEnd {
            stage: "stage2",
            epoch: epoch + 1,
            params,
            opt,
            report,
        })?;
    }
    Ok(())
}

/// Everything needed to run one regime end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeConfig {
    pub model: crate::policy::ModelConfig,
    /// Optimizer for the supervised regimes.
    pub optim: OptimConfig,
    /// Optimizer for GRPO, which needs a smaller step.
    pub rl_optim: OptimConfig,
    pub supervised: SupervisedConfig,
    pub stage1: SupervisedConfig,
    pub grpo: GrpoConfig,
    pub judge: Judge,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        RegimeConfig {
            model: Default::default(),
            supervised: SupervisedConfig {
                epochs: 30,
                ..Default::default()
            },
            optim: OptimConfig {
                lr: 1e-3,
                ..Default::default()
            },
            rl_optim: OptimConfig {
                lr: 3e-4,
                ..Default::default()
            },
            stage1: Default::default(),
            grpo: Default::default(),
            judge: Default::default(),
        }
    }
}

fn no_hook(_: EpochEnd) -> Result<(), TrainError> {
    Ok(())
}

/// Supervised fine-tuning on optimal trajectories from a fresh model.
pub fn train_vpft(corpus: &Corpus, cfg: &RegimeConfig) -> Result<(Params, TrainReport), TrainError> {
    let mut params = Params::init(cfg.model);
    let mut opt = AdamW::new(cfg.optim, &params);
    let mut report = TrainReport::default();
    train_supervised("vpft", &mut params, &mut opt, &corpus.vpft, &cfg.supervised, 0, &mut report, &mut no_hook)?;
    Ok((params, report))
}

/// Warm-up followed by GRPO; returns the final and the warm-up weights.
pub fn train_vprl(corpus: &Corpus, cfg: &RegimeConfig) -> Result<(Params, Params, TrainReport), TrainError> {
    let mut params = Params::init(cfg.model);
    let mut opt = AdamW::new(cfg.optim, &params);
    let mut report = TrainReport::default();
    train_stage1(&mut params, &mut opt, corpus, &cfg.stage1, 0, &mut report, &mut no_hook)?;
    let reference = params.clone();
    let mut opt = AdamW::new(cfg.rl_optim, &params);
    let pmaps = pool_progress_maps(corpus);
    train_stage2(
        &mut params,
        &mut opt,
        &reference,
        corpus,
        &pmaps,
        &cfg.grpo,
        &cfg.judge,
        0,
        &mut report,
        &mut no_hook,
    )?;
    Ok((params, reference, report))
}

/// Supervised fine-tuning on optimal trajectories, starting from warm-up weights.
pub fn train_vpft_star(corpus: &Corpus, stage1: &Params, cfg: &RegimeConfig) -> Result<(Params, TrainReport), TrainError> {
    let mut params = stage1.clone();
    let mut opt = AdamW::new(cfg.optim, &params);
    let mut report = TrainReport::default();
    train_supervised("vpft-star", &mut params, &mut opt, &corpus.vpft, &cfg.supervised, 0, &mut report, &mut no_hook)?;
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, CorpusSpec};
    use crate::gridworld::TaskKind;
    use crate::policy::ModelConfig;

    #[test]
    fn advantages_population_convention() {
        let a = compute_advantages(&[1.0, 0.0, 0.0]);
        // mean 1/3, population std sqrt(2)/3
        let expected = [2f64.sqrt(), -1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
        for (x, y) in a.iter().zip(expected) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(compute_advantages(&[-5.0; 10]), vec![0.0; 10]);
    }

    #[test]
    fn advantages_are_normalized() {
        let r = [1.0, 0.0, -5.0, 1.0, 1.0, 0.0, -5.0, 0.0, 1.0, 1.0];
        let a = compute_advantages(&r);
        let mean = a.iter().sum::<f64>() / 10.0;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 10.0).sqrt();
        assert!(mean.abs() < 1e-12 && (std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_grid() {
        let eps = 0.2;
        for rho in [0.5f64, 1.0, 1.5] {
            for a in [-1.0f64, 1.0] {
                let expected = (rho * a).min(rho.clamp(0.8, 1.2) * a);
                assert_eq!(clipped_surrogate(rho, a, eps), expected);
            }
        }
        // clipped branch active: no gradient
        assert_eq!(surrogate_slope(1.5, 1.0, eps), 0.0);
        assert_eq!(surrogate_slope(0.5, -1.0, eps), 0.0);
        // unclipped branch
        assert_eq!(surrogate_slope(0.5, 1.0, eps), 0.5);
        assert_eq!(surrogate_slope(1.5, -1.0, eps), -1.5);
        assert_eq!(surrogate_slope(1.0, 1.0, eps), 1.0);
    }

    #[test]
    fn kl_properties() {
        assert_eq!(kl_estimate(&[-1.0, -2.0], &[-1.0, -2.0]), 0.0);
        assert!(kl_estimate(&[-0.1, -3.0], &[-2.0, -0.5]) > 0.0);
    }

    #[test]
    fn smoothing_is_a_view() {
        let raw = vec![Some(0.0), Some(10.0), None, Some(0.0)];
        let s = gaussian_smooth(&raw, 1.0);
        assert_eq!(raw[1], Some(10.0));
        assert_eq!(s.len(), 4);
        assert!(s[2].is_some());
        let flat = gaussian_smooth(&[Some(2.0); 6], 5.0);
        assert!(flat.iter().all(|v| (v.unwrap() - 2.0).abs() < 1e-12));
    }

    fn tiny() -> (Corpus, RegimeConfig) {
        let corpus = build_corpus(&CorpusSpec {
            task: TaskKind::FrozenLake,
            sizes: vec![3],
            n_per_size: 12,
            test_fraction: 0.25,
            stage1_budget: 60,
            stage1_depth_cap: 4,
            ood: false,
            seed: 1,
        })
        .unwrap();
        let cfg = RegimeConfig {
            model: ModelConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                max_size: 4,
                max_states: 10,
                seed: 3,
            },
            supervised: SupervisedConfig {
                epochs: 1,
                batch_size: 4,
                seed: 1,
            },
            stage1: SupervisedConfig {
                epochs: 1,
                batch_size: 4,
                seed: 2,
            },
            grpo: GrpoConfig {
                epochs: 1,
                group_size: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        (corpus, cfg)
    }

    #[test]
    fn vpft_loss_drops_on_toy_corpus() {
        let (corpus, mut cfg) = tiny();
        cfg.optim.lr = 3e-3;
        let pairs: Vec<&PrefixPair> = corpus.vpft.iter().take(10).collect();
        let mut params = Params::init(cfg.model);
        let mut opt = AdamW::new(cfg.optim, &params);
        let first = vpft_step(&mut params, &mut opt, &pairs, 0).unwrap();
        let mut last = first;
        for s in 1..200 {
            last = vpft_step(&mut params, &mut opt, &pairs, s).unwrap();
            assert!(last >= 0.0);
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn zero_advantage_with_zero_beta_keeps_params() {
        let (corpus, cfg) = tiny();
        let params0 = Params::init(cfg.model);
        let mut params = params0.clone();
        let mut opt = AdamW::new(cfg.optim, &params);
        let pmaps = pool_progress_maps(&corpus);
        let pre = &corpus.stage2[0];
        // an untrained model almost never produces a valid state: every
        // candidate is invalid and the group has no spread
        let grpo = GrpoConfig {
            beta: 0.0,
            group_size: 4,
            ..Default::default()
        };
        let (_, logs) = grpo_step(
            &mut params,
            &mut opt,
            &params0,
            &params0,
            &[PrefixInput {
                states: &pre.states,
                pmap: &pmaps[pre.env],
            }],
            &grpo,
            &Judge::default(),
            5,
        )
        .unwrap();
        assert!(logs[0].advantages.iter().all(|&a| a == 0.0));
        assert_eq!(params, params0);
        assert!(logs[0].ratios.iter().all(|&r| r == 1.0));
    }

    #[test]
    fn merging_duplicates_keeps_the_gradient() {
        let (corpus, cfg) = tiny();
        let p = Params::init(cfg.model);
        let pre = &corpus.stage2[0];
        let frame = Frame::of(pre.states.last().unwrap());
        let ctx = policy_context(&p, &pre.states);
        let a = encode_state(&pre.states[0]);
        let mut b = a.clone();
        b[3] = if a[3] == 4 { 3 } else { 4 };
        let candidates = vec![a.clone(), b.clone(), a.clone(), a.clone(), b];
        let mut r = rng::rng(4);
        let weights: Vec<Vec<f64>> =
            candidates.iter().map(|c| (0..c.len()).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let merged = merge_candidates(frame, &ctx, &candidates, weights.clone());
        assert_eq!(merged.len(), 2);
        let each: Vec<WeightedTokens> = candidates
            .iter()
            .zip(weights)
            .map(|(c, w)| WeightedTokens {
                frame,
                prefix: ctx.clone(),
                cont: c.clone(),
                weights: w,
            })
            .collect();
        let (g1, _) = grad_token_weighted(&p, &merged).unwrap();
        let (g2, _) = grad_token_weighted(&p, &each).unwrap();
        let worst = g1.iter().zip(&g2).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12, "{worst}");
        let zero = vec![vec![0.0; candidates[0].len()]; candidates.len()];
        assert!(merge_candidates(frame, &ctx, &candidates, zero).is_empty());
    }

    #[test]
    fn pipelines_run_and_are_deterministic() {
        let (corpus, cfg) = tiny();
        let (p1, r1) = train_vpft(&corpus, &cfg).unwrap();
        let (p2, _) = train_vpft(&corpus, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1.rows.len(), corpus.vpft.len().div_ceil(4));
        let (v1, reference, rep) = train_vprl(&corpus, &cfg).unwrap();
        let (v2, _, _) = train_vprl(&corpus, &cfg).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(rep.column("stage2", |r| r.mean_reward).len(), corpus.stage2.len().div_ceil(cfg.grpo.batch_size));
        let (star, _) = train_vpft_star(&corpus, &reference, &cfg).unwrap();
        assert_ne!(
            crate::policy::checkpoint::params_digest(&star),
            crate::policy::checkpoint::params_digest(&p1)
        );
    }
}
