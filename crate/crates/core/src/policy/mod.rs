//! Autoregressive next-state policy over token sequences.
//!
//! The model scores and samples the tokens of the next state given the
//! trajectory context so far. Log-probabilities are exact (teacher-forced),
//! sampling is ancestral with a key/value cache, and gradients come from a
//! hand-written backward pass.

pub mod checkpoint;
mod model;
pub mod optim;
pub mod tokens;

pub use model::{Decoder, ModelConfig, Params};
pub use tokens::{context, decode_tokens, encode_state, Frame, Malformed, Token, VOCAB};

use crate::gridworld::EnvState;
use crate::parse::{parse_transition, ParseConfig, ParsedOutcome};
use crate::raster::{render, TileAtlas};
use crate::{par, rng};
use rand::Rng as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("sequence of {len} tokens exceeds the context capacity {cap}")]
    ContextOverflow { len: usize, cap: usize },
    #[error("grid side {size} exceeds the model's maximum {max}")]
    GridTooLarge { size: usize, max: usize },
    #[error("token {0} is outside the alphabet")]
    BadToken(Token),
    #[error("the prefix must contain at least one token")]
    EmptyPrefix,
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("temperature must be positive and finite")]
    Temperature,
    #[error("weight vector has {found} entries, model needs {expected}")]
    Shape { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn joined(prefix: &[Token], cont: &[Token]) -> Vec<Token> {
    let mut all = Vec::with_capacity(prefix.len() + cont.len());
    all.extend_from_slice(prefix);
    all.extend_from_slice(cont);
    all
}

/// Log-probability of each continuation token given the prefix.
pub fn token_logprobs(p: &Params, frame: Frame, prefix: &[Token], cont: &[Token]) -> Result<Vec<f64>, PolicyError> {
    Ok(model::score(p, frame, &joined(prefix, cont), prefix.len(), None)?.0)
}

/// `log π(cont | prefix)`, summed over the continuation tokens.
pub fn next_state_logprob(p: &Params, frame: Frame, prefix: &[Token], cont: &[Token]) -> Result<f64, PolicyError> {
    Ok(token_logprobs(p, frame, prefix, cont)?.iter().sum())
}

fn prime<'a>(p: &'a Params, frame: Frame, prefix: &[Token]) -> Result<Decoder<'a>, PolicyError> {
    if prefix.is_empty() {
        return Err(PolicyError::EmptyPrefix);
    }
    let mut dec = Decoder::new(p, frame);
    for &t in prefix {
        dec.push(t)?;
    }
    Ok(dec)
}

/// Draws the next state; also returns each token's untempered log-probability.
fn draw(
    dec: &mut Decoder,
    frame: Frame,
    temperature: Option<f64>,
    r: &mut rng::Rng,
) -> Result<(Vec<Token>, Vec<f64>), PolicyError> {
    let n = frame.state_len();
    let mut out = Vec::with_capacity(n);
    let mut logps = Vec::with_capacity(n);
    for i in 0..n {
        let logits = dec.logits();
        let tok = match temperature {
            None => argmax(logits),
            Some(t) => {
                let probs = model::softmax(logits, t);
                let u: f64 = r.gen();
                let mut acc = 0.0;
                let mut pick = probs.len() - 1;
                for (k, q) in probs.iter().enumerate() {
                    acc += q;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                pick
            }
        } as Token;
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        logps.push(logits[tok as usize] - lse);
        out.push(tok);
        if i + 1 < n {
            dec.push(tok)?;
        }
    }
    Ok((out, logps))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_temperature(t: f64) -> Result<(), PolicyError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(PolicyError::Temperature)
    }
}

/// Ancestral sample of the next state's tokens. Pure in `seed`.
pub fn sample_next_state(
    p: &Params,
    frame: Frame,
    prefix: &[Token],
    temperature: f64,
    seed: u64,
) -> Result<Vec<Token>, PolicyError> {
    check_temperature(temperature)?;
    let mut dec = prime(p, frame, prefix)?;
    Ok(draw(&mut dec, frame, Some(temperature), &mut rng::rng(seed))?.0)
}

/// Token-by-token argmax decoding (the zero-temperature limit).
pub fn greedy_next_state(p: &Params, frame: Frame, prefix: &[Token]) -> Result<Vec<Token>, PolicyError> {
    let mut dec = prime(p, frame, prefix)?;
    Ok(draw(&mut dec, frame, None, &mut rng::rng(0))?.0)
}

/// `g` independent samples sharing one prefix pass. Candidate `k` uses the
/// stream derived from `(seed, k)`, so results do not depend on worker count.
pub fn sample_group(
    p: &Params,
    frame: Frame,
    prefix: &[Token],
    g: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Vec<Token>>, PolicyError> {
    Ok(sample_group_scored(p, frame, prefix, g, temperature, seed)?.into_iter().map(|(t, _)| t).collect())
}

/// [`sample_group`] that also returns each candidate's per-token
/// log-probabilities under `p` (at temperature 1).
pub fn sample_group_scored(
    p: &Params,
    frame: Frame,
    prefix: &[Token],
    g: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<(Vec<Token>, Vec<f64>)>, PolicyError> {
    check_temperature(temperature)?;
    let dec = prime(p, frame, prefix)?;
    let ks: Vec<u64> = (0..g as u64).collect();
    par::map(&ks, |&k| {
        let mut d = dec.clone();
        draw(&mut d, frame, Some(temperature), &mut rng::rng_at(seed, &[k]))
    })
    .into_iter()
    .collect()
}

/// One continuation with a weight per token.
#[derive(Debug, Clone)]
pub struct WeightedTokens {
    pub frame: Frame,
    pub prefix: Vec<Token>,
    pub cont: Vec<Token>,
    pub weights: Vec<f64>,
}

/// Gradient of `Σ_items Σ_j weights[j] · log π(cont[j] | ...)` together with
/// each item's per-token log-probabilities. Items are processed in parallel
/// and reduced in input order.
pub fn grad_token_weighted(p: &Params, items: &[WeightedTokens]) -> Result<(Vec<f64>, Vec<Vec<f64>>), PolicyError> {
    let results = par::map(items, |it| {
        model::score(p, it.frame, &joined(&it.prefix, &it.cont), it.prefix.len(), Some(&it.weights))
    });
    let mut grad = vec![0.0; p.len()];
    let mut logps = Vec::with_capacity(items.len());
    for r in results {
        let (lp, g) = r?;
        for (a, b) in grad.iter_mut().zip(g.expect("weights given")) {
            *a += b;
        }
        logps.push(lp);
    }
    Ok((grad, logps))
}

/// Gradient of `Σ weight · log π(cont | prefix)` over a batch.
pub fn grad_weighted_logprob(p: &Params, batch: &[(Frame, Vec<Token>, Vec<Token>, f64)]) -> Result<Vec<f64>, PolicyError> {
    let items: Vec<WeightedTokens> = batch
        .iter()
        .map(|(frame, prefix, cont, w)| WeightedTokens {
            frame: *frame,
            prefix: prefix.clone(),
            cont: cont.clone(),
            weights: vec![*w; cont.len()],
        })
        .collect();
    Ok(grad_token_weighted(p, &items)?.0)
}

/// Context for the next state after `states`, keeping only the most recent
/// states that fit the model's state budget.
pub fn policy_context(p: &Params, states: &[EnvState]) -> Vec<Token> {
    let keep = p.config.max_states.saturating_sub(1).max(1);
    context(&states[states.len().saturating_sub(keep)..])
}

/// Plug-in entropy (nats) of an empirical distribution.
pub fn plugin_entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / n as f64;
            -q * q.ln()
        })
        .sum()
}

/// Outcome of parsing one sampled continuation.
pub fn judge_tokens(input: &EnvState, tokens: &[Token], atlas: &TileAtlas, cfg: &ParseConfig) -> ParsedOutcome {
    match decode_tokens(tokens, &input.layout) {
        Ok(state) => parse_transition(input, &render(&state, atlas), atlas, cfg),
        Err(_) => ParsedOutcome::Invalid(crate::parse::InvalidTransition::MalformedImage),
    }
}

/// Sampled action statistics at one prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyEstimate {
    /// Entropy (nats) of the parsed actions among valid action samples.
    pub entropy: f64,
    /// Per-action counts, indexed by [`Action::index`].
    pub counts: [usize; 6],
    pub samples: usize,
    pub invalid: usize,
    pub stay: usize,
}

impl EntropyEstimate {
    pub fn invalid_ratio(&self) -> f64 {
        self.invalid as f64 / self.samples.max(1) as f64
    }
}

/// Estimate the entropy of the policy's induced action distribution at the
/// end of `states` by sampling `n` candidates and parsing each.
pub fn step_entropy(
    p: &Params,
    states: &[EnvState],
    n: usize,
    temperature: f64,
    seed: u64,
    atlas: &TileAtlas,
    cfg: &ParseConfig,
) -> Result<EntropyEstimate, PolicyError> {
    let input = states.last().ok_or(PolicyError::EmptyPrefix)?;
    let frame = Frame::of(input);
    let samples = sample_group(p, frame, &policy_context(p, states), n, temperature, seed)?;
    let mut est = EntropyEstimate {
        entropy: 0.0,
        counts: [0; 6],
        samples: n,
        invalid: 0,
        stay: 0,
    };
    for outcome in par::map(&samples, |t| judge_tokens(input, t, atlas, cfg)) {
        match outcome {
            ParsedOutcome::Action(a) => est.counts[a.index()] += 1,
            ParsedOutcome::Stay => est.stay += 1,
            ParsedOutcome::Invalid(_) => est.invalid += 1,
        }
    }
    est.entropy = plugin_entropy(&est.counts);
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{gen_layout, spawn_state, TaskKind};
    use std::sync::Arc;

    fn setup() -> (Params, Frame, Vec<Token>) {
        let l = Arc::new(gen_layout(TaskKind::FrozenLake, 3, 2).unwrap());
        let s = spawn_state(&l, 1);
        let mut p = Params::init(ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_size: 4,
            max_states: 4,
            seed: 1,
        });
        p.randomize_output(2, 0.3);
        (p, Frame::of(&s), context(&[s]))
    }

    #[test]
    fn sampling_is_seeded() {
        let (p, f, ctx) = setup();
        let a = sample_next_state(&p, f, &ctx, 1.0, 9).unwrap();
        assert_eq!(a, sample_next_state(&p, f, &ctx, 1.0, 9).unwrap());
        assert_eq!(a.len(), 9);
        let g = sample_group(&p, f, &ctx, 4, 1.0, 9).unwrap();
        assert_eq!(g, sample_group(&p, f, &ctx, 4, 1.0, 9).unwrap());
        assert!(sample_next_state(&p, f, &ctx, 0.0, 1).is_err());
    }

    #[test]
    fn low_temperature_is_greedy() {
        let (p, f, ctx) = setup();
        let greedy = greedy_next_state(&p, f, &ctx).unwrap();
        for seed in 0..5 {
            assert_eq!(sample_next_state(&p, f, &ctx, 1e-4, seed).unwrap(), greedy);
        }
    }

    #[test]
    fn zero_weights_give_zero_gradient_and_linearity() {
        let (p, f, ctx) = setup();
        let cont = sample_next_state(&p, f, &ctx, 1.0, 3).unwrap();
        let g0 = grad_weighted_logprob(&p, &[(f, ctx.clone(), cont.clone(), 0.0)]).unwrap();
        assert!(g0.iter().all(|&x| x == 0.0));
        let g1 = grad_weighted_logprob(&p, &[(f, ctx.clone(), cont.clone(), 1.0)]).unwrap();
        let g3 = grad_weighted_logprob(&p, &[(f, ctx, cont, 2.5)]).unwrap();
        for (a, b) in g1.iter().zip(&g3) {
            assert!((2.5 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn single_token_normalization() {
        let (p, f, ctx) = setup();
        let total: f64 = (0..VOCAB as Token)
            .map(|t| next_state_logprob(&p, f, &ctx, &[t]).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn entropy_of_counts() {
        assert!((plugin_entropy(&[5, 5, 5, 5]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(plugin_entropy(&[7, 0, 0]), 0.0);
        assert_eq!(plugin_entropy(&[]), 0.0);
    }
}
