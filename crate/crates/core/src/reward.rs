//! Progress reward: partition parsed transitions into optimal, non-optimal
//! and invalid, and score each class with a fixed coefficient.

use crate::gridworld::{apply_action, EnvState, ProgressMap};
use crate::parse::{parse_transition, ParseConfig, ParsedOutcome};
use crate::raster::{Raster, TileAtlas};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha_opt: f64,
    pub alpha_nopt: f64,
    pub alpha_inv: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha_opt: 1.0,
            alpha_nopt: 0.0,
            alpha_inv: -5.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        let v = [self.alpha_opt, self.alpha_nopt, self.alpha_inv];
        if v.iter().any(|x| !x.is_finite()) {
            return Err("reward coefficients must be finite".into());
        }
        if !(self.alpha_opt > self.alpha_nopt && self.alpha_nopt > self.alpha_inv) {
            return Err("reward coefficients must satisfy alpha_opt > alpha_nopt > alpha_inv".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionClass {
    Optimal,
    NonOptimal,
    Invalid,
}

/// Classify a parsed outcome by the progress its symbolic successor makes.
///
/// A successor with no finite distance counts as invalid.
pub fn classify(input: &EnvState, outcome: &ParsedOutcome, pmap: &ProgressMap) -> ActionClass {
    let Some(before) = pmap.distance(input) else {
        return ActionClass::Invalid;
    };
    match outcome {
        ParsedOutcome::Invalid(_) => ActionClass::Invalid,
        ParsedOutcome::Stay => ActionClass::NonOptimal,
        ParsedOutcome::Action(a) => match apply_action(input, *a).ok().and_then(|s| pmap.distance(&s)) {
            None => ActionClass::Invalid,
            Some(after) if after < before => ActionClass::Optimal,
            Some(_) => ActionClass::NonOptimal,
        },
    }
}

pub fn progress_reward(cls: ActionClass, cfg: &RewardConfig) -> f64 {
    match cls {
        ActionClass::Optimal => cfg.alpha_opt,
        ActionClass::NonOptimal => cfg.alpha_nopt,
        ActionClass::Invalid => cfg.alpha_inv,
    }
}

/// Parse, classify and score one predicted raster.
pub fn reward_candidate(
    input: &EnvState,
    pred: &Raster,
    pmap: &ProgressMap,
    atlas: &TileAtlas,
    parse_cfg: &ParseConfig,
    reward_cfg: &RewardConfig,
) -> (f64, ActionClass, ParsedOutcome) {
    let outcome = parse_transition(input, pred, atlas, parse_cfg);
    let cls = classify(input, &outcome, pmap);
    (progress_reward(cls, reward_cfg), cls, outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{compute_progress_map, Action, Layout, Pos, TaskKind};
    use crate::parse::InvalidTransition;
    use crate::raster::render;
    use std::sync::Arc;

    fn open() -> (EnvState, ProgressMap) {
        let mut l = Layout::blank(TaskKind::FrozenLake, 3);
        l.set_goal(Pos::new(2, 2));
        let pm = compute_progress_map(&l);
        (EnvState::new(Arc::new(l), Pos::new(1, 1)), pm)
    }

    #[test]
    fn default_coefficients() {
        let c = RewardConfig::default();
        assert_eq!(progress_reward(ActionClass::Optimal, &c), 1.0);
        assert_eq!(progress_reward(ActionClass::NonOptimal, &c), 0.0);
        assert_eq!(progress_reward(ActionClass::Invalid, &c), -5.0);
        assert!(c.validate().is_ok());
        assert!(RewardConfig { alpha_nopt: 2.0, ..c }.validate().is_err());
    }

    #[test]
    fn classes() {
        let (s, pm) = open();
        assert_eq!(classify(&s, &ParsedOutcome::Action(Action::Down), &pm), ActionClass::Optimal);
        assert_eq!(classify(&s, &ParsedOutcome::Action(Action::Up), &pm), ActionClass::NonOptimal);
        assert_eq!(classify(&s, &ParsedOutcome::Stay, &pm), ActionClass::NonOptimal);
        assert_eq!(
            classify(&s, &ParsedOutcome::Invalid(InvalidTransition::Disappearance), &pm),
            ActionClass::Invalid
        );
    }

    #[test]
    fn candidate_pipeline() {
        let (s, pm) = open();
        let atlas = TileAtlas::default();
        let (pc, rc) = (ParseConfig::default(), RewardConfig::default());
        let next = apply_action(&s, Action::Right).unwrap();
        assert_eq!(
            reward_candidate(&s, &render(&next, &atlas), &pm, &atlas, &pc, &rc),
            (1.0, ActionClass::Optimal, ParsedOutcome::Action(Action::Right))
        );
        assert_eq!(
            reward_candidate(&s, &render(&s, &atlas), &pm, &atlas, &pc, &rc),
            (0.0, ActionClass::NonOptimal, ParsedOutcome::Stay)
        );
    }
}
