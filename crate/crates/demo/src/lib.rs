//! WebAssembly bindings for the browser sandbox in `www/`.
//!
//! A [`Sandbox`] holds one environment. The page can render it, click a cell
//! to propose a predicted next state (the agent drawn at that cell) and see
//! how the pixel parser and the progress reward judge it, or take an action
//! to advance the episode.

use serde::Serialize;
use std::sync::Arc;
use thiserror::Error;
use visplan_core::gridworld::{
    apply_action, compute_progress_map, enumerate_optimal_actions, gen_layout, size_range, spawn_state, Action,
    EnvState, Phase, Pos, ProgressMap, TaskKind,
};
use visplan_core::parse::{ParseConfig, ParsedOutcome};
use visplan_core::raster::{render, Raster, TileAtlas};
use visplan_core::reward::{reward_candidate, ActionClass, RewardConfig};
use wasm_bindgen::prelude::*;

#[derive(Debug, Error, PartialEq)]
pub enum DemoError {
    #[error("unknown task {0:?}")]
    Task(String),
    #[error("size {size} is outside {lo}..={hi} for this task")]
    Size { size: usize, lo: usize, hi: usize },
    #[error("cannot generate a layout: {0}")]
    Generate(String),
    #[error("unknown action {0:?}")]
    Action(String),
    #[error("cell ({0}, {1}) is outside the grid")]
    Cell(usize, usize),
}

/// How the judge scored one predicted state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub outcome: String,
    pub class: ActionClass,
    pub reward: f64,
    pub distance_before: Option<u32>,
    pub distance_after: Option<u32>,
}

#[wasm_bindgen]
pub struct Sandbox {
    state: EnvState,
    pmap: ProgressMap,
    atlas: TileAtlas,
    parse: ParseConfig,
    reward: RewardConfig,
    steps: usize,
}

fn to_js(e: DemoError) -> JsError {
    JsError::new(&e.to_string())
}

impl Sandbox {
    pub fn build(task: &str, size: usize, seed: u64) -> Result<Sandbox, DemoError> {
        let task = TaskKind::from_tag(task).ok_or_else(|| DemoError::Task(task.into()))?;
        let (lo, hi) = size_range(task);
        if !(lo..=hi).contains(&size) {
            return Err(DemoError::Size { size, lo, hi });
        }
        let layout = Arc::new(gen_layout(task, size, seed).map_err(|e| DemoError::Generate(e.to_string()))?);
        let pmap = compute_progress_map(&layout);
        Ok(Sandbox {
            state: spawn_state(&layout, seed),
            pmap,
            atlas: TileAtlas::default(),
            parse: ParseConfig::default(),
            reward: RewardConfig::default(),
            steps: 0,
        })
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    fn judge(&self, pred: &Raster) -> Verdict {
        let (reward, class, outcome) =
            reward_candidate(&self.state, pred, &self.pmap, &self.atlas, &self.parse, &self.reward);
        let after = match outcome {
            ParsedOutcome::Action(a) => apply_action(&self.state, a).ok().and_then(|s| self.pmap.distance(&s)),
            ParsedOutcome::Stay => self.pmap.distance(&self.state),
            ParsedOutcome::Invalid(_) => None,
        };
        Verdict {
            outcome: outcome.to_string(),
            class,
            reward,
            distance_before: self.pmap.distance(&self.state),
            distance_after: after,
        }
    }

    /// Judge the state that shows the agent at `(row, col)` with everything
    /// else unchanged.
    pub fn propose_cell(&self, row: usize, col: usize) -> Result<Verdict, DemoError> {
        let size = self.state.size();
        if row >= size || col >= size {
            return Err(DemoError::Cell(row, col));
        }
        let mut pred = self.state.clone();
        pred.agent = Pos::new(row, col);
        Ok(self.judge(&render(&pred, &self.atlas)))
    }

    /// Judge the rendered successor of `action` (or the unchanged scene
    /// when the move is not allowed), then advance if it was valid.
    pub fn take(&mut self, action: &str) -> Result<Verdict, DemoError> {
        let a = Action::ALL
            .into_iter()
            .find(|a| a.name() == action)
            .ok_or_else(|| DemoError::Action(action.into()))?;
        let next = apply_action(&self.state, a);
        let pred = next.as_ref().map(|s| render(s, &self.atlas)).unwrap_or_else(|_| render(&self.state, &self.atlas));
        let mut verdict = self.judge(&pred);
        match next {
            Ok(s) => {
                self.state = s;
                self.steps += 1;
            }
            Err(reason) => verdict.outcome = format!("not allowed: {reason}"),
        }
        Ok(verdict)
    }

    /// Remaining steps per cell in the current phase, `None` where the goal
    /// is out of reach.
    pub fn distances(&self) -> Vec<Option<u32>> {
        let phase = if self.state.carrying { Phase::Carrying } else { Phase::Free };
        self.state.layout.positions().map(|p| self.pmap.get(p, phase)).collect()
    }
}

#[wasm_bindgen]
impl Sandbox {
    #[wasm_bindgen(constructor)]
    pub fn new(task: &str, size: usize, seed: u64) -> Result<Sandbox, JsError> {
        Sandbox::build(task, size, seed).map_err(to_js)
    }

    pub fn size(&self) -> usize {
        self.state.size()
    }

    pub fn width(&self) -> usize {
        self.size() * self.atlas.tile_px
    }

    pub fn height(&self) -> usize {
        self.width()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn solved(&self) -> bool {
        self.state.is_terminal()
    }

    /// RGBA pixels of the current state for an `ImageData`.
    pub fn pixels(&self) -> Vec<u8> {
        let img = render(&self.state, &self.atlas);
        img.pixels.iter().flat_map(|&g| [g, g, g, 255]).collect()
    }

    /// Per-cell distance to completion, row-major; -1 where unreachable.
    pub fn distance_grid(&self) -> Vec<i32> {
        self.distances().into_iter().map(|d| d.map_or(-1, |v| v as i32)).collect()
    }

    /// Names of the moves that make progress from here.
    pub fn optimal_actions(&self) -> Vec<String> {
        enumerate_optimal_actions(&self.state, &self.pmap).into_iter().map(|a| a.name().to_string()).collect()
    }

    /// Verdict JSON for the agent drawn at `(row, col)`.
    pub fn propose(&self, row: usize, col: usize) -> Result<String, JsError> {
        let v = self.propose_cell(row, col).map_err(to_js)?;
        Ok(serde_json::to_string(&v).expect("verdict serializes"))
    }

    /// Verdict JSON for taking `action`; the state advances when it is allowed.
    pub fn act(&mut self, action: &str) -> Result<String, JsError> {
        let v = self.take(action).map_err(to_js)?;
        Ok(serde_json::to_string(&v).expect("verdict serializes"))
    }
}
