//! Rule-based state-action parsing on rasters.
//!
//! Given the symbolic input state and a predicted raster, the parser splits
//! the image into cell blocks, locates the agent by the highest foreground
//! IoU against the input agent block, falls back to per-cell MSE change
//! detection when no block matches, infers the action from the displacement
//! under the task's movement rules, and finally checks that every block of
//! the prediction agrees with the successor the inferred action implies.

use crate::gridworld::{apply_action, Action, EnvState, InvalidReason, Pos, TaskKind};
use crate::raster::{render, render_cell, Raster, RasterError, TileAtlas};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParseConfig {
    /// Gray-level difference above which a pixel counts as foreground.
    pub tau_fg: f64,
    /// IoU a block must exceed to be taken as the agent.
    pub tau_iou: f64,
    /// Per-block MSE (squared gray levels) above which a block has changed.
    pub tau_mse: f64,
}

impl Default for ParseConfig {
    fn default() -> Self {
        ParseConfig {
            tau_fg: 24.0,
            tau_iou: 0.5,
            tau_mse: 100.0,
        }
    }
}

impl ParseConfig {
    pub fn validate(&self) -> Result<(), String> {
        let finite = [self.tau_fg, self.tau_iou, self.tau_mse].iter().all(|v| v.is_finite());
        if !finite || self.tau_fg <= 0.0 || self.tau_iou <= 0.0 || self.tau_mse <= 0.0 {
            return Err("parse thresholds must be finite and strictly positive".into());
        }
        if self.tau_iou > 1.0 {
            return Err("tau_iou must not exceed 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InvalidTransition {
    Disappearance,
    Teleport,
    MultiMove,
    WallViolation,
    HoleViolation,
    TableViolation,
    PrinterBlock,
    BadPick,
    BadDrop,
    MalformedImage,
}

/// Result of parsing one (input state, predicted raster) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParsedOutcome {
    Action(Action),
    /// Prediction identical to the input; valid but makes no progress.
    Stay,
    Invalid(InvalidTransition),
}

impl ParsedOutcome {
    pub fn is_invalid(&self) -> bool {
        matches!(self, ParsedOutcome::Invalid(_))
    }

    pub fn action(&self) -> Option<Action> {
        match self {
            ParsedOutcome::Action(a) => Some(*a),
            _ => None,
        }
    }
}

impl fmt::Display for ParsedOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParsedOutcome::Action(a) => write!(f, "{a}"),
            ParsedOutcome::Stay => f.write_str("stay"),
            ParsedOutcome::Invalid(e) => write!(f, "invalid:{e:?}"),
        }
    }
}

pub type Mask = Vec<bool>;

/// Pixels of `block` that differ from `reference` by more than `tau_fg`.
pub fn foreground_mask(block: &Raster, reference: &Raster, tau_fg: f64) -> Result<Mask, RasterError> {
    block.same_shape(reference)?;
    Ok(block
        .pixels
        .iter()
        .zip(&reference.pixels)
        .map(|(&a, &b)| (a as f64 - b as f64).abs() > tau_fg)
        .collect())
}

/// |a ∩ b| / |a ∪ b|, with two empty masks counting as identical.
pub fn cell_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean squared gray-level difference.
pub fn cell_mse(a: &Raster, b: &Raster) -> Result<f64, RasterError> {
    a.same_shape(b)?;
    let n = a.pixels.len().max(1) as f64;
    Ok(a.pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Where the agent ended up in a predicted raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentLocation {
    /// A single block matched the agent by IoU.
    Found(Pos),
    /// No block matched; two changed blocks read as a move from `source` to `dest`.
    Inferred { source: Pos, dest: Pos },
    Disappeared,
    /// Several blocks look like the agent, or the changes admit no single move.
    Multiple,
}

/// Per-cell view of a prediction against its input state.
struct Scene<'a> {
    input: &'a EnvState,
    atlas: &'a TileAtlas,
    pred: &'a Raster,
    input_img: Raster,
}

impl<'a> Scene<'a> {
    fn new(input: &'a EnvState, pred: &'a Raster, atlas: &'a TileAtlas) -> Option<Scene<'a>> {
        let side = input.size() * atlas.tile_px;
        if pred.width != side || pred.height != side || pred.pixels.len() != side * side {
            return None;
        }
        Some(Scene {
            input,
            atlas,
            pred,
            input_img: render(input, atlas),
        })
    }

    fn block(&self, img: &Raster, p: Pos) -> Raster {
        let t = self.atlas.tile_px;
        img.crop(p.col * t, p.row * t, t, t)
    }

    fn pred_block(&self, p: Pos) -> Raster {
        self.block(self.pred, p)
    }

    fn input_block(&self, p: Pos) -> Raster {
        self.block(&self.input_img, p)
    }

    /// Input cell without the agent.
    fn scene_block(&self, p: Pos) -> Raster {
        render_cell(self.input, p, self.atlas, false)
    }

    fn changed(&self, cfg: &ParseConfig) -> Vec<Pos> {
        self.input
            .layout
            .positions()
            .filter(|&p| cell_mse(&self.pred_block(p), &self.input_block(p)).expect("same tile") > cfg.tau_mse)
            .collect()
    }

    fn locate(&self, cfg: &ParseConfig, changed: &[Pos]) -> AgentLocation {
        let a = self.input.agent;
        let agent_mask = foreground_mask(&self.input_block(a), &self.scene_block(a), cfg.tau_fg).expect("same tile");
        let mut best: Option<(Pos, f64)> = None;
        let mut matches = 0;
        for p in self.input.layout.positions() {
            let m = foreground_mask(&self.pred_block(p), &self.scene_block(p), cfg.tau_fg).expect("same tile");
            let iou = cell_iou(&m, &agent_mask);
            if iou > cfg.tau_iou {
                matches += 1;
            }
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((p, iou));
            }
        }
        match best {
            Some(_) if matches > 1 => AgentLocation::Multiple,
            Some((p, iou)) if iou > cfg.tau_iou => AgentLocation::Found(p),
            _ => match changed {
                [] => AgentLocation::Found(a),
                [_] => AgentLocation::Disappeared,
                [x, y] if *x == a => AgentLocation::Inferred { source: a, dest: *y },
                [x, y] if *y == a => AgentLocation::Inferred { source: a, dest: *x },
                _ => AgentLocation::Multiple,
            },
        }
    }

    /// The printer block no longer matches the input printer glyph.
    fn printer_removed(&self, cfg: &ParseConfig) -> bool {
        let Some(p) = self.input.printer else { return false };
        let mut bare = self.input.clone();
        bare.printer = None;
        let reference = render_cell(&bare, p, self.atlas, false);
        let before = foreground_mask(&self.input_block(p), &reference, cfg.tau_fg).expect("same tile");
        let after = foreground_mask(&self.pred_block(p), &reference, cfg.tau_fg).expect("same tile");
        cell_iou(&before, &after) < cfg.tau_iou
    }

    /// Table cells whose MSE rose above threshold.
    fn table_changes(&self, changed: &[Pos]) -> Vec<Pos> {
        changed.iter().copied().filter(|&p| self.input.layout.is_table(p)).collect()
    }

    fn matches_successor(&self, next: &EnvState, cfg: &ParseConfig) -> bool {
        next.layout.positions().all(|p| {
            let expected = render_cell(next, p, self.atlas, true);
            cell_mse(&self.pred_block(p), &expected).expect("same tile") <= cfg.tau_mse
        })
    }
}

/// Locate the agent in `pred` relative to the input state.
pub fn locate_agent(
    pred: &Raster,
    input: &EnvState,
    atlas: &TileAtlas,
    cfg: &ParseConfig,
) -> Result<AgentLocation, InvalidTransition> {
    let scene = Scene::new(input, pred, atlas).ok_or(InvalidTransition::MalformedImage)?;
    let changed = scene.changed(cfg);
    Ok(scene.locate(cfg, &changed))
}

fn reason_to_invalid(r: InvalidReason, action: Action) -> InvalidTransition {
    match r {
        InvalidReason::WallCollision => InvalidTransition::WallViolation,
        InvalidReason::HoleEntry => InvalidTransition::HoleViolation,
        InvalidReason::TableEntry => InvalidTransition::TableViolation,
        InvalidReason::PrinterBlock => InvalidTransition::PrinterBlock,
        InvalidReason::NoAdjacentPrinter => InvalidTransition::BadPick,
        InvalidReason::NoAdjacentTable | InvalidReason::NotCarrying => InvalidTransition::BadDrop,
        InvalidReason::OutOfBounds => InvalidTransition::Teleport,
        InvalidReason::UnsupportedAction | InvalidReason::Terminal => match action {
            Action::Pick => InvalidTransition::BadPick,
            Action::Drop => InvalidTransition::BadDrop,
            _ => InvalidTransition::MultiMove,
        },
    }
}

/// Parse the transition from `input` to the predicted raster `pred`.
pub fn parse_transition(input: &EnvState, pred: &Raster, atlas: &TileAtlas, cfg: &ParseConfig) -> ParsedOutcome {
    use InvalidTransition as E;
    let Some(scene) = Scene::new(input, pred, atlas) else {
        return ParsedOutcome::Invalid(E::MalformedImage);
    };
    let changed = scene.changed(cfg);
    if changed.is_empty() {
        return ParsedOutcome::Stay;
    }
    let dest = match scene.locate(cfg, &changed) {
        AgentLocation::Found(p) | AgentLocation::Inferred { dest: p, .. } => p,
        AgentLocation::Disappeared => return ParsedOutcome::Invalid(E::Disappearance),
        AgentLocation::Multiple => return ParsedOutcome::Invalid(E::MultiMove),
    };
    let src = input.agent;
    let (picked, drops) = if input.task() == TaskKind::MiniBehavior {
        (scene.printer_removed(cfg), scene.table_changes(&changed))
    } else {
        (false, Vec::new())
    };
    let action = if dest == src {
        match (picked, drops.len()) {
            (true, 0) => Action::Pick,
            (false, 1) => Action::Drop,
            _ => return ParsedOutcome::Invalid(E::MultiMove),
        }
    } else if let Some(dir) = Action::between(src, dest) {
        if picked || !drops.is_empty() {
            return ParsedOutcome::Invalid(E::MultiMove);
        }
        if input.task() == TaskKind::Maze && input.layout.has_wall(src, dir) {
            return ParsedOutcome::Invalid(E::WallViolation);
        }
        dir
    } else {
        return ParsedOutcome::Invalid(E::Teleport);
    };
    let next = match apply_action(input, action) {
        Ok(next) => next,
        Err(reason) => return ParsedOutcome::Invalid(reason_to_invalid(reason, action)),
    };
    if action == Action::Drop && next.printer != drops.first().copied() {
        return ParsedOutcome::Invalid(E::BadDrop);
    }
    if !scene.matches_successor(&next, cfg) {
        return ParsedOutcome::Invalid(E::MultiMove);
    }
    ParsedOutcome::Action(action)
}
