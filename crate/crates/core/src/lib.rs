//! Visual planning laboratory.
//!
//! Grid-world tasks are rendered to grayscale rasters, a rule-based parser
//! recovers the action connecting two rasters, and a BFS progress map turns
//! the parsed action into a three-valued progress reward. A small causal
//! transformer over per-cell state tokens is trained either by supervised
//! next-state prediction or by a two-stage scheme (random-walk warm-up
//! followed by group-relative policy optimization) and evaluated with
//! exact-match and progress-rate metrics.

pub mod corpus;
pub mod evalx;
pub mod gridworld;
mod par;
pub mod parse;
pub mod policy;
pub mod raster;
pub mod reward;
pub mod rng;
pub mod train;

pub use gridworld::{Action, CellKind, EnvState, Layout, Pos, ProgressMap, TaskKind, Trajectory};
pub use raster::{Raster, TileAtlas};
