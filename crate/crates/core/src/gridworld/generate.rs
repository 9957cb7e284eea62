use super::progress::{compute_progress_map, Phase};
use super::{Action, CellKind, EnvState, Layout, Pos, TaskKind, WALL_ALL};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use std::sync::Arc;
use thiserror::Error;

/// Attempts before `gen_layout` gives up on a constraint set.
pub const GEN_RETRIES: usize = 1000;

/// Per-cell hole probability for FrozenLake.
pub const HOLE_PROBABILITY: f64 = 0.2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GenError {
    #[error("{task} does not support grid size {size} (supported {min}..={max})")]
    UnsupportedSize {
        task: TaskKind,
        size: usize,
        min: usize,
        max: usize,
    },
    #[error("no valid {task} layout of size {size} after {GEN_RETRIES} attempts")]
    Unsatisfiable { task: TaskKind, size: usize },
}

/// Inclusive range of supported grid sizes.
pub fn size_range(task: TaskKind) -> (usize, usize) {
    match task {
        TaskKind::FrozenLake | TaskKind::Maze => (3, 12),
        TaskKind::MiniBehavior => (7, 12),
    }
}

/// Generate a layout satisfying the task's invariants, with at least one
/// spawn cell from which the task can be completed. Pure in `(task, size, seed)`.
pub fn gen_layout(task: TaskKind, size: usize, seed: u64) -> Result<Layout, GenError> {
    let (min, max) = size_range(task);
    if size < min || size > max {
        return Err(GenError::UnsupportedSize { task, size, min, max });
    }
    let mut r = rng::rng(seed);
    for _ in 0..GEN_RETRIES {
        let layout = match task {
            TaskKind::FrozenLake => lake(size, &mut r),
            TaskKind::Maze => maze(size, &mut r),
            TaskKind::MiniBehavior => office(size, &mut r),
        };
        if layout.validate().is_ok() && !spawn_cells(&layout).is_empty() {
            return Ok(layout);
        }
    }
    Err(GenError::Unsatisfiable { task, size })
}

fn lake(size: usize, r: &mut impl Rng) -> Layout {
    let mut l = Layout::blank(TaskKind::FrozenLake, size);
    let goal = Pos::from_index(r.gen_range(0..size * size), size);
    l.set_goal(goal);
    for i in 0..size * size {
        if i != goal.index(size) && r.gen_bool(HOLE_PROBABILITY) {
            l.cells[i] = CellKind::Hole;
        }
    }
    // at least one hole
    if !l.cells.contains(&CellKind::Hole) {
        let mut i = r.gen_range(0..size * size - 1);
        if i >= goal.index(size) {
            i += 1;
        }
        l.cells[i] = CellKind::Hole;
    }
    l
}

/// Randomized depth-first spanning tree (recursive backtracker).
fn maze(size: usize, r: &mut impl Rng) -> Layout {
    let mut l = Layout::blank(TaskKind::Maze, size);
    l.walls = vec![WALL_ALL; size * size];
    let mut visited = vec![false; size * size];
    let start = Pos::from_index(r.gen_range(0..size * size), size);
    visited[start.index(size)] = true;
    let mut stack = vec![start];
    while let Some(&cell) = stack.last() {
        let options: Vec<Action> = Action::MOVES
            .into_iter()
            .filter(|&d| cell.step(d, size).is_some_and(|q| !visited[q.index(size)]))
            .collect();
        match options.choose(r) {
            Some(&dir) => {
                let next = cell.step(dir, size).expect("in bounds");
                l.open_passage(cell, dir);
                visited[next.index(size)] = true;
                stack.push(next);
            }
            None => {
                stack.pop();
            }
        }
    }
    l.set_goal(Pos::from_index(r.gen_range(0..size * size), size));
    l
}

/// A 1xk table on a row next to the border, and a printer on the floor.
fn office(size: usize, r: &mut impl Rng) -> Layout {
    let mut l = Layout::blank(TaskKind::MiniBehavior, size);
    let row = if r.gen_bool(0.5) { 1 } else { size - 2 };
    let len = r.gen_range(2..=3usize);
    let start = r.gen_range(0..=size - len);
    for c in start..start + len {
        let p = Pos::new(row, c);
        l.cells[p.index(size)] = CellKind::Table;
        l.table.push(p);
    }
    let floor: Vec<Pos> = l.positions().filter(|&p| l.cell(p) == CellKind::Empty).collect();
    let printer = *floor.choose(r).expect("grid has floor");
    l.cells[printer.index(size)] = CellKind::Printer;
    l.printer = Some(printer);
    l
}

/// Cells where the agent can start: passable, non-terminal, finite distance.
pub(crate) fn spawn_cells(layout: &Layout) -> Vec<Pos> {
    let pm = compute_progress_map(layout);
    let arc = Arc::new(layout.clone());
    layout
        .positions()
        .filter(|&p| {
            super::progress::node_state(&arc, p, Phase::Free)
                .is_some_and(|s| !s.is_terminal() && pm.distance(&s).is_some_and(|d| d > 0))
        })
        .collect()
}

/// Uniformly random valid start state. Pure in `(layout, seed)`.
///
/// # Panics
/// If the layout has no spawn cell; [`gen_layout`] never returns such layouts.
pub fn spawn_state(layout: &Arc<Layout>, seed: u64) -> EnvState {
    let cells = spawn_cells(layout);
    let mut r = rng::rng(seed);
    let agent = *cells.choose(&mut r).expect("layout has a solvable spawn cell");
    EnvState::new(layout.clone(), agent)
}
