//! Deterministic grid-world tasks: FrozenLake, Maze and MiniBehavior.
//!
//! A [`Layout`] is the immutable description of one environment; an
//! [`EnvState`] places the agent (and, in MiniBehavior, the printer) on it.
//! Transitions are deterministic and every rejected move carries a typed
//! [`InvalidReason`].

mod dynamics;
mod generate;
mod progress;
mod sample;
pub mod text;

pub use dynamics::{apply_action, legal_actions, InvalidReason, TransitionResult};
pub use generate::{gen_layout, size_range, spawn_state, GenError, GEN_RETRIES};
pub use progress::{compute_progress_map, enumerate_optimal_actions, Phase, ProgressMap};
pub use sample::{random_walk, sample_optimal_trajectory, Trajectory};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    FrozenLake,
    Maze,
    MiniBehavior,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::FrozenLake, TaskKind::Maze, TaskKind::MiniBehavior];

    pub fn tag(self) -> &'static str {
        match self {
            TaskKind::FrozenLake => "frozenlake",
            TaskKind::Maze => "maze",
            TaskKind::MiniBehavior => "minibehavior",
        }
    }

    pub fn from_tag(s: &str) -> Option<TaskKind> {
        match s.to_ascii_lowercase().as_str() {
            "frozenlake" | "frozen_lake" | "fl" => Some(TaskKind::FrozenLake),
            "maze" => Some(TaskKind::Maze),
            "minibehavior" | "mini_behavior" | "mb" => Some(TaskKind::MiniBehavior),
            _ => None,
        }
    }

    /// Actions available in this task, in canonical order.
    pub fn actions(self) -> &'static [Action] {
        match self {
            TaskKind::MiniBehavior => &Action::ALL,
            _ => &Action::MOVES,
        }
    }

    /// Number of BFS phases in the extended state space.
    pub fn phases(self) -> usize {
        match self {
            TaskKind::MiniBehavior => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub const fn new(row: usize, col: usize) -> Self {
        Pos { row, col }
    }

    pub fn index(self, size: usize) -> usize {
        self.row * size + self.col
    }

    pub fn from_index(idx: usize, size: usize) -> Self {
        Pos::new(idx / size, idx % size)
    }

    /// Neighbour one step in direction `dir`, or `None` when it would leave the grid.
    pub fn step(self, dir: Action, size: usize) -> Option<Pos> {
        let (dr, dc) = dir.delta()?;
        let r = self.row as isize + dr;
        let c = self.col as isize + dc;
        if r < 0 || c < 0 || r >= size as isize || c >= size as isize {
            None
        } else {
            Some(Pos::new(r as usize, c as usize))
        }
    }

    pub fn manhattan(self, other: Pos) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    pub fn is_adjacent(self, other: Pos) -> bool {
        self.manhattan(other) == 1
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Empty,
    Hole,
    Goal,
    Table,
    Printer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Pick,
    Drop,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Pick,
        Action::Drop,
    ];
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn delta(self) -> Option<(isize, isize)> {
        match self {
            Action::Up => Some((-1, 0)),
            Action::Down => Some((1, 0)),
            Action::Left => Some((0, -1)),
            Action::Right => Some((0, 1)),
            Action::Pick | Action::Drop => None,
        }
    }

    pub fn is_move(self) -> bool {
        self.delta().is_some()
    }

    /// Wall bit for the side of a cell this move crosses.
    pub fn wall_bit(self) -> u8 {
        match self {
            Action::Up => WALL_UP,
            Action::Down => WALL_DOWN,
            Action::Left => WALL_LEFT,
            Action::Right => WALL_RIGHT,
            Action::Pick | Action::Drop => 0,
        }
    }

    pub fn opposite(self) -> Action {
        match self {
            Action::Up => Action::Down,
            Action::Down => Action::Up,
            Action::Left => Action::Right,
            Action::Right => Action::Left,
            other => other,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
            Action::Pick => "pick",
            Action::Drop => "drop",
        }
    }

    /// The move connecting two adjacent cells.
    pub fn between(from: Pos, to: Pos) -> Option<Action> {
        let dr = to.row as isize - from.row as isize;
        let dc = to.col as isize - from.col as isize;
        Action::MOVES.into_iter().find(|a| a.delta() == Some((dr, dc)))
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const WALL_UP: u8 = 1;
pub const WALL_DOWN: u8 = 2;
pub const WALL_LEFT: u8 = 4;
pub const WALL_RIGHT: u8 = 8;
pub const WALL_ALL: u8 = 15;

/// Immutable description of one environment.
///
/// `walls` holds a 4-bit mask per cell (Maze only; outer borders are always
/// set). `cells` carries the static terrain; in MiniBehavior the printer's
/// starting cell is marked [`CellKind::Printer`] while its current position
/// lives in [`EnvState`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub task: TaskKind,
    pub size: usize,
    pub cells: Vec<CellKind>,
    pub walls: Vec<u8>,
    pub goal: Option<Pos>,
    pub printer: Option<Pos>,
    pub table: Vec<Pos>,
}

impl Layout {
    /// Blank layout with no obstacles, goals or objects.
    pub fn blank(task: TaskKind, size: usize) -> Layout {
        let walls = if task == TaskKind::Maze {
            (0..size * size)
                .map(|i| border_mask(Pos::from_index(i, size), size))
                .collect()
        } else {
            Vec::new()
        };
        Layout {
            task,
            size,
            cells: vec![CellKind::Empty; size * size],
            walls,
            goal: None,
            printer: None,
            table: Vec::new(),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.size * self.size
    }

    pub fn cell(&self, p: Pos) -> CellKind {
        self.cells[p.index(self.size)]
    }

    pub fn wall_mask(&self, p: Pos) -> u8 {
        if self.task == TaskKind::Maze {
            self.walls[p.index(self.size)]
        } else {
            0
        }
    }

    pub fn has_wall(&self, p: Pos, dir: Action) -> bool {
        self.wall_mask(p) & dir.wall_bit() != 0
    }

    pub fn contains(&self, p: Pos) -> bool {
        p.row < self.size && p.col < self.size
    }

    pub fn positions(&self) -> impl Iterator<Item = Pos> + '_ {
        (0..self.n_cells()).map(move |i| Pos::from_index(i, self.size))
    }

    pub fn is_table(&self, p: Pos) -> bool {
        self.cell(p) == CellKind::Table
    }

    /// Set the goal cell, replacing any previous goal.
    pub fn set_goal(&mut self, p: Pos) {
        if let Some(g) = self.goal {
            self.cells[g.index(self.size)] = CellKind::Empty;
        }
        self.cells[p.index(self.size)] = CellKind::Goal;
        self.goal = Some(p);
    }

    /// Remove the wall between `p` and its neighbour in direction `dir` on both sides.
    pub fn open_passage(&mut self, p: Pos, dir: Action) {
        if let Some(q) = p.step(dir, self.size) {
            let n = self.size;
            self.walls[p.index(n)] &= !dir.wall_bit();
            self.walls[q.index(n)] &= !dir.opposite().wall_bit();
        }
    }

    /// Canonical content digest (hex SHA-256 of the text encoding of the layout).
    pub fn digest(&self) -> String {
        let enc = text::encode_layout(self);
        hex::encode(Sha256::digest(enc.as_bytes()))
    }

    /// Check the per-task structural invariants of a generated layout.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.n_cells();
        if self.cells.len() != n {
            return Err(format!("expected {n} cells, found {}", self.cells.len()));
        }
        let count = |k: CellKind| self.cells.iter().filter(|&&c| c == k).count();
        match self.task {
            TaskKind::FrozenLake => {
                if count(CellKind::Goal) != 1 || self.goal.map(|g| self.cell(g)) != Some(CellKind::Goal) {
                    return Err("frozenlake needs exactly one goal".into());
                }
                if n - count(CellKind::Hole) < 2 {
                    return Err("frozenlake needs at least two non-hole cells".into());
                }
                if count(CellKind::Table) + count(CellKind::Printer) > 0 {
                    return Err("table/printer cells only exist in minibehavior".into());
                }
            }
            TaskKind::Maze => {
                if count(CellKind::Goal) != 1 || self.goal.map(|g| self.cell(g)) != Some(CellKind::Goal) {
                    return Err("maze needs exactly one flag".into());
                }
                if count(CellKind::Goal) + count(CellKind::Empty) != n {
                    return Err("maze cells are empty or flag".into());
                }
                if self.walls.len() != n {
                    return Err("maze needs one wall mask per cell".into());
                }
                for p in self.positions() {
                    if self.wall_mask(p) & border_mask(p, self.size) != border_mask(p, self.size) {
                        return Err(format!("open border at {p}"));
                    }
                    for dir in [Action::Right, Action::Down] {
                        if let Some(q) = p.step(dir, self.size) {
                            if self.has_wall(p, dir) != self.has_wall(q, dir.opposite()) {
                                return Err(format!("asymmetric wall between {p} and {q}"));
                            }
                        }
                    }
                }
                let passages = self.passage_count();
                if passages != n - 1 {
                    return Err(format!("maze has {passages} passages, a spanning tree needs {}", n - 1));
                }
                if self.reachable_from(Pos::new(0, 0)).len() != n {
                    return Err("maze is not connected".into());
                }
            }
            TaskKind::MiniBehavior => {
                if count(CellKind::Hole) + count(CellKind::Goal) > 0 {
                    return Err("minibehavior has no holes or goals".into());
                }
                if count(CellKind::Printer) != 1 || self.printer.map(|p| self.cell(p)) != Some(CellKind::Printer) {
                    return Err("minibehavior needs exactly one printer".into());
                }
                if self.table.is_empty() || self.table.len() != count(CellKind::Table) {
                    return Err("minibehavior needs a non-empty table".into());
                }
                if self.table.iter().any(|&t| self.cell(t) != CellKind::Table) {
                    return Err("table list disagrees with cells".into());
                }
                let mut seen = vec![self.table[0]];
                let mut frontier = vec![self.table[0]];
                while let Some(p) = frontier.pop() {
                    for dir in Action::MOVES {
                        if let Some(q) = p.step(dir, self.size) {
                            if self.is_table(q) && !seen.contains(&q) {
                                seen.push(q);
                                frontier.push(q);
                            }
                        }
                    }
                }
                if seen.len() != self.table.len() {
                    return Err("table cells are not contiguous".into());
                }
            }
        }
        Ok(())
    }

    /// Number of open passages between neighbouring cells (Maze).
    pub fn passage_count(&self) -> usize {
        let mut count = 0;
        for p in self.positions() {
            for dir in [Action::Right, Action::Down] {
                if p.step(dir, self.size).is_some() && !self.has_wall(p, dir) {
                    count += 1;
                }
            }
        }
        count
    }

    /// Cells reachable from `start` through open passages, ignoring terrain.
    pub fn reachable_from(&self, start: Pos) -> Vec<Pos> {
        let mut seen = vec![false; self.n_cells()];
        let mut out = vec![start];
        seen[start.index(self.size)] = true;
        let mut i = 0;
        while i < out.len() {
            let p = out[i];
            i += 1;
            for dir in Action::MOVES {
                if self.has_wall(p, dir) {
                    continue;
                }
                if let Some(q) = p.step(dir, self.size) {
                    if !seen[q.index(self.size)] {
                        seen[q.index(self.size)] = true;
                        out.push(q);
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn border_mask(p: Pos, size: usize) -> u8 {
    let mut m = 0;
    if p.row == 0 {
        m |= WALL_UP;
    }
    if p.row + 1 == size {
        m |= WALL_DOWN;
    }
    if p.col == 0 {
        m |= WALL_LEFT;
    }
    if p.col + 1 == size {
        m |= WALL_RIGHT;
    }
    m
}

/// One visual state: a layout plus the agent and the movable printer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnvState {
    pub layout: Arc<Layout>,
    pub agent: Pos,
    pub carrying: bool,
    /// Current printer cell (MiniBehavior); `None` while carried.
    pub printer: Option<Pos>,
}

impl EnvState {
    /// State at the layout's initial object placement.
    pub fn new(layout: Arc<Layout>, agent: Pos) -> EnvState {
        let printer = layout.printer;
        EnvState {
            layout,
            agent,
            carrying: false,
            printer,
        }
    }

    pub fn task(&self) -> TaskKind {
        self.layout.task
    }

    pub fn size(&self) -> usize {
        self.layout.size
    }

    pub fn printer_present(&self) -> bool {
        self.printer.is_some()
    }

    /// Goal reached (FrozenLake, Maze) or printer resting on the table (MiniBehavior).
    pub fn is_terminal(&self) -> bool {
        match self.layout.task {
            TaskKind::FrozenLake | TaskKind::Maze => Some(self.agent) == self.layout.goal,
            TaskKind::MiniBehavior => {
                !self.carrying && self.printer.is_some_and(|p| self.layout.is_table(p))
            }
        }
    }

    /// Whether the agent may stand on `p` in this state.
    pub fn passable(&self, p: Pos) -> bool {
        if !self.layout.contains(p) {
            return false;
        }
        match self.layout.cell(p) {
            CellKind::Hole | CellKind::Table => false,
            _ => self.printer != Some(p),
        }
    }

    /// Check the state-level invariants.
    pub fn validate(&self) -> Result<(), String> {
        if !self.layout.contains(self.agent) {
            return Err("agent out of bounds".into());
        }
        if !self.passable(self.agent) {
            return Err(format!("agent on impassable cell {}", self.agent));
        }
        if self.carrying && self.printer.is_some() {
            return Err("carrying implies the printer is not on the grid".into());
        }
        if self.layout.task != TaskKind::MiniBehavior && (self.carrying || self.printer.is_some()) {
            return Err("carrying/printer only exist in minibehavior".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pos_step_respects_bounds() {
        let p = Pos::new(0, 0);
        assert_eq!(p.step(Action::Right, 3), Some(Pos::new(0, 1)));
        assert_eq!(p.step(Action::Up, 3), None);
        assert_eq!(p.step(Action::Left, 3), None);
        assert_eq!(Pos::new(2, 2).step(Action::Down, 3), None);
        assert_eq!(p.step(Action::Pick, 3), None);
    }

    #[test]
    fn action_between_neighbours() {
        assert_eq!(Action::between(Pos::new(1, 1), Pos::new(0, 1)), Some(Action::Up));
        assert_eq!(Action::between(Pos::new(1, 1), Pos::new(1, 2)), Some(Action::Right));
        assert_eq!(Action::between(Pos::new(1, 1), Pos::new(2, 2)), None);
    }

    #[test]
    fn blank_maze_has_only_border_walls() {
        let l = Layout::blank(TaskKind::Maze, 3);
        assert_eq!(l.wall_mask(Pos::new(0, 0)), WALL_UP | WALL_LEFT);
        assert_eq!(l.wall_mask(Pos::new(1, 1)), 0);
        assert_eq!(l.passage_count(), 12);
    }

    #[test]
    fn task_tags_roundtrip() {
        for t in TaskKind::ALL {
            assert_eq!(TaskKind::from_tag(t.tag()), Some(t));
        }
    }
}
