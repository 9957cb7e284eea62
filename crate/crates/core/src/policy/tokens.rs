//! Lossless per-cell tokenization of states and trajectory contexts.
//!
//! A state of side `n` is `n²` content tokens in row-major order; Maze
//! states interleave a wall token after every content token. A context is
//! `BOS s0 SEP s1 SEP ... sk SEP`, so the next state always starts right
//! after a `SEP`.

use crate::gridworld::{CellKind, EnvState, Layout, Pos, TaskKind};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

pub type Token = u8;

pub const BOS: Token = 0;
pub const SEP: Token = 1;
pub const EOS: Token = 2;
pub const EMPTY: Token = 3;
pub const HOLE: Token = 4;
pub const GOAL: Token = 5;
pub const AGENT: Token = 6;
pub const AGENT_ON_GOAL: Token = 7;
pub const TABLE: Token = 8;
pub const PRINTER: Token = 9;
pub const PRINTER_ON_TABLE: Token = 10;
pub const AGENT_CARRYING: Token = 11;
/// Wall mask `m` is token `WALL_BASE + m`.
pub const WALL_BASE: Token = 12;
pub const VOCAB: usize = WALL_BASE as usize + 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Malformed {
    #[error("expected {expected} tokens, found {found}")]
    WrongLength { expected: usize, found: usize },
    #[error("token {token} is not allowed at slot {index}")]
    IllegalCode { index: usize, token: Token },
    #[error("{0} agents in the state (expected 1)")]
    AgentCount(usize),
    #[error("{0} printers in the state (expected at most 1)")]
    PrinterCount(usize),
}

/// Task and grid side; fixes the token layout of every state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub task: TaskKind,
    pub size: usize,
}

impl Frame {
    pub fn of(state: &EnvState) -> Frame {
        Frame {
            task: state.task(),
            size: state.size(),
        }
    }

    pub fn has_walls(&self) -> bool {
        self.task == TaskKind::Maze
    }

    /// Tokens per state.
    pub fn state_len(&self) -> usize {
        self.size * self.size * if self.has_walls() { 2 } else { 1 }
    }

    /// Tokens in a context holding `n_states` states.
    pub fn context_len(&self, n_states: usize) -> usize {
        1 + n_states * (self.state_len() + 1)
    }
}

fn content_token(state: &EnvState, p: Pos) -> Token {
    let agent = state.agent == p;
    match state.layout.cell(p) {
        CellKind::Hole => HOLE,
        CellKind::Goal if agent => AGENT_ON_GOAL,
        CellKind::Goal => GOAL,
        CellKind::Table if state.printer == Some(p) => PRINTER_ON_TABLE,
        CellKind::Table => TABLE,
        _ if agent && state.carrying => AGENT_CARRYING,
        _ if agent => AGENT,
        _ if state.printer == Some(p) => PRINTER,
        _ => EMPTY,
    }
}

pub fn encode_state(state: &EnvState) -> Vec<Token> {
    let walls = state.task() == TaskKind::Maze;
    let mut out = Vec::with_capacity(Frame::of(state).state_len());
    for p in state.layout.positions() {
        out.push(content_token(state, p));
        if walls {
            out.push(WALL_BASE + state.layout.wall_mask(p));
        }
    }
    out
}

/// `BOS s0 SEP s1 SEP ... SEP`.
pub fn context(states: &[EnvState]) -> Vec<Token> {
    let mut out = vec![BOS];
    for s in states {
        out.extend(encode_state(s));
        out.push(SEP);
    }
    out
}

fn allowed(task: TaskKind, t: Token) -> bool {
    match task {
        TaskKind::FrozenLake => matches!(t, EMPTY | HOLE | GOAL | AGENT | AGENT_ON_GOAL),
        TaskKind::Maze => matches!(t, EMPTY | GOAL | AGENT | AGENT_ON_GOAL),
        TaskKind::MiniBehavior => matches!(t, EMPTY | TABLE | PRINTER | PRINTER_ON_TABLE | AGENT | AGENT_CARRYING),
    }
}

/// Static cell kind a content token shows (printer cells read as floor).
fn shown_kind(t: Token) -> CellKind {
    match t {
        HOLE => CellKind::Hole,
        GOAL | AGENT_ON_GOAL => CellKind::Goal,
        TABLE | PRINTER_ON_TABLE => CellKind::Table,
        _ => CellKind::Empty,
    }
}

/// Decode one state's tokens against the episode layout.
///
/// When the static content (holes, goal, table, walls) matches `layout`,
/// the returned state shares that layout. Otherwise it carries a new layout
/// built from the tokens, so that a hallucinated scene can still be rendered
/// and judged; callers detect this with `Arc::ptr_eq`.
pub fn decode_tokens(tokens: &[Token], layout: &Arc<Layout>) -> Result<EnvState, Malformed> {
    let frame = Frame {
        task: layout.task,
        size: layout.size,
    };
    if tokens.len() != frame.state_len() {
        return Err(Malformed::WrongLength {
            expected: frame.state_len(),
            found: tokens.len(),
        });
    }
    let stride = if frame.has_walls() { 2 } else { 1 };
    let n = layout.size;
    let mut contents = Vec::with_capacity(n * n);
    let mut walls = Vec::new();
    for (i, chunk) in tokens.chunks(stride).enumerate() {
        if !allowed(frame.task, chunk[0]) {
            return Err(Malformed::IllegalCode {
                index: i * stride,
                token: chunk[0],
            });
        }
        contents.push(chunk[0]);
        if stride == 2 {
            if chunk[1] < WALL_BASE {
                return Err(Malformed::IllegalCode {
                    index: i * stride + 1,
                    token: chunk[1],
                });
            }
            walls.push(chunk[1] - WALL_BASE);
        }
    }
    let agents: Vec<usize> = (0..n * n)
        .filter(|&i| matches!(contents[i], AGENT | AGENT_ON_GOAL | AGENT_CARRYING))
        .collect();
    if agents.len() != 1 {
        return Err(Malformed::AgentCount(agents.len()));
    }
    let printers: Vec<usize> = (0..n * n)
        .filter(|&i| matches!(contents[i], PRINTER | PRINTER_ON_TABLE))
        .collect();
    if printers.len() > 1 {
        return Err(Malformed::PrinterCount(printers.len()));
    }
    let agent = Pos::from_index(agents[0], n);
    let carrying = contents[agents[0]] == AGENT_CARRYING;
    let printer = printers.first().map(|&i| Pos::from_index(i, n));

    let same_static = (0..n * n).all(|i| {
        let expected = match layout.cells[i] {
            CellKind::Printer => CellKind::Empty,
            k => k,
        };
        shown_kind(contents[i]) == expected
    }) && (!frame.has_walls() || walls == layout.walls);
    let layout = if same_static {
        layout.clone()
    } else {
        let mut l = Layout::blank(frame.task, n);
        l.cells = contents.iter().map(|&t| shown_kind(t)).collect();
        l.walls = walls;
        let goal = l.positions().find(|&p| l.cell(p) == CellKind::Goal);
        let table = l.positions().filter(|&p| l.cell(p) == CellKind::Table).collect();
        l.goal = goal;
        l.table = table;
        l.printer = layout.printer;
        Arc::new(l)
    };
    Ok(EnvState {
        layout,
        agent,
        carrying,
        printer,
    })
}

/// Position roles used by the positional embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Bos = 0,
    Sep = 1,
    Cell = 2,
    Wall = 3,
}

pub const N_ROLES: usize = 4;

/// Structural coordinates of one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PosFeatures {
    pub role: Role,
    pub row: usize,
    pub col: usize,
    /// Index of the state the position belongs to.
    pub step: usize,
}

pub fn position_features(frame: Frame, index: usize) -> PosFeatures {
    if index == 0 {
        return PosFeatures {
            role: Role::Bos,
            row: 0,
            col: 0,
            step: 0,
        };
    }
    let q = index - 1;
    let block = frame.state_len() + 1;
    let (step, slot) = (q / block, q % block);
    if slot == frame.state_len() {
        return PosFeatures {
            role: Role::Sep,
            row: 0,
            col: 0,
            step,
        };
    }
    let (cell, role) = if frame.has_walls() {
        (slot / 2, if slot % 2 == 0 { Role::Cell } else { Role::Wall })
    } else {
        (slot, Role::Cell)
    };
    PosFeatures {
        role,
        row: cell / frame.size,
        col: cell % frame.size,
        step,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{apply_action, gen_layout, legal_actions, spawn_state, Action};

    #[test]
    fn roundtrip_random_states() {
        for task in TaskKind::ALL {
            for seed in 0..40u64 {
                let size = crate::gridworld::size_range(task).0 + (seed % 3) as usize;
                let l = Arc::new(gen_layout(task, size, seed).unwrap());
                let mut s = spawn_state(&l, seed);
                for k in 0..10 {
                    let t = encode_state(&s);
                    assert_eq!(t.len(), Frame::of(&s).state_len());
                    let back = decode_tokens(&t, &l).unwrap();
                    assert!(Arc::ptr_eq(&back.layout, &l));
                    assert_eq!(back, s);
                    let legal = legal_actions(&s);
                    if legal.is_empty() {
                        break;
                    }
                    s = apply_action(&s, legal[(seed as usize + k) % legal.len()]).unwrap();
                }
            }
        }
    }

    #[test]
    fn rejects_bad_sequences() {
        let l = Arc::new(gen_layout(TaskKind::FrozenLake, 3, 1).unwrap());
        let s = spawn_state(&l, 0);
        let mut t = encode_state(&s);
        assert!(matches!(decode_tokens(&t[1..], &l), Err(Malformed::WrongLength { .. })));
        let other = (0..9).find(|&i| t[i] == EMPTY).unwrap();
        t[other] = AGENT;
        assert_eq!(decode_tokens(&t, &l), Err(Malformed::AgentCount(2)));
        let mut t = encode_state(&s);
        t[0] = TABLE;
        assert!(matches!(decode_tokens(&t, &l), Err(Malformed::IllegalCode { index: 0, .. })));
        let mut t = encode_state(&s);
        t[0] = SEP;
        assert!(decode_tokens(&t, &l).is_err());
    }

    #[test]
    fn altered_scene_gets_its_own_layout() {
        let l = Arc::new(gen_layout(TaskKind::FrozenLake, 4, 2).unwrap());
        let s = spawn_state(&l, 0);
        let mut t = encode_state(&s);
        let hole = t.iter().position(|&x| x == HOLE).unwrap();
        t[hole] = EMPTY;
        let d = decode_tokens(&t, &l).unwrap();
        assert!(!Arc::ptr_eq(&d.layout, &l));
        assert_eq!(d.layout.cell(Pos::from_index(hole, 4)), CellKind::Empty);
    }

    #[test]
    fn features_follow_blocks() {
        let f = Frame {
            task: TaskKind::Maze,
            size: 3,
        };
        assert_eq!(f.state_len(), 18);
        assert_eq!(position_features(f, 0).role, Role::Bos);
        let p = position_features(f, 1 + 19 + 5);
        assert_eq!((p.role, p.row, p.col, p.step), (Role::Wall, 0, 2, 1));
        assert_eq!(position_features(f, 19).role, Role::Sep);
        let ctx = context(&[spawn_state(&Arc::new(gen_layout(TaskKind::Maze, 3, 0).unwrap()), 0)]);
        assert_eq!(ctx.len(), f.context_len(1));
        assert_eq!(*ctx.last().unwrap(), SEP);
        let _ = Action::Up;
    }
}
