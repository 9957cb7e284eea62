use super::{Action, EnvState, TaskKind};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Why a transition was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InvalidReason {
    WallCollision,
    OutOfBounds,
    HoleEntry,
    TableEntry,
    PrinterBlock,
    NoAdjacentPrinter,
    NoAdjacentTable,
    /// Drop attempted while not holding the printer.
    NotCarrying,
    /// Pick/Drop outside MiniBehavior.
    UnsupportedAction,
    Terminal,
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

pub type TransitionResult = Result<EnvState, InvalidReason>;

/// Deterministic transition function. Never panics on a valid state.
pub fn apply_action(state: &EnvState, action: Action) -> TransitionResult {
    if state.is_terminal() {
        return Err(InvalidReason::Terminal);
    }
    let layout = &state.layout;
    let size = layout.size;
    match action {
        Action::Up | Action::Down | Action::Left | Action::Right => {
            if layout.has_wall(state.agent, action) && layout.task == TaskKind::Maze {
                // border walls are reported as out-of-bounds below
                if state.agent.step(action, size).is_some() {
                    return Err(InvalidReason::WallCollision);
                }
            }
            let target = state.agent.step(action, size).ok_or(InvalidReason::OutOfBounds)?;
            match layout.cell(target) {
                super::CellKind::Hole => return Err(InvalidReason::HoleEntry),
                super::CellKind::Table => return Err(InvalidReason::TableEntry),
                _ => {}
            }
            if state.printer == Some(target) {
                return Err(InvalidReason::PrinterBlock);
            }
            let mut next = state.clone();
            next.agent = target;
            Ok(next)
        }
        Action::Pick => {
            if layout.task != TaskKind::MiniBehavior {
                return Err(InvalidReason::UnsupportedAction);
            }
            match state.printer {
                Some(p) if !state.carrying && p.is_adjacent(state.agent) => {
                    let mut next = state.clone();
                    next.carrying = true;
                    next.printer = None;
                    Ok(next)
                }
                _ => Err(InvalidReason::NoAdjacentPrinter),
            }
        }
        Action::Drop => {
            if layout.task != TaskKind::MiniBehavior {
                return Err(InvalidReason::UnsupportedAction);
            }
            if !state.carrying {
                return Err(InvalidReason::NotCarrying);
            }
            let spot = Action::MOVES
                .into_iter()
                .filter_map(|d| state.agent.step(d, size))
                .find(|&q| layout.is_table(q))
                .ok_or(InvalidReason::NoAdjacentTable)?;
            let mut next = state.clone();
            next.carrying = false;
            next.printer = Some(spot);
            Ok(next)
        }
    }
}

/// Actions for which [`apply_action`] yields a valid successor, in canonical order.
pub fn legal_actions(state: &EnvState) -> Vec<Action> {
    state
        .task()
        .actions()
        .iter()
        .copied()
        .filter(|&a| apply_action(state, a).is_ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{CellKind, Layout, Pos};
    use std::sync::Arc;

    fn open_lake(size: usize, goal: Pos) -> Arc<Layout> {
        let mut l = Layout::blank(TaskKind::FrozenLake, size);
        l.set_goal(goal);
        Arc::new(l)
    }

    #[test]
    fn move_right_from_origin() {
        let s = EnvState::new(open_lake(3, Pos::new(2, 2)), Pos::new(0, 0));
        let next = apply_action(&s, Action::Right).unwrap();
        assert_eq!(next.agent, Pos::new(0, 1));
    }

    #[test]
    fn up_from_origin_is_out_of_bounds() {
        let s = EnvState::new(open_lake(3, Pos::new(2, 2)), Pos::new(0, 0));
        assert_eq!(apply_action(&s, Action::Up), Err(InvalidReason::OutOfBounds));
    }

    #[test]
    fn corner_of_open_grid_has_two_inward_moves() {
        let s = EnvState::new(open_lake(3, Pos::new(1, 1)), Pos::new(0, 0));
        assert_eq!(legal_actions(&s), vec![Action::Down, Action::Right]);
    }

    #[test]
    fn hole_entry_is_invalid() {
        let mut l = Layout::blank(TaskKind::FrozenLake, 3);
        l.set_goal(Pos::new(2, 2));
        l.cells[1] = CellKind::Hole;
        let s = EnvState::new(Arc::new(l), Pos::new(0, 0));
        assert_eq!(apply_action(&s, Action::Right), Err(InvalidReason::HoleEntry));
    }

    #[test]
    fn terminal_state_rejects_everything() {
        let s = EnvState::new(open_lake(3, Pos::new(0, 0)), Pos::new(0, 0));
        assert!(s.is_terminal());
        assert!(legal_actions(&s).is_empty());
        assert_eq!(apply_action(&s, Action::Down), Err(InvalidReason::Terminal));
    }

    #[test]
    fn pick_and_drop_unsupported_outside_minibehavior() {
        let s = EnvState::new(open_lake(3, Pos::new(2, 2)), Pos::new(0, 0));
        assert_eq!(apply_action(&s, Action::Pick), Err(InvalidReason::UnsupportedAction));
        assert_eq!(apply_action(&s, Action::Drop), Err(InvalidReason::UnsupportedAction));
    }

    fn office() -> Arc<Layout> {
        // 7x7, table on row 1 cols 2..=4, printer at (4,3)
        let mut l = Layout::blank(TaskKind::MiniBehavior, 7);
        for c in 2..=4 {
            l.cells[Pos::new(1, c).index(7)] = CellKind::Table;
            l.table.push(Pos::new(1, c));
        }
        l.cells[Pos::new(4, 3).index(7)] = CellKind::Printer;
        l.printer = Some(Pos::new(4, 3));
        Arc::new(l)
    }

    #[test]
    fn pick_when_adjacent_to_printer() {
        let s = EnvState::new(office(), Pos::new(4, 2));
        let next = apply_action(&s, Action::Pick).unwrap();
        assert!(next.carrying);
        assert!(!next.printer_present());
        assert_eq!(next.agent, s.agent);
        // the printer cell becomes passable once picked
        assert_eq!(apply_action(&next, Action::Right).unwrap().agent, Pos::new(4, 3));
    }

    #[test]
    fn pick_requires_adjacency_and_blocks_movement() {
        let s = EnvState::new(office(), Pos::new(5, 5));
        assert_eq!(apply_action(&s, Action::Pick), Err(InvalidReason::NoAdjacentPrinter));
        let s = EnvState::new(office(), Pos::new(4, 2));
        assert_eq!(apply_action(&s, Action::Right), Err(InvalidReason::PrinterBlock));
    }

    #[test]
    fn drop_onto_adjacent_table_terminates() {
        let s = EnvState::new(office(), Pos::new(4, 2));
        let carrying = apply_action(&s, Action::Pick).unwrap();
        assert_eq!(apply_action(&carrying, Action::Drop), Err(InvalidReason::NoAdjacentTable));
        let mut near = carrying.clone();
        near.agent = Pos::new(2, 3);
        assert_eq!(apply_action(&near, Action::Up), Err(InvalidReason::TableEntry));
        let done = apply_action(&near, Action::Drop).unwrap();
        assert_eq!(done.printer, Some(Pos::new(1, 3)));
        assert!(done.is_terminal());
        // carrying and not at the table: moves only
        let legal = legal_actions(&carrying);
        assert!(legal.iter().all(|a| a.is_move()));
        assert_eq!(apply_action(&s, Action::Drop), Err(InvalidReason::NotCarrying));
    }

    #[test]
    fn maze_wall_blocks_move() {
        let mut l = Layout::blank(TaskKind::Maze, 3);
        l.walls = vec![super::super::WALL_ALL; 9];
        l.open_passage(Pos::new(1, 1), Action::Down);
        l.set_goal(Pos::new(0, 0));
        let s = EnvState::new(Arc::new(l), Pos::new(1, 1));
        assert_eq!(legal_actions(&s), vec![Action::Down]);
        assert_eq!(apply_action(&s, Action::Up), Err(InvalidReason::WallCollision));
        let s0 = EnvState { agent: Pos::new(2, 1), ..s.clone() };
        assert_eq!(apply_action(&s0, Action::Down), Err(InvalidReason::OutOfBounds));
    }
}
