use super::{apply_action, legal_actions, Action, EnvState, Layout, Pos, TaskKind};
use std::collections::VecDeque;
use std::sync::Arc;

/// Position in the extended (position x phase) state space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// FrozenLake/Maze, or MiniBehavior before the pick.
    Free,
    /// MiniBehavior while holding the printer.
    Carrying,
}

impl Phase {
    fn index(self) -> usize {
        match self {
            Phase::Free => 0,
            Phase::Carrying => 1,
        }
    }
}

/// Remaining-step counts D(s) for every (cell, phase) of one layout.
///
/// Terminal states have D = 0; states from which no terminal state can be
/// reached are `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgressMap {
    pub task: TaskKind,
    pub size: usize,
    values: Vec<Option<u32>>,
}

impl ProgressMap {
    pub fn get(&self, pos: Pos, phase: Phase) -> Option<u32> {
        self.values[phase.index() * self.size * self.size + pos.index(self.size)]
    }

    /// D for a state on this map's layout. Terminal states are 0.
    pub fn distance(&self, state: &EnvState) -> Option<u32> {
        if state.is_terminal() {
            return Some(0);
        }
        let phase = phase_of(state)?;
        self.get(state.agent, phase)
    }

    pub fn phases(&self) -> usize {
        self.values.len() / (self.size * self.size)
    }

    /// Raw table, phase-major then row-major.
    pub fn values(&self) -> &[Option<u32>] {
        &self.values
    }

    pub fn max_finite(&self) -> u32 {
        self.values.iter().flatten().copied().max().unwrap_or(0)
    }
}

fn phase_of(state: &EnvState) -> Option<Phase> {
    if state.carrying {
        return Some(Phase::Carrying);
    }
    if state.task() == TaskKind::MiniBehavior && state.printer != state.layout.printer {
        return None;
    }
    Some(Phase::Free)
}

/// State with the agent on `pos` in `phase`, when the agent may stand there.
pub(crate) fn node_state(layout: &Arc<Layout>, pos: Pos, phase: Phase) -> Option<EnvState> {
    let state = EnvState {
        layout: layout.clone(),
        agent: pos,
        carrying: phase == Phase::Carrying,
        printer: match phase {
            Phase::Free => layout.printer,
            Phase::Carrying => None,
        },
    };
    state.passable(pos).then_some(state)
}

/// Multi-source backward BFS from the terminal states over all legal actions
/// (moves, plus Pick and Drop in MiniBehavior).
pub fn compute_progress_map(layout: &Layout) -> ProgressMap {
    let layout = Arc::new(layout.clone());
    let n = layout.n_cells();
    let phases = layout.task.phases();
    let total = n * phases;
    const SINK: usize = usize::MAX;
    let node = |pos: Pos, phase: Phase| phase.index() * n + pos.index(layout.size);

    let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); total];
    let mut values = vec![None; total];
    let mut queue = VecDeque::new();
    let mut into_sink = Vec::new();
    for phase_idx in 0..phases {
        let phase = if phase_idx == 0 { Phase::Free } else { Phase::Carrying };
        for pos in layout.positions() {
            let Some(state) = node_state(&layout, pos, phase) else { continue };
            let id = node(pos, phase);
            if state.is_terminal() {
                values[id] = Some(0);
                queue.push_back(id);
                continue;
            }
            for &action in layout.task.actions() {
                if let Ok(next) = apply_action(&state, action) {
                    let target = if next.is_terminal() {
                        SINK
                    } else {
                        match phase_of(&next) {
                            Some(p) => node(next.agent, p),
                            None => continue,
                        }
                    };
                    if target == SINK {
                        into_sink.push(id);
                    } else {
                        reverse[target].push(id);
                    }
                }
            }
        }
    }
    for id in into_sink {
        if values[id].is_none() {
            values[id] = Some(1);
            queue.push_back(id);
        }
    }
    while let Some(id) = queue.pop_front() {
        let d = values[id].expect("queued nodes have a distance");
        for &pred in &reverse[id] {
            if values[pred].is_none() {
                values[pred] = Some(d + 1);
                queue.push_back(pred);
            }
        }
    }
    ProgressMap {
        task: layout.task,
        size: layout.size,
        values,
    }
}

/// Legal actions whose successor is exactly one step closer to termination.
///
/// Empty at terminal states and at states with no finite distance.
pub fn enumerate_optimal_actions(state: &EnvState, pmap: &ProgressMap) -> Vec<Action> {
    let Some(d) = pmap.distance(state) else { return Vec::new() };
    if d == 0 {
        return Vec::new();
    }
    legal_actions(state)
        .into_iter()
        .filter(|&a| {
            let next = apply_action(state, a).expect("legal action");
            pmap.distance(&next) == Some(d - 1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::CellKind;

    #[test]
    fn open_lake_is_manhattan() {
        let mut l = Layout::blank(TaskKind::FrozenLake, 3);
        l.set_goal(Pos::new(2, 2));
        let pm = compute_progress_map(&l);
        assert_eq!(pm.get(Pos::new(0, 0), Phase::Free), Some(4));
        assert_eq!(pm.get(Pos::new(2, 1), Phase::Free), Some(1));
        assert_eq!(pm.get(Pos::new(2, 2), Phase::Free), Some(0));
        for p in l.positions() {
            assert_eq!(pm.get(p, Phase::Free), Some(p.manhattan(Pos::new(2, 2)) as u32));
        }
    }

    #[test]
    fn holes_are_unreachable_and_detours_count() {
        let mut l = Layout::blank(TaskKind::FrozenLake, 3);
        l.set_goal(Pos::new(0, 2));
        l.cells[Pos::new(0, 1).index(3)] = CellKind::Hole;
        l.cells[Pos::new(1, 1).index(3)] = CellKind::Hole;
        let pm = compute_progress_map(&l);
        assert_eq!(pm.get(Pos::new(0, 1), Phase::Free), None);
        // (0,0) -> (1,0) -> (2,0) -> (2,1) -> (2,2) -> (1,2) -> (0,2)
        assert_eq!(pm.get(Pos::new(0, 0), Phase::Free), Some(6));
    }

    #[test]
    fn diagonal_goal_has_two_optimal_moves() {
        let mut l = Layout::blank(TaskKind::FrozenLake, 3);
        l.set_goal(Pos::new(2, 2));
        let pm = compute_progress_map(&l);
        let s = EnvState::new(Arc::new(l), Pos::new(1, 1));
        assert_eq!(enumerate_optimal_actions(&s, &pm), vec![Action::Down, Action::Right]);
    }

    #[test]
    fn corridor_has_one_optimal_move() {
        let mut l = Layout::blank(TaskKind::FrozenLake, 3);
        l.set_goal(Pos::new(0, 2));
        for c in 0..2 {
            l.cells[Pos::new(1, c).index(3)] = CellKind::Hole;
        }
        let pm = compute_progress_map(&l);
        let s = EnvState::new(Arc::new(l), Pos::new(0, 0));
        assert_eq!(enumerate_optimal_actions(&s, &pm), vec![Action::Right]);
    }

    #[test]
    fn minibehavior_counts_pick_and_drop() {
        let mut l = Layout::blank(TaskKind::MiniBehavior, 7);
        l.cells[Pos::new(1, 3).index(7)] = CellKind::Table;
        l.table.push(Pos::new(1, 3));
        l.cells[Pos::new(3, 3).index(7)] = CellKind::Printer;
        l.printer = Some(Pos::new(3, 3));
        let pm = compute_progress_map(&l);
        // pick from (4,3), walk (4,3)->(3,3)->(2,3), drop
        assert_eq!(pm.get(Pos::new(4, 3), Phase::Free), Some(4));
        assert_eq!(pm.get(Pos::new(2, 3), Phase::Carrying), Some(1));
        // adjacent to the printer and to the table at once: pick, drop
        assert_eq!(pm.get(Pos::new(2, 3), Phase::Free), Some(2));
        let s = EnvState::new(Arc::new(l), Pos::new(2, 3));
        assert_eq!(enumerate_optimal_actions(&s, &pm), vec![Action::Pick]);
    }
}
