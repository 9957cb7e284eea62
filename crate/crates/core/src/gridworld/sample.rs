use super::{apply_action, enumerate_optimal_actions, legal_actions, Action, EnvState, ProgressMap};
use crate::rng;
use rand::seq::SliceRandom;

/// A sequence of states joined by valid transitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub states: Vec<EnvState>,
    pub actions: Vec<Action>,
}

impl Trajectory {
    pub fn start(state: EnvState) -> Trajectory {
        Trajectory {
            states: vec![state],
            actions: Vec::new(),
        }
    }

    pub fn last(&self) -> &EnvState {
        self.states.last().expect("trajectory has a start state")
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn push(&mut self, action: Action) {
        let next = apply_action(self.last(), action).expect("action was legal");
        self.actions.push(action);
        self.states.push(next);
    }

    /// Every consecutive pair is connected by its recorded action.
    pub fn is_consistent(&self) -> bool {
        self.states.len() == self.actions.len() + 1
            && self
                .actions
                .iter()
                .zip(self.states.windows(2))
                .all(|(&a, w)| apply_action(&w[0], a).as_ref() == Ok(&w[1]))
    }
}

/// Shortest path to termination, breaking ties uniformly at random.
///
/// Starting from a state with no finite distance yields the one-state trajectory.
pub fn sample_optimal_trajectory(state: &EnvState, pmap: &ProgressMap, seed: u64) -> Trajectory {
    let mut r = rng::rng(seed);
    let mut traj = Trajectory::start(state.clone());
    loop {
        let options = enumerate_optimal_actions(traj.last(), pmap);
        match options.choose(&mut r) {
            Some(&a) => traj.push(a),
            None => return traj,
        }
    }
}

/// Uniform random walk over legal actions, stopping at termination or `max_len` steps.
pub fn random_walk(state: &EnvState, max_len: usize, seed: u64) -> Trajectory {
    let mut r = rng::rng(seed);
    let mut traj = Trajectory::start(state.clone());
    while traj.len() < max_len {
        let legal = legal_actions(traj.last());
        match legal.choose(&mut r) {
            Some(&a) => traj.push(a),
            None => break,
        }
    }
    traj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{compute_progress_map, Layout, Pos, TaskKind};
    use std::sync::Arc;

    fn open(goal: Pos) -> (Arc<Layout>, ProgressMap) {
        let mut l = Layout::blank(TaskKind::FrozenLake, 3);
        l.set_goal(goal);
        let pm = compute_progress_map(&l);
        (Arc::new(l), pm)
    }

    #[test]
    fn single_step_when_adjacent() {
        let (l, pm) = open(Pos::new(0, 1));
        let t = sample_optimal_trajectory(&EnvState::new(l, Pos::new(0, 0)), &pm, 1);
        assert_eq!(t.actions, vec![Action::Right]);
        assert!(t.is_consistent());
    }

    #[test]
    fn optimal_length_equals_distance() {
        let (l, pm) = open(Pos::new(2, 2));
        for seed in 0..20 {
            let s = EnvState::new(l.clone(), Pos::new(0, 0));
            let t = sample_optimal_trajectory(&s, &pm, seed);
            assert_eq!(t.len(), 4);
            assert!(t.last().is_terminal());
        }
    }

    #[test]
    fn zero_length_walk() {
        let (l, _) = open(Pos::new(2, 2));
        let t = random_walk(&EnvState::new(l, Pos::new(0, 0)), 0, 5);
        assert_eq!(t.states.len(), 1);
        assert!(t.actions.is_empty());
    }

    #[test]
    fn walk_steps_are_valid_and_stop_at_goal() {
        let (l, _) = open(Pos::new(1, 1));
        for seed in 0..50 {
            let t = random_walk(&EnvState::new(l.clone(), Pos::new(0, 0)), 30, seed);
            assert!(t.is_consistent());
            assert!(t.len() <= 30);
            let hits = t.states.iter().filter(|s| s.is_terminal()).count();
            assert!(hits <= 1);
            if hits == 1 {
                assert!(t.last().is_terminal());
            }
        }
    }
}
