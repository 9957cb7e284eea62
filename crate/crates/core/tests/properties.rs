use std::sync::Arc;

use proptest::prelude::*;
use visplan_core::gridworld::text::{decode_layout, decode_state, encode_layout, encode_state};
use visplan_core::gridworld::{
    apply_action, compute_progress_map, enumerate_optimal_actions, gen_layout, legal_actions, random_walk,
    sample_optimal_trajectory, spawn_state, EnvState, TaskKind,
};
use visplan_core::parse::{parse_transition, ParseConfig, ParsedOutcome};
use visplan_core::policy::tokens::{decode_tokens, encode_state as tokens_of};
use visplan_core::raster::{render, TileAtlas};
use visplan_core::reward::{classify, ActionClass};
use visplan_core::train::compute_advantages;

fn task_and_size() -> impl Strategy<Value = (TaskKind, usize)> {
    prop_oneof![
        (3usize..=7).prop_map(|n| (TaskKind::FrozenLake, n)),
        (3usize..=7).prop_map(|n| (TaskKind::Maze, n)),
        (7usize..=8).prop_map(|n| (TaskKind::MiniBehavior, n)),
    ]
}

/// A state somewhere along a random walk from a fresh spawn.
fn any_state() -> impl Strategy<Value = EnvState> {
    (task_and_size(), any::<u64>(), 0usize..12).prop_map(|((task, size), seed, steps)| {
        let layout = Arc::new(gen_layout(task, size, seed).unwrap());
        let start = spawn_state(&layout, seed ^ 0x5eed);
        random_walk(&start, steps, seed).states.pop().unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn generation_is_pure((task, size) in task_and_size(), seed in any::<u64>()) {
        prop_assert_eq!(gen_layout(task, size, seed).unwrap(), gen_layout(task, size, seed).unwrap());
    }

    #[test]
    fn spawn_can_reach_the_goal((task, size) in task_and_size(), seed in any::<u64>()) {
        let layout = Arc::new(gen_layout(task, size, seed).unwrap());
        let pmap = compute_progress_map(&layout);
        let start = spawn_state(&layout, seed);
        let d = pmap.distance(&start);
        prop_assert!(d.is_some());
        let traj = sample_optimal_trajectory(&start, &pmap, seed);
        prop_assert_eq!(traj.actions.len() as u32, d.unwrap());
        prop_assert!(traj.states.last().unwrap().is_terminal());
    }

    #[test]
    fn distances_drop_by_at_most_one(state in any_state()) {
        let pmap = compute_progress_map(&state.layout);
        let here = pmap.distance(&state);
        let optimal = enumerate_optimal_actions(&state, &pmap);
        for a in legal_actions(&state) {
            let next = apply_action(&state, a).unwrap();
            let there = pmap.distance(&next);
            if let (Some(h), Some(t)) = (here, there) {
                prop_assert!(t + 1 >= h, "{h} -> {t}");
                prop_assert_eq!(optimal.contains(&a), t + 1 == h);
            }
        }
        prop_assert_eq!(here == Some(0), state.is_terminal());
    }

    #[test]
    fn parser_recovers_every_simulated_move(state in any_state()) {
        let atlas = TileAtlas::default();
        let cfg = ParseConfig::default();
        prop_assert_eq!(parse_transition(&state, &render(&state, &atlas), &atlas, &cfg), ParsedOutcome::Stay);
        for a in legal_actions(&state) {
            let next = apply_action(&state, a).unwrap();
            let got = parse_transition(&state, &render(&next, &atlas), &atlas, &cfg);
            prop_assert_eq!(got, ParsedOutcome::Action(a));
        }
    }

    #[test]
    fn reward_class_follows_distance(state in any_state()) {
        let pmap = compute_progress_map(&state.layout);
        prop_assume!(!state.is_terminal());
        for a in legal_actions(&state) {
            let next = apply_action(&state, a).unwrap();
            let cls = classify(&state, &ParsedOutcome::Action(a), &pmap);
            let want = match (pmap.distance(&state), pmap.distance(&next)) {
                (Some(h), Some(t)) if t + 1 == h => ActionClass::Optimal,
                (_, Some(_)) => ActionClass::NonOptimal,
                (_, None) => ActionClass::Invalid,
            };
            prop_assert_eq!(cls, want);
        }
        prop_assert_eq!(classify(&state, &ParsedOutcome::Stay, &pmap), ActionClass::NonOptimal);
    }

    #[test]
    fn text_and_tokens_round_trip(state in any_state()) {
        let layout = Arc::new(decode_layout(&encode_layout(&state.layout)).unwrap());
        prop_assert_eq!(&*layout, &*state.layout);
        prop_assert_eq!(decode_state(&layout, &encode_state(&state)).unwrap(), state.clone());
        prop_assert_eq!(decode_tokens(&tokens_of(&state), &state.layout).unwrap(), state);
    }

    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-2.0f64..2.0, 2..16)) {
        let adv = compute_advantages(&rewards);
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let var = adv.iter().map(|a| a * a).sum::<f64>() / n;
        prop_assert!(var.abs() < 1e-9 || (var - 1.0).abs() < 1e-9, "variance {var}");
        // order is preserved
        for i in 0..rewards.len() {
            for j in 0..rewards.len() {
                if rewards[i] < rewards[j] {
                    prop_assert!(adv[i] <= adv[j]);
                }
            }
        }
    }
}
