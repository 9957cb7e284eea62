use std::collections::{HashSet, VecDeque};
use std::sync::Arc;
use visplan_core::gridworld::{apply_action, gen_layout, legal_actions, spawn_state, Action, EnvState, Pos, TaskKind};
use visplan_core::parse::{parse_transition, InvalidTransition, ParseConfig, ParsedOutcome};
use visplan_core::raster::{overlay_agent, render, render_scene, TileAtlas};

/// Every state reachable from any spawn cell.
fn reachable(task: TaskKind, size: usize, seed: u64) -> Vec<EnvState> {
    let l = Arc::new(gen_layout(task, size, seed).unwrap());
    let mut seen = HashSet::new();
    let mut queue: VecDeque<EnvState> = (0..64).map(|s| spawn_state(&l, s)).collect();
    let mut out = Vec::new();
    while let Some(s) = queue.pop_front() {
        if !seen.insert(s.clone()) {
            continue;
        }
        for a in legal_actions(&s) {
            queue.push_back(apply_action(&s, a).unwrap());
        }
        out.push(s);
    }
    out
}

fn sizes(task: TaskKind) -> std::ops::RangeInclusive<usize> {
    match task {
        TaskKind::MiniBehavior => 7..=8,
        _ => 3..=6,
    }
}

#[test]
fn rendered_successors_parse_to_their_action() {
    let atlas = TileAtlas::default();
    let cfg = ParseConfig::default();
    let mut pairs = 0;
    for task in TaskKind::ALL {
        for size in sizes(task) {
            for seed in 0..4 {
                for s in reachable(task, size, seed) {
                    for a in legal_actions(&s) {
                        let next = apply_action(&s, a).unwrap();
                        let got = parse_transition(&s, &render(&next, &atlas), &atlas, &cfg);
                        assert_eq!(got, ParsedOutcome::Action(a), "{task} {size} seed {seed} {:?} {a}", s.agent);
                        pairs += 1;
                    }
                }
            }
        }
    }
    assert!(pairs > 1000, "{pairs}");
}

#[test]
fn adversarial_rasters_are_invalid() {
    let atlas = TileAtlas::default();
    let cfg = ParseConfig::default();
    for task in TaskKind::ALL {
        let size = *sizes(task).start() + 1;
        for seed in 0..4 {
            for s in reachable(task, size, seed).into_iter().take(40) {
                let img = render_scene(&s, &atlas);
                assert!(parse_transition(&s, &img, &atlas, &cfg).is_invalid());
                for p in s.layout.positions() {
                    if p == s.agent {
                        continue;
                    }
                    let mut dual = render(&s, &atlas);
                    overlay_agent(&mut dual, p, &atlas, s.carrying);
                    assert!(parse_transition(&s, &dual, &atlas, &cfg).is_invalid(), "dual {p}");
                    if s.passable(p) && p.manhattan(s.agent) > 1 {
                        let mut far = s.clone();
                        far.agent = p;
                        assert_eq!(
                            parse_transition(&s, &render(&far, &atlas), &atlas, &cfg),
                            ParsedOutcome::Invalid(InvalidTransition::Teleport)
                        );
                    }
                }
                if task == TaskKind::Maze {
                    for d in Action::MOVES {
                        if let Some(q) = s.agent.step(d, size) {
                            if s.layout.has_wall(s.agent, d) {
                                let mut crossed = s.clone();
                                crossed.agent = q;
                                assert_eq!(
                                    parse_transition(&s, &render(&crossed, &atlas), &atlas, &cfg),
                                    ParsedOutcome::Invalid(InvalidTransition::WallViolation)
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    let _ = Pos::new(0, 0);
}
