use visplan_core::corpus::{build_environment_pool, build_vpft_dataset};
use visplan_core::gridworld::TaskKind;

#[test]
fn paper_scale_frozenlake_pool() {
    let pool = build_environment_pool(TaskKind::FrozenLake, &[3, 4, 5, 6], 1250, 0.2, 0).unwrap();
    for (_, &(train, test)) in &pool.split().per_size {
        assert_eq!((train, test), (1000, 250));
    }
    let pairs = build_vpft_dataset(&pool, 0).len() as f64;
    println!("vpft pairs {pairs}");
    assert!((pairs - 12806.0).abs() <= 0.1 * 12806.0, "{pairs}");
}
