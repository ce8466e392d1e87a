use itsbft::scenario::{load_scenario, Behavior, ByzantineSpec, ScenarioConfig};
use itsbft::simnet::{run_scenario, run_scenario_traced, World};

const TWIN_CLIQUES: &str = r#"
name = "twin"
seed = 3
f = 1

[topology]
nodes = 12
edges = [[0, 1], [0, 2], [0, 3], [0, 4], [0, 5], [1, 2], [1, 3], [1, 4], [1, 5], [2, 3], [2, 4], [2, 5], [3, 4], [3, 5], [4, 5], [6, 7], [6, 8], [6, 9], [6, 10], [6, 11], [7, 8], [7, 9], [7, 10], [7, 11], [8, 9], [8, 10], [8, 11], [9, 10], [9, 11], [10, 11], [0, 6], [2, 8], [3, 9], [4, 10]]

[[demands]]
src = 1
dst = 7
amount_bits = 400000
"#;

fn twin() -> ScenarioConfig {
    load_scenario(TWIN_CLIQUES).unwrap()
}

fn with(node: usize, behaviors: Vec<Behavior>) -> ScenarioConfig {
    let mut c = twin();
    c.byzantine.push(ByzantineSpec { node, behaviors });
    c
}

#[test]
fn honest_run_commits_in_one_view() {
    let mut c = twin();
    c.f = 0;
    let r = run_scenario(&c).unwrap();
    assert_eq!(r.time_seconds, Some(7.0));
    assert_eq!(r.views_executed, 1);
    assert_eq!(r.eavesdrop_percent, 0.0);
    assert_eq!(r.demands[0].served_bits, 400_000);
    assert!(r.demands[0].final_key_bits > 0);
    assert!(!r.violations.any(), "{:?}", r.violations);
}

#[test]
fn equivocating_leader_costs_one_view() {
    let c = with(0, vec![Behavior::EquivocatePropose { views: Some(vec![0]) }]);
    let r = run_scenario(&c).unwrap();
    assert_eq!(r.time_seconds, Some(14.0));
    assert!(r.evidence > 0);
    assert!(r.committed.iter().all(|v| v.view >= 1));
    assert!(!r.violations.any(), "{:?}", r.violations);
}

#[test]
fn contention_is_served_without_breaking_safety() {
    let mut c = with(
        5,
        vec![Behavior::ResourceContention {
            dst: 9,
            amount_bits: 2_000_000,
        }],
    );
    c.topology.capacity_bits = 1_000_000;
    let r = run_scenario(&c).unwrap();
    assert!(!r.violations.any(), "{:?}", r.violations);
    assert!(r.demands.len() == 1, "attacker demands are not reported");
    assert_eq!(r.demands[0].served_bits, 400_000);
}

#[test]
fn drained_pool_drops_demand_from_proposal() {
    let mut c = with(
        1,
        vec![Behavior::ResourceContention {
            dst: 7,
            amount_bits: 50_000_000,
        }],
    );
    c.demands[0].src = 2;
    c.topology.capacity_bits = 400_000;
    c.view_limit = 3;
    let r = run_scenario(&c).unwrap();
    assert!(!r.violations.safety);
    for v in &r.committed {
        assert!(v.plans.iter().all(|p| p.per_path_bits > 0));
    }
}

#[test]
fn late_messages_are_dropped() {
    let c = with(5, vec![Behavior::DelayBeyondDelta { extra_ticks: 2 }]);
    let (r, trace) = run_scenario_traced(&c).unwrap();
    assert_eq!(r.time_seconds, Some(7.0));
    assert!(trace.iter().any(|l| l.contains("\"expired\"")));
    assert!(!r.violations.any());
}

#[test]
fn forged_requirement_and_route_force_view_change() {
    for b in [
        Behavior::ForgedRequirement {
            dst: 11,
            amount_bits: 10_000,
        },
        Behavior::ForgedRoute,
    ] {
        let c = with(0, vec![b.clone()]);
        let (r, trace) = run_scenario_traced(&c).unwrap();
        assert!(r.committed.iter().all(|v| v.view > 0), "{b:?}");
        assert!(trace.iter().any(|l| l.contains("invalid-proposal")), "{b:?}");
        assert_eq!(r.demands[0].served_bits, 400_000, "{b:?}");
        assert!(!r.violations.any(), "{b:?}");
    }
}

#[test]
fn tampered_closure_is_repaired_and_exposed() {
    let c = with(0, vec![Behavior::TamperKc]);
    let r = run_scenario(&c).unwrap();
    assert!(!r.violations.key_mismatch);
    assert!(r.evidence > 0);
    // Path through node 0 is both Byzantine-held and exposed: one of four.
    assert_eq!(r.demands[0].eavesdrop_percent, 25.0);
    assert!(!r.violations.any(), "{:?}", r.violations);
}

#[test]
fn forged_signatures_are_rejected() {
    let c = with(4, vec![Behavior::ForgeTsAttempt]);
    let r = run_scenario(&c).unwrap();
    assert!(r.rejected_messages > 0);
    assert!(!r.violations.forgery_accepted);
    assert_eq!(r.time_seconds, Some(7.0));
}

#[test]
fn stalling_after_vote_does_not_block_commit() {
    let c = with(
        5,
        vec![Behavior::Withhold {
            from_slot: 2,
            views: None,
        }],
    );
    let r = run_scenario(&c).unwrap();
    assert_eq!(r.time_seconds, Some(7.0));
    assert!(!r.violations.any());
}

#[test]
fn silent_leader_times_out() {
    let c = with(
        0,
        vec![Behavior::Withhold {
            from_slot: 0,
            views: Some(vec![0]),
        }],
    );
    let (r, trace) = run_scenario_traced(&c).unwrap();
    assert!(r.committed.iter().all(|v| v.view > 0));
    assert_eq!(r.demands[0].served_bits, 400_000);
    assert!(!r.violations.any(), "{:?}\n{}", r.violations, trace.join("\n"));
}

#[test]
fn identical_seeds_identical_reports() {
    let c = with(0, vec![Behavior::EquivocatePropose { views: None }, Behavior::TamperKc]);
    let a = serde_json::to_string(&run_scenario(&c).unwrap()).unwrap();
    let b = serde_json::to_string(&run_scenario(&c).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_slot_only_advances_the_clock() {
    let mut c = twin();
    c.demands.clear();
    c.f = 0;
    let mut w = World::new(&c).unwrap();
    w.advance_slot();
    assert_eq!(w.now().0, 1);
    assert!(w.replicas().iter().all(|r| r.commits().is_empty()));
}
