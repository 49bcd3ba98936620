use vou_core::admission::PolicyKind;
use vou_core::control::LoopModel;
use vou_core::Step;
use vou_netsim::{aoi_trace, run, HopModel, PolicyConfig, ScenarioConfig, ServiceTime};

fn one_hop(service: ServiceTime, loss: f64, steps: u64) -> ScenarioConfig {
    let instant = ServiceTime::Deterministic { ms: 0.0 };
    ScenarioConfig {
        name: "one-hop".into(),
        loops: 1,
        model: LoopModel::reference(),
        steps,
        hops: vec![HopModel::queue("up", service, loss, None), HopModel::queue("down", instant, 0.0, None)],
        data_paths: vec![vec![0]],
        ack_paths: vec![vec![1]],
        background: Vec::new(),
        seed: 5,
    }
}

fn periodic() -> PolicyConfig {
    PolicyConfig::new(PolicyKind::Periodic, 0.0)
}

#[test]
fn identical_seeds_give_identical_traces() {
    let cfg = ScenarioConfig::local_two_hop(2).with_steps(3000).with_seed(11);
    let policy = PolicyConfig::new(PolicyKind::VouInst, 2.0);
    let a = run(&cfg, &policy).unwrap();
    let b = run(&cfg, &policy).unwrap();
    assert!(a.same_trace(&b));
    let c = run(&cfg.clone().with_seed(12), &policy).unwrap();
    assert!(!a.same_trace(&c));
}

#[test]
fn admitted_packets_are_accounted_for() {
    let cases = [
        (ScenarioConfig::local_two_hop(3), PolicyConfig::new(PolicyKind::VouInst, 2.0)),
        (ScenarioConfig::local_two_hop(3), PolicyConfig::new(PolicyKind::AcpRate, 0.0)),
        (ScenarioConfig::local_two_hop(3), periodic()),
        (ScenarioConfig::internet(2), PolicyConfig::new(PolicyKind::AugmEtCost, 3.0)),
    ];
    for (cfg, policy) in cases {
        let r = run(&cfg.with_steps(3000).with_seed(3), &policy).unwrap();
        for l in &r.loops {
            assert!(l.admitted() > 0);
            assert_eq!(l.admitted(), l.delivered + l.lost_in_hop + l.dropped_full_queue + l.in_flight_at_end);
            assert_eq!(l.delivered as usize, l.receptions.len());
            assert_eq!(l.delays_ms.len(), l.receptions.len());
        }
        let bg = &r.background;
        assert!(bg.delivered + bg.lost_in_hop + bg.dropped_full_queue <= bg.sent);
    }
}

#[test]
fn deliveries_keep_admission_order() {
    for cfg in [ScenarioConfig::local_two_hop(3), ScenarioConfig::internet(3)] {
        let r = run(&cfg.with_steps(3000), &periodic()).unwrap();
        for l in &r.loops {
            assert!(l.receptions.windows(2).all(|w| w[0].0 < w[1].0));
            assert!(l.receptions.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }
}

#[test]
fn uncontended_hop_delays_by_its_service_time() {
    let r = run(&one_hop(ServiceTime::Deterministic { ms: 1.0 }, 0.0, 500), &periodic()).unwrap();
    let l = &r.loops[0];
    assert_eq!(l.admitted(), 500);
    // The last sample is still on the wire when the run ends.
    assert_eq!((l.delivered, l.in_flight_at_end), (499, 1));
    assert!(l.delays_ms.iter().all(|&d| (d - 1.0).abs() < 1e-9));
    // Arrival 1 ms after sampling is usable from the next step on.
    assert!(l.receptions.iter().all(|&(g, r)| r == g + 1));
    assert!(l.aoi[1..].iter().all(|&a| a == 1));
}

#[test]
fn blocked_channel_leaves_the_plant_open_loop() {
    let r = run(&one_hop(ServiceTime::Deterministic { ms: 1.0 }, 1.0, 8000), &periodic()).unwrap();
    let l = &r.loops[0];
    assert_eq!(l.delivered, 0);
    assert_eq!(l.lost_in_hop + l.in_flight_at_end, 8000);
    assert!(l.u.iter().all(|u| u[0] == 0.0));
    assert!(l.aoi.iter().enumerate().all(|(k, &a)| a == k as Step + 1));
    assert_eq!(l.window_costs.len(), 5);
    assert!(l.window_costs[0] > 1e100);
    assert!(l.window_costs.iter().all(|c| c.is_finite()));
}

#[test]
fn zero_delay_periodic_keeps_age_at_zero() {
    let r = run(&ScenarioConfig::ideal(2).with_steps(1000), &periodic()).unwrap();
    for trace in aoi_trace(&r) {
        assert!(trace.iter().all(|&a| a == 0));
    }
}

#[test]
fn age_follows_the_reception_log() {
    let cfg = ScenarioConfig::local_two_hop(3).with_steps(3000).with_seed(8);
    for policy in [PolicyConfig::new(PolicyKind::AugmZwEt, 1.0), PolicyConfig::new(PolicyKind::VouInst, 2.0)] {
        let r = run(&cfg, &policy).unwrap();
        for l in &r.loops {
            for (k, &age) in l.aoi.iter().enumerate() {
                let k = k as Step;
                let fresh = l.receptions.iter().filter(|&&(_, recv)| recv <= k).map(|&(g, _)| g).max();
                assert_eq!(age, fresh.map_or(k + 1, |g| k - g), "step {k}");
            }
        }
    }
}

#[test]
fn ideal_channel_cost_matches_riccati_solution() {
    let p = LoopModel::reference().p()[(0, 0)];
    let mut costs = Vec::new();
    for seed in 0..3 {
        let r = run(&ScenarioConfig::ideal(1).with_seed(seed), &periodic()).unwrap();
        costs.extend(r.window_costs());
    }
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    assert!((mean - p).abs() < 0.1 * p, "mean {mean}, P {p}");
}

#[test]
fn processing_delay_postpones_reception() {
    let policy = PolicyConfig::new(PolicyKind::Periodic, 0.0).with_processing_delay(7.0);
    let r = run(&ScenarioConfig::ideal(1).with_steps(300), &policy).unwrap();
    let l = &r.loops[0];
    assert!(l.delivered > 290);
    assert!(l.receptions.iter().all(|&(g, r)| r == g + 1));
}

#[test]
fn background_flow_runs_for_the_whole_run() {
    let r =
        run(&ScenarioConfig::local_two_hop(1).with_steps(2000), &PolicyConfig::new(PolicyKind::AcpRate, 0.0)).unwrap();
    // One dummy message every 10 ms, offset by 5 ms, until the last step.
    assert_eq!(r.background.sent, 1999);
    assert!(r.background.delivered > 1900);
}

#[test]
fn invalid_scenarios_are_rejected() {
    let mut cfg = ScenarioConfig::local_two_hop(2);
    cfg.data_paths[1] = vec![99];
    assert!(run(&cfg, &periodic()).is_err());
    assert!(ScenarioConfig::preset("mesh", 2).is_err());
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn conservation_and_order_on_random_channels(
            seed in 0u64..1000,
            loss in 0.0f64..0.5,
            mean in 0.5f64..30.0,
            cap in proptest::option::of(1usize..8),
            policy in prop_oneof![Just(PolicyKind::Periodic), Just(PolicyKind::AugmEtOp2), Just(PolicyKind::VouInst)],
        ) {
            let mut cfg = one_hop(ServiceTime::Exponential { mean_ms: mean }, loss, 600).with_seed(seed);
            cfg.hops[0].queue_capacity = cap;
            let r = run(&cfg, &PolicyConfig::new(policy, 1.0)).unwrap();
            let l = &r.loops[0];
            prop_assert_eq!(l.admitted(), l.delivered + l.lost_in_hop + l.dropped_full_queue + l.in_flight_at_end);
            prop_assert!(l.receptions.windows(2).all(|w| w[0].0 < w[1].0));
            prop_assert!(l.receptions.iter().all(|&(g, recv)| recv >= g));
        }
    }
}
