use std::sync::Arc;

use beamhop::baselines::{top_k, top_k_by_full_sort, PolicyKind, SchedulerPolicy};
use beamhop::channel::channel_matrix;
use beamhop::config::DESK_TOML;
use beamhop::env::{decode_action, Scheduler};
use beamhop::ppo::normalize_advantages;
use beamhop::queueing::TrafficProcess;
use beamhop::{Agent, Config, Env, Scenario};
use proptest::prelude::*;

fn desk_cfg() -> Config {
    Config::from_toml_str(DESK_TOML).unwrap()
}

fn desk() -> Arc<Scenario> {
    Arc::new(Scenario::build(&desk_cfg()).unwrap())
}

fn policy() -> impl Strategy<Value = PolicyKind> {
    prop_oneof![
        Just(PolicyKind::Tp),
        Just(PolicyKind::Dp),
        Just(PolicyKind::Uswgp),
        Just(PolicyKind::Random),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn episodes_keep_their_books(kind in policy(), seed in any::<u64>(), scale in 0.1f64..6.0) {
        let scn = desk();
        let mut env = Env::new(scn.clone()).with_demand_scale(scale);
        let mut p = SchedulerPolicy::new(kind);
        env.reset(seed);
        p.on_reset(seed);
        let (mut bits, mut delay) = (env.state().total_bits, env.state().delay_sum);
        while !env.is_done() {
            let backlog: Vec<u64> = env.state().queues.iter().map(|q| q.backlog()).collect();
            let a = p.act(&env).unwrap();
            let t = env.step(&a).unwrap();
            let st = env.state();
            prop_assert!(st.slot <= scn.episode_slots);
            prop_assert!(st.total_bits >= bits && st.delay_sum >= delay);
            bits = st.total_bits;
            delay = st.delay_sum;
            for (n, q) in st.queues.iter().enumerate() {
                prop_assert!(q.is_conserved());
                prop_assert_eq!(q.buckets().iter().sum::<u64>(), q.backlog());
                prop_assert!(q.backlog() <= scn.queue_capacity_pkts);
                let c = &t.info.link.cells[n];
                let lit = a.pattern.iter().any(|cells| cells.contains(&n));
                prop_assert_eq!(c.kappa, lit);
                prop_assert!(c.served_bits <= c.rate_bps * scn.slot_duration_s);
                prop_assert!(c.served_bits <= backlog[n] as f64 * scn.packet_bits);
            }
        }
    }

    #[test]
    fn decoded_actions_are_in_range(
        picks in proptest::collection::vec(proptest::collection::vec(0usize..6, 2), 2),
        raw in proptest::collection::vec(proptest::collection::vec(-1e5f64..1e5, 2), 2),
    ) {
        let scn = desk();
        let a = decode_action(&scn, &picks, &raw).unwrap();
        for (i, (cells, watts)) in a.pattern.iter().zip(&a.powers).enumerate() {
            prop_assert_eq!(cells.len(), scn.beams_per_satellite);
            for &c in cells {
                prop_assert!(scn.covers(i, c));
            }
            for &w in watts {
                prop_assert!(w >= scn.p_min_w && w <= scn.p_max_w);
            }
        }
    }

    #[test]
    fn policy_heads_stay_well_formed(obs in proptest::collection::vec(-50.0f64..50.0, 24), seed in 0u64..1000) {
        let cfg = desk_cfg();
        let scn = Scenario::build(&cfg).unwrap();
        let a = Agent::new(&scn, &cfg.ppo, seed).unwrap();
        let po = a.policy_forward(&obs).unwrap();
        let p = po.probs();
        let mut off = 0;
        for &n in &po.group_sizes {
            let s: f64 = p[off..off + n].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            off += n;
        }
        let [lo, hi] = a.log_std_bounds;
        for &ls in &po.power_logstd {
            prop_assert!(ls >= lo && ls <= hi);
        }
        prop_assert!(po.value.is_finite());
    }

    #[test]
    fn normalised_advantages_are_standard(adv in proptest::collection::vec(-1e3f64..1e3, 2..300)) {
        let spread = adv.iter().cloned().fold(f64::MIN, f64::max) - adv.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let mut a = adv.clone();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-8);
        prop_assert!((var - 1.0).abs() < 1e-8);
    }

    #[test]
    fn top_k_agrees_with_full_sort(
        key in proptest::collection::vec(0u8..5, 8),
        k in 0usize..=8,
    ) {
        let key: Vec<f64> = key.into_iter().map(f64::from).collect();
        let cells: Vec<usize> = (0..8).rev().collect();
        prop_assert_eq!(top_k(&key, &cells, k), top_k_by_full_sort(&key, &cells, k));
    }

    #[test]
    fn same_seed_same_arrivals(seed in any::<u64>(), rate in 0.0f64..20.0) {
        let mut a = TrafficProcess::constant(vec![rate; 3], seed);
        let mut b = TrafficProcess::constant(vec![rate; 3], seed);
        for slot in 0..50 {
            for n in 0..3 {
                prop_assert_eq!(a.sample_arrivals(n, slot), b.sample_arrivals(n, slot));
            }
        }
    }
}

#[test]
fn desk_channel_is_zero_exactly_off_coverage() {
    let scn = desk();
    let h = channel_matrix(&scn, 0);
    for i in 0..scn.n_satellites {
        for n in 0..scn.n_cells {
            let g = h.get(i, n);
            assert!(g >= 0.0);
            assert_eq!(g == 0.0, !scn.covers(i, n), "sat {i} cell {n}");
        }
    }
}

#[test]
fn orbiting_satellites_hold_altitude() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/table2.toml")).unwrap();
    let scn = Scenario::build(&Config::from_toml_str(&text).unwrap()).unwrap();
    for slot in [0, 1, 50, 199, 10_000] {
        for i in 0..scn.n_satellites {
            let st = scn.satellite_position(i, slot).unwrap();
            let alt = scn.altitude_of(&st);
            assert!((alt / scn.orbit_altitude_m - 1.0).abs() < 0.01, "sat {i} slot {slot}: {alt}");
        }
    }
}

#[test]
fn baselines_spend_exactly_the_budget() {
    let scn = desk();
    let mut env = Env::new(scn.clone()).with_demand_scale(2.0);
    for kind in [PolicyKind::Tp, PolicyKind::Dp, PolicyKind::Uswgp, PolicyKind::Random] {
        let mut p = SchedulerPolicy::new(kind);
        env.reset(9);
        p.on_reset(9);
        while !env.is_done() {
            let a = p.act(&env).unwrap();
            for (i, w) in a.powers.iter().enumerate() {
                assert_eq!(a.pattern[i].len(), scn.beams_per_satellite);
                let mut cells = a.pattern[i].clone();
                cells.sort_unstable();
                cells.dedup();
                assert_eq!(cells.len(), scn.beams_per_satellite);
                assert!((w.iter().sum::<f64>() - scn.total_power_w).abs() <= 1e-9 * scn.total_power_w);
            }
            env.step(&a).unwrap();
        }
    }
}
