mod common;

use haplap::ao::separate;
use haplap::experiment::{generate_scenario, scenario_from_toml, scenario_to_toml};
use haplap::model::validate_scenario;
use haplap::placement::{private_rate_lb, TaylorPoint};
use haplap::rates::{fronthaul_rate, private_rate, rate_report};
use haplap::Network;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_placement, random_state};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scenario_toml_round_trips(k in 1usize..8, l in 0usize..4, seed in any::<u64>()) {
        let s = generate_scenario(k, l, seed).unwrap();
        let back = scenario_from_toml(&scenario_to_toml(&s).unwrap()).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn separated_placements_are_valid(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = generate_scenario(4, 3, seed).unwrap();
        if let Ok(q) = separate(&s, &random_placement(&s, &mut rng)) {
            prop_assert!(validate_scenario(&s, &q).is_empty());
        }
    }

    #[test]
    fn report_adds_up(seed in any::<u64>()) {
        let st = random_state(&mut ChaCha8Rng::seed_from_u64(seed));
        let net = Network::new(&st.scenario, &st.q_r, &st.topology).unwrap();
        let r = rate_report(&net, &st.a).unwrap();
        let total: f64 = r.private_rate.iter().chain(&r.common_rate).sum();
        prop_assert!((r.sum_rate - total).abs() <= 1e-9 * total.max(1.0));
        prop_assert!(r.fronthaul_slack.iter().all(|&v| v >= -1e-9));
        prop_assert!(r.power_slack.iter().all(|&v| v >= -1e-9));
    }

    #[test]
    fn more_quantization_noise_lowers_fronthaul_load(seed in any::<u64>(), factor in 1.01f64..100.0) {
        let st = random_state(&mut ChaCha8Rng::seed_from_u64(seed));
        for u in 0..st.scenario.num_uavs() {
            let mut b = st.a.clone();
            b.quant_var[u] *= factor;
            prop_assert!(fronthaul_rate(&b, u).unwrap() <= fronthaul_rate(&st.a, u).unwrap());
        }
    }

    #[test]
    fn private_bound_holds_at_any_feasible_slack(seed in any::<u64>(), shrink in 0.05f64..1.0) {
        let st = random_state(&mut ChaCha8Rng::seed_from_u64(seed));
        let s = &st.scenario;
        let tp = TaylorPoint::new(s, &st.q_r, &st.topology, &st.a).unwrap();
        let slack: Vec<Vec<f64>> = tp.tight_slacks(&st.q).iter().map(|row| row.iter().map(|d| d * shrink).collect()).collect();
        let net = Network::new(s, &st.q, &st.topology).unwrap();
        for k in 0..s.num_ues() {
            let lb = private_rate_lb(&tp, &st.q, &slack, k).unwrap();
            prop_assert!(lb <= private_rate(&net, &st.a, k) + 1e-9);
        }
    }
}
