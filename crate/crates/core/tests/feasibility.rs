//! Random actions always decode to structurally valid allocations.

use oran_diffql::env::{apply_action, encode_state, project_action, ActionLayout, ActionVector, EnvConfig, PowerMode};
use oran_diffql::model::{check_constraints, evaluate, NetworkConfig, Scenario, POWER_TOLERANCE};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn two_ru_desk() -> NetworkConfig {
    let mut cfg = NetworkConfig::desk();
    cfg.num_rus = 2;
    cfg
}

#[test]
fn ten_thousand_random_actions_are_structurally_feasible() {
    let cfg = two_ru_desk();
    let layout = ActionLayout::of(&cfg);
    let scenario = Scenario::draw(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..10_000 {
        let action = ActionVector::random(&layout, &mut rng);
        let mode = if i % 2 == 0 { PowerMode::Learned } else { PowerMode::UniformSplit };
        let alloc = project_action(&action, &cfg, mode);
        let rep = check_constraints(&alloc, &scenario.channel, &cfg);
        assert!(rep.structural_ok(), "action {i}: {rep:?}");
        for r in 0..cfg.num_rus {
            assert!(alloc.ru_power(r) <= cfg.ru_max_power() + POWER_TOLERANCE);
        }
    }
}

fn small_config() -> impl Strategy<Value = (NetworkConfig, u64)> {
    (1usize..=3, 1usize..=6, 3usize..=8, any::<u64>()).prop_map(|(rus, ues, prbs, seed)| {
        let mut cfg = NetworkConfig::desk().with_num_ues(ues);
        cfg.num_rus = rus;
        cfg.total_prbs = prbs;
        (cfg, seed)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_feasible_and_reward_finite(
        (cfg, seed) in small_config(),
        raw in prop::collection::vec(-1.5f64..1.5, 0..400),
    ) {
        let layout = ActionLayout::of(&cfg);
        let values: Vec<f64> = (0..layout.dim()).map(|i| raw.get(i).copied().unwrap_or(0.0)).collect();
        let action = ActionVector::new(values);
        let scenario = Scenario::draw(&cfg, seed);
        let env_cfg = EnvConfig::default();
        let step = apply_action(&action, &scenario.channel, &cfg, &env_cfg);
        prop_assert!(step.report.structural_ok());
        prop_assert!(step.reward.is_finite());
        for r in 0..cfg.num_rus {
            prop_assert!(step.allocation.ru_power(r) <= cfg.ru_max_power() + POWER_TOLERANCE);
        }
        let again = encode_state(&project_action(&action, &cfg, env_cfg.power_mode), &scenario.channel, &cfg, env_cfg.power_levels);
        prop_assert_eq!(again, step.state);
    }

    #[test]
    fn slice_rates_sum_to_total((cfg, seed) in small_config(), fill in -1.0f64..1.0) {
        let layout = ActionLayout::of(&cfg);
        let alloc = project_action(&ActionVector::filled(&layout, fill), &cfg, PowerMode::Learned);
        let scenario = Scenario::draw(&cfg, seed);
        let m = evaluate(&alloc, &scenario.channel, &cfg);
        let by_slice: f64 = m.rate_slice.iter().sum();
        let by_ue: f64 = m.rate_ue.iter().sum();
        prop_assert!((by_slice - m.rate_total).abs() <= 1e-9 * m.rate_total.max(1.0));
        prop_assert!((by_ue - m.rate_total).abs() <= 1e-9 * m.rate_total.max(1.0));
    }

    #[test]
    fn more_own_power_never_lowers_own_sinr((cfg, seed) in small_config(), boost in 1.0f64..4.0) {
        let layout = ActionLayout::of(&cfg);
        let alloc = project_action(&ActionVector::filled(&layout, 0.5), &cfg, PowerMode::Learned);
        let scenario = Scenario::draw(&cfg, seed);
        let before = evaluate(&alloc, &scenario.channel, &cfg);
        for u in 0..cfg.num_ues() {
            let Some(r) = alloc.serving_ru(u) else { continue };
            for k in 0..cfg.total_prbs {
                if !alloc.prb[[u, r, k]] {
                    continue;
                }
                let mut boosted = alloc.clone();
                boosted.power[[u, r, k]] *= boost;
                let after = evaluate(&boosted, &scenario.channel, &cfg);
                prop_assert!(after.sinr[[u, k]] >= before.sinr[[u, k]]);
            }
        }
    }
}
