use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splagger_core::envs::{env_sample_task, EnvConfig, EnvKind};
use splagger_core::oracle::{exact_posterior, gridworld_suite, posterior_filter, sample_trajectory};
use splagger_core::policy::{policy_act, probabilities};
use splagger_core::probes::{pearl_variance_trace, run_probe, Metric, ProbeConfig};
use splagger_core::trainer::ModelSection;
use splagger_core::{Matrix64, Tape64};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sum_sends_unit_gradient_to_every_input(xs in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let mut tape = Tape64::new();
        let leaves: Vec<_> = xs.iter().map(|&x| tape.leaf(Matrix64::scalar(x))).collect();
        let mut acc = leaves[0];
        for &l in &leaves[1..] {
            acc = tape.add(acc, l).unwrap();
        }
        let g = tape.backward(acc, None).unwrap();
        for &l in &leaves {
            prop_assert_eq!(g.wrt(l, (1, 1)).item(), 1.0);
        }
    }

    #[test]
    fn evaluation_is_bitwise_repeatable(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r, c| Matrix64::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let mut tape = Tape64::new();
        let x = tape.leaf(draw(3, 4));
        let w = tape.leaf(draw(4, 5));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.tanh(h).unwrap();
        let out = tape.softmax(h).unwrap();
        let bindings = HashMap::from([(x, draw(3, 4)), (w, draw(4, 5))]);
        let a = tape.eval(&bindings).unwrap();
        let b = tape.eval(&bindings).unwrap();
        prop_assert_eq!(a[out].data(), b[out].data());
    }

    #[test]
    fn action_distribution_is_normalized(
        logits in prop::collection::vec(-30.0f64..30.0, 2..8),
        u in 0.0f64..1.0,
    ) {
        let p = probabilities(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let act = policy_act(&logits, u);
        prop_assert!(act.action < logits.len());
        prop_assert!((act.logprob - p[act.action].ln()).abs() < 1e-9);
    }

    #[test]
    fn posterior_filtering_matches_batch(seed in any::<u64>(), task in 0usize..4, len in 0usize..40) {
        let suite = gridworld_suite();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let traj = sample_trajectory(&suite, task % suite.tasks.len(), len, &mut rng);
        let batch = exact_posterior(&suite, &traj).unwrap();
        let filtered = posterior_filter(&suite, &traj).unwrap();
        prop_assert!((batch.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in batch.iter().zip(&filtered) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tls_meta_episode_structure(seed in any::<u64>(), index in 0u64..1000) {
        let cfg = EnvConfig::desk();
        let mut task = env_sample_task(EnvKind::Tls, &cfg, seed, index).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index);
        task.reset();
        let (mut done, mut nonzero) = (0, 0);
        for step in 0..task.meta_len() {
            let r = task.env_step(rng.gen_range(0..task.n_actions())).unwrap();
            prop_assert!([0.0, 4.0, -3.0].contains(&r.reward));
            if r.reward != 0.0 {
                nonzero += 1;
            }
            if r.episode_done {
                done += 1;
                prop_assert_eq!(nonzero, done);
            }
            prop_assert_eq!(r.meta_episode_done, step + 1 == task.meta_len());
        }
        prop_assert_eq!(done, task.episodes());
    }

    #[test]
    fn pearl_variance_strictly_decreases(vars in prop::collection::vec(1e-3f64..1e3, 2..100)) {
        let trace = pearl_variance_trace(&vars).unwrap();
        prop_assert!(trace.windows(2).all(|w| w[1] < w[0]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn probes_are_deterministic_with_length_t(
        model in prop::sample::select(vec!["rnn", "splagger-avg", "splagger_nornn-max"]),
        t_len in 1usize..12,
        seed in 0u64..50,
    ) {
        let spec = model.parse::<ModelSection>().unwrap().spec();
        let cfg = ProbeConfig { t_len, in_dim: 6, seeds: vec![seed], n_perms: 3 };
        for metric in [Metric::InitInput, Metric::AllInputs] {
            let a = run_probe(metric, &spec, &cfg).unwrap();
            let b = run_probe(metric, &spec, &cfg).unwrap();
            prop_assert_eq!(a.len(), t_len);
            let bits = |rows: &[splagger_core::probes::ProbeRow]| rows.iter().map(|r| r.value.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a), bits(&b));
        }
    }
}

#[test]
fn plan_blind_sees_only_the_goal_flag() {
    let cfg = EnvConfig::desk();
    let mut task = env_sample_task(EnvKind::PlanBlind, &cfg, 3, 0).unwrap();
    assert_eq!(task.obs_dim(), 1);
    assert_eq!(task.reset().len(), 1);
}
