use super::*;
use crate::aggregators::AggKind;
use crate::seqmodel::Variant;
use crate::trainer::spearman;

fn spec(v: Variant, agg: AggKind) -> SequenceModelSpec {
    SequenceModelSpec::new(v, agg)
}

fn small(t_len: usize) -> ProbeConfig {
    ProbeConfig {
        t_len,
        ..ProbeConfig::default()
    }
}

fn spread(xs: &[f64]) -> f64 {
    let hi = xs.iter().cloned().fold(f64::MIN, f64::max);
    let lo = xs.iter().cloned().fold(f64::MAX, f64::min);
    hi - lo
}

#[test]
fn unit_variances_give_one_over_t() {
    let trace = pearl_variance_trace(&[1.0; 10]).unwrap();
    for (i, v) in trace.iter().enumerate() {
        assert_eq!(*v, 1.0 / (i + 1) as f64);
    }
    assert_eq!(trace[9], 0.1);
}

#[test]
fn constant_variance_scales() {
    let c = 2.5;
    let trace = pearl_variance_trace(&[c; 12]).unwrap();
    for (i, v) in trace.iter().enumerate() {
        assert!((v - c / (i + 1) as f64).abs() < 1e-14);
    }
}

#[test]
fn mixed_variances_match_aggregator_posterior() {
    let vars = [0.3, 4.0, 1.7, 0.05, 9.0, 2.2, 0.8];
    let a = pearl_variance_trace(&vars).unwrap();
    let b = pearl_variance_oracle(&vars).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(a.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn nonpositive_variance_is_rejected() {
    assert!(pearl_variance_trace(&[1.0, 0.0]).is_err());
    assert!(pearl_variance_trace(&[-1.0]).is_err());
}

#[test]
fn metric_names_round_trip() {
    for m in Metric::ALL {
        assert_eq!(m.name().parse::<Metric>().unwrap(), m);
    }
    assert!("snr".parse::<Metric>().is_err());
}

#[test]
fn st_max_initial_input_is_constant() {
    let rows = run_probe(Metric::InitInput, &spec(Variant::Amrl, AggKind::Max), &small(30)).unwrap();
    for seed in [0, 1, 2] {
        let s: Vec<f64> = rows.iter().filter(|r| r.seed == seed).map(|r| r.value).collect();
        assert_eq!(s.len(), 30);
        assert!(s[0] > 0.0);
        assert!(spread(&s) < 1e-12, "spread {}", spread(&s));
    }
}

#[test]
fn sum_without_rnn_is_constant_both_ways() {
    let sp = spec(Variant::SplaggerNornn, AggKind::Sum);
    for metric in [Metric::InitInput, Metric::AllInputs] {
        let rows = run_probe(metric, &sp, &small(25)).unwrap();
        let s: Vec<f64> = rows.iter().filter(|r| r.seed == 1).map(|r| r.value).collect();
        assert!(spread(&s) < 1e-12, "{metric}: spread {}", spread(&s));
    }
}

#[test]
fn rnn_all_inputs_matches_finite_differences() {
    let probe = Probe::new(spec(Variant::Rnn, AggKind::Max).with_hidden(8), 3, 4).unwrap();
    let xs = uniform_inputs(6, 3, 4);
    let norms = grad_wrt_all_inputs(&probe, &xs).unwrap();

    let last = |xs: &[Vec<f64>]| -> Vec<f64> {
        let u = unroll(&probe, xs).unwrap();
        u.tape.value(u.outs.last().unwrap().f).data().to_vec()
    };
    let h = 1e-6;
    for t in 0..xs.len() {
        let mut sq = 0.0;
        for c in 0..3 {
            let mut up = xs.clone();
            up[t][c] += h;
            let mut dn = xs.clone();
            dn[t][c] -= h;
            let (a, b) = (last(&up), last(&dn));
            sq += a.iter().zip(&b).map(|(p, q)| ((p - q) / (2.0 * h)).powi(2)).sum::<f64>();
        }
        assert!((sq.sqrt() - norms[t]).abs() < 1e-6 * (1.0 + norms[t]), "t={t}");
    }
}

#[test]
fn params_probe_matches_finite_differences() {
    let probe = Probe::new(spec(Variant::SplaggerNornn, AggKind::Avg).with_embed(6), 2, 9).unwrap();
    let xs = replicated_inputs(4, 2, 9);
    let norms = grad_wrt_params(&probe, &xs).unwrap();
    let h = 1e-6;
    for t in 0..xs.len() {
        let mut sq = 0.0;
        for p in probe.store.ids() {
            for k in 0..probe.store.get(p).len() {
                let eval = |d: f64| {
                    let mut store = probe.store.clone();
                    store.get_mut(p).data_mut()[k] += d;
                    let q = Probe {
                        model: probe.model.clone(),
                        store,
                    };
                    let u = unroll(&q, &xs).unwrap();
                    u.tape.value(u.outs[t].f).data().to_vec()
                };
                let (a, b) = (eval(h), eval(-h));
                sq += a.iter().zip(&b).map(|(x, y)| ((x - y) / (2.0 * h)).powi(2)).sum::<f64>();
            }
        }
        assert!((sq.sqrt() - norms[t]).abs() < 1e-6 * (1.0 + norms[t]), "t={t}");
    }
}

#[test]
fn nornn_is_permutation_invariant() {
    for agg in [AggKind::Max, AggKind::Avg, AggKind::Sum, AggKind::Softmax] {
        let probe = Probe::new(spec(Variant::SplaggerNornn, agg), DEFAULT_IN_DIM, 0).unwrap();
        let xs = uniform_inputs(40, DEFAULT_IN_DIM, 0);
        assert!(permutation_difference(&probe, &xs, 10, 0).unwrap() <= 1e-6);
    }
}

#[test]
fn rnn_is_permutation_variant() {
    let probe = Probe::new(spec(Variant::Rnn, AggKind::Max), DEFAULT_IN_DIM, 0).unwrap();
    let xs = uniform_inputs(40, DEFAULT_IN_DIM, 0);
    assert!(permutation_difference(&probe, &xs, 10, 0).unwrap() > 1e-3);
}

#[test]
fn probes_are_deterministic_with_length_t() {
    let sp = spec(Variant::Splagger, AggKind::Max);
    for metric in [Metric::InitInput, Metric::Params, Metric::AllInputs] {
        let a = run_probe(metric, &sp, &small(12)).unwrap();
        let b = run_probe(metric, &sp, &small(12)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12 * 3);
        assert!(a.iter().all(|r| r.model == "splagger-max" && (1..=12).contains(&r.t)));
    }
    let p = run_probe(Metric::PermDiff, &sp, &small(12)).unwrap();
    assert_eq!(p.len(), 3);
}

#[test]
fn pearl_var_probe_ignores_model() {
    let rows = run_probe(Metric::PearlVar, &spec(Variant::Rnn, AggKind::Max), &small(10)).unwrap();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[9].value, 0.1);
    assert_eq!(rows[9].model, "pearl");
}

#[test]
fn rnn_initial_input_decays() {
    let rows = run_probe(Metric::InitInput, &spec(Variant::Rnn, AggKind::Max), &small(40)).unwrap();
    let s = mean_series(&rows);
    let t: Vec<f64> = (1..=s.len()).map(|i| i as f64).collect();
    assert!(spearman(&t, &s) < -0.9);
}

#[test]
fn zero_length_is_rejected() {
    assert!(run_probe(Metric::Params, &spec(Variant::Rnn, AggKind::Max), &small(0)).is_err());
}
