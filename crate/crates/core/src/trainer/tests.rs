use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::aggregators::AggKind;
use crate::envs::{env_sample_task, EnvConfig, EnvKind};
use crate::gradcore::Tape;
use crate::seqmodel::{ParamStore, Variant};
use crate::tensor::Matrix;

fn small(kind: EnvKind, variant: Variant, agg: AggKind) -> TrainConfig {
    let mut model = ModelSection::new(variant, agg);
    model.embed = Some(if agg.splits_input() { 12 } else { 8 });
    model.hidden = Some(8);
    let mut cfg = TrainConfig::new(kind, model);
    cfg.env.corridor = 4;
    cfg.train.batch = 4;
    cfg.train.eval_tasks = 8;
    cfg
}

fn tasks(cfg: &TrainConfig, seed: u64, n: u64) -> Vec<crate::envs::TaskInstance> {
    (0..n)
        .map(|i| env_sample_task(cfg.env.kind, &cfg.env.cfg(), seed, i).unwrap())
        .collect()
}

/// Agent whose policy is exactly uniform: every parameter zero.
fn uniform_agent(cfg: &TrainConfig) -> Agent<f64> {
    let mut agent = init_agent::<f64>(cfg, 0).unwrap();
    agent.store.values_mut().iter_mut().for_each(|m| m.scale_assign(0.0));
    agent
}

#[test]
fn random_policy_terminal_reward() {
    let mut cfg = TrainConfig::new(EnvKind::Tls, ModelSection::new(Variant::Rnn, AggKind::Max));
    cfg.env.corridor = 10;
    let agent = uniform_agent(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut total, mut episodes) = (0.0, 0);
    for b in 0..25 {
        let mut ts: Vec<_> = (0..100)
            .map(|i| env_sample_task(EnvKind::Tls, &cfg.env.cfg(), 2, b * 100 + i).unwrap())
            .collect();
        let (batch, _) = collect_meta_episodes(&agent, &mut ts, &mut rng).unwrap();
        for (t, rews) in batch.rewards.iter().enumerate() {
            for (r, &rew) in rews.iter().enumerate() {
                if batch.episode_done[t][r] {
                    assert!(rew == 4.0 || rew == -3.0);
                    total += rew;
                    episodes += 1;
                } else {
                    assert_eq!(rew, 0.0);
                }
            }
        }
    }
    assert_eq!(episodes, 10_000);
    let m = total / episodes as f64;
    assert!((m - 0.5).abs() <= 0.05, "{m}");
}

#[test]
fn collect_structure_and_determinism() {
    let cfg = small(EnvKind::Tls, Variant::Splagger, AggKind::Max);
    let agent = init_agent::<f64>(&cfg, 3).unwrap();
    let run = || {
        let mut ts = tasks(&cfg, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        collect_meta_episodes(&agent, &mut ts, &mut rng).unwrap().0
    };
    let a = run();
    let dones: usize = a.meta_done.iter().flatten().filter(|&&d| d).count();
    assert_eq!(dones, 1);
    assert!(a.meta_done.last().unwrap()[0]);
    assert_eq!(a, run());
    assert_eq!(a.frames(), cfg.env.cfg().episode_len(EnvKind::Tls) as u64 * 4);
}

#[test]
fn returns_equal_env_rewards() {
    // replaying the recorded actions in a fresh copy of each task reproduces the returns
    let cfg = small(EnvKind::Mcls, Variant::Cnp, AggKind::Avg);
    let agent = init_agent::<f64>(&cfg, 6).unwrap();
    let mut ts = tasks(&cfg, 7, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (batch, _) = collect_meta_episodes(&agent, &mut ts, &mut rng).unwrap();
    for (r, ret) in batch.returns().into_iter().enumerate() {
        let mut task = env_sample_task(EnvKind::Mcls, &cfg.env.cfg(), 7, r as u64).unwrap();
        task.reset();
        let replay: f64 = batch
            .actions
            .iter()
            .map(|a| task.env_step(a[r]).unwrap().reward)
            .sum();
        assert_eq!(ret, replay);
    }
}

#[test]
fn advantage_examples() {
    let a = compute_advantages(&[vec![1.0]], &[vec![0.0]], &[vec![true]], 0.99, 0.95);
    assert_eq!(a.raw, vec![vec![1.0]]);
    assert_eq!(a.returns, vec![vec![1.0]]);

    let z = compute_advantages(&vec![vec![0.0; 3]; 4], &vec![vec![0.0; 3]; 4], &vec![vec![false; 3]; 4], 0.99, 0.95);
    assert!(z.raw.iter().flatten().all(|&x| x == 0.0));
    assert!(z.normalized.iter().flatten().all(|&x| x == 0.0));
}

#[test]
fn advantages_match_discounted_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (steps, rows, gamma, lambda) = (30, 4, 0.99, 0.95);
    for _ in 0..20 {
        let rewards: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..rows).map(|_| rng.gen_range(-3.0..4.0)).collect())
            .collect();
        let values: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..rows).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let mut done = vec![vec![false; rows]; steps];
        done[steps - 1] = vec![true; rows];
        let adv = compute_advantages(&rewards, &values, &done, gamma, lambda);
        for r in 0..rows {
            let v = |t: usize| if t < steps { values[t][r] } else { 0.0 };
            for t in 0..steps {
                let want: f64 = (t..steps)
                    .map(|k| {
                        let delta = rewards[k][r] + gamma * v(k + 1) - values[k][r];
                        (gamma * lambda).powi((k - t) as i32) * delta
                    })
                    .sum();
                assert!((adv.raw[t][r] - want).abs() <= 1e-9);
            }
        }
        let flat: Vec<f64> = adv.normalized.iter().flatten().copied().collect();
        let m = mean(&flat);
        let sd = (flat.iter().map(|x| (x - m).powi(2)).sum::<f64>() / flat.len() as f64).sqrt();
        assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-9);
    }
}

fn rollout(cfg: &TrainConfig, seed: u64) -> (Agent<f64>, RolloutBatch<f64>, RolloutGraph<f64>) {
    let agent = init_agent::<f64>(cfg, seed).unwrap();
    let mut ts = tasks(cfg, seed, cfg.train.batch as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, g) = collect_meta_episodes(&agent, &mut ts, &mut rng).unwrap();
    (agent, b, g)
}

fn f64_values(b: &RolloutBatch<f64>) -> Vec<Vec<f64>> {
    b.values.clone()
}

fn loss_cfg(clip: f64, entropy: f64) -> LossConfig {
    LossConfig {
        clip,
        value_coef: 0.0,
        entropy_coef: entropy,
        kl_weight: 0.0,
    }
}

#[test]
fn zero_advantage_leaves_only_entropy() {
    let cfg = small(EnvKind::Tls, Variant::Splagger, AggKind::Max);
    let (agent, batch, mut graph) = rollout(&cfg, 10);
    let mut adv = compute_advantages(&batch.rewards, &f64_values(&batch), &batch.meta_done, 0.99, 0.95);
    adv.normalized.iter_mut().flatten().for_each(|a| *a = 0.0);
    let nodes = build_loss(&mut graph, &batch, &adv, &loss_cfg(0.2, 0.0)).unwrap();
    let g = param_grads(&graph, &agent.store, nodes.policy).unwrap();
    assert!(g.iter().all(|m| m.max_abs() == 0.0));
    let g = param_grads(&graph, &agent.store, nodes.total).unwrap();
    assert!(g.iter().all(|m| m.max_abs() == 0.0));

    let (agent, batch, mut graph) = rollout(&cfg, 10);
    let nodes = build_loss(&mut graph, &batch, &adv, &loss_cfg(0.2, 0.01)).unwrap();
    let g = param_grads(&graph, &agent.store, nodes.total).unwrap();
    assert!(g.iter().any(|m| m.max_abs() > 0.0));
}

/// `-mean(A * log pi(a))` built directly from the recorded logits.
fn vanilla_pg(graph: &mut RolloutGraph<f64>, batch: &RolloutBatch<f64>, adv: &Advantages) -> crate::gradcore::NodeId {
    let tape: &mut Tape<f64> = &mut graph.tape;
    let mut acc = None;
    for t in 0..batch.steps() {
        let lsm = tape.log_softmax(graph.logits[t]).unwrap();
        let mut w = Matrix::zeros(batch.rows, tape.shape(lsm).1);
        for r in 0..batch.rows {
            w.set(r, batch.actions[t][r], adv.normalized[t][r]);
        }
        let w = tape.constant(w);
        let m = tape.mul(lsm, w).unwrap();
        let s = tape.sum(m).unwrap();
        acc = Some(match acc {
            Some(a) => tape.add(a, s).unwrap(),
            None => s,
        });
    }
    let n = (batch.rows * batch.steps()) as f64;
    tape.scale(acc.unwrap(), -1.0 / n).unwrap()
}

#[test]
fn unclipped_first_epoch_is_vanilla_policy_gradient() {
    for (variant, agg) in [(Variant::Splagger, AggKind::Max), (Variant::Rnn, AggKind::Max), (Variant::Pearl, AggKind::Pearl)] {
        let cfg = small(EnvKind::Tls, variant, agg);
        let (agent, batch, mut graph) = rollout(&cfg, 11);
        let adv = compute_advantages(&batch.rewards, &f64_values(&batch), &batch.meta_done, 0.99, 0.95);
        let nodes = build_loss(&mut graph, &batch, &adv, &loss_cfg(f64::INFINITY, 0.0)).unwrap();
        let pg = vanilla_pg(&mut graph, &batch, &adv);
        let a = param_grads(&graph, &agent.store, nodes.policy).unwrap();
        let b = param_grads(&graph, &agent.store, pg).unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>()).sum();
        let na: f64 = a.iter().map(|m| m.norm().powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|m| m.norm().powi(2)).sum::<f64>().sqrt();
        assert!(na > 0.0);
        assert!((dot / (na * nb) - 1.0).abs() < 1e-12, "{variant}");
        assert!((na - nb).abs() <= 1e-12 * nb);
    }
}

#[test]
fn loss_is_finite_on_random_batches() {
    let kinds = [
        (EnvKind::Tls, Variant::Splagger, AggKind::Softmax),
        (EnvKind::Mcls, Variant::Pearl, AggKind::Pearl),
        (EnvKind::Plan, Variant::Rnn, AggKind::Max),
        (EnvKind::TmazeLatent, Variant::SplaggerNornn, AggKind::WAvg),
    ];
    for i in 0..100u64 {
        let (kind, variant, agg) = kinds[i as usize % kinds.len()];
        let mut cfg = small(kind, variant, agg);
        cfg.env.plan_steps = 6;
        cfg.train.batch = 2;
        let (mut agent, batch, graph) = rollout(&cfg, 100 + i);
        let mut adam = Adam::new(1e-3, &agent.store);
        let mut ucfg = UpdateConfig::from_config(&cfg);
        ucfg.epochs = 2;
        let stats = ppo_update(&mut agent.store, &mut adam, &batch, graph, &ucfg, 0).unwrap();
        assert!(stats.total.is_finite() && stats.grad_norm.is_finite());
    }
}

#[test]
fn non_finite_loss_aborts() {
    let cfg = small(EnvKind::Tls, Variant::Splagger, AggKind::Max);
    let (mut agent, mut batch, graph) = rollout(&cfg, 12);
    batch.rewards[0][0] = f64::NAN;
    let mut adam = Adam::new(1e-3, &agent.store);
    let err = ppo_update(&mut agent.store, &mut adam, &batch, graph, &UpdateConfig::from_config(&cfg), 7);
    assert!(matches!(err, Err(crate::Error::NonFinite { update: 7, .. })));
}

#[test]
fn one_update_moves_the_sequence_model() {
    let cfg = small(EnvKind::Tls, Variant::Splagger, AggKind::Max);
    let (mut agent, batch, graph) = rollout(&cfg, 13);
    let before = agent.store.clone();
    let mut adam = Adam::new(1e-3, &agent.store);
    ppo_update(&mut agent.store, &mut adam, &batch, graph, &UpdateConfig::from_config(&cfg), 0).unwrap();
    let gru = agent.model.gru().unwrap();
    for id in [gru.wx, gru.uh] {
        assert_ne!(before.get(id), agent.store.get(id));
    }
}

#[test]
fn gradient_clipping() {
    let mut g = vec![Matrix::<f64>::from_vec(1, 2, vec![3.0, 4.0]).unwrap()];
    assert_eq!(clip_grad_norm(&mut g, 0.5), 5.0);
    assert!((g[0].norm() - 0.5).abs() < 1e-12);
    let mut small = vec![Matrix::<f64>::from_vec(1, 1, vec![0.1]).unwrap()];
    clip_grad_norm(&mut small, 0.5);
    assert_eq!(small[0].item(), 0.1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = ParamStore::<f64>::new();
    let id = store.push("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
    let mut adam = Adam::new(0.1, &store);
    adam.step(&mut store, &[Matrix::from_vec(1, 2, vec![2.0, -0.5]).unwrap()]);
    let w = store.get(id);
    assert!((w.get(0, 0) - 0.9).abs() < 1e-5 && (w.get(0, 1) + 0.9).abs() < 1e-5);
}

#[test]
fn bootstrap_examples() {
    let same = bootstrap_ci(&[2.5, 2.5, 2.5], BOOTSTRAP_ITERS, CI_LEVEL, 0).unwrap();
    assert_eq!((same.low, same.high), (2.5, 2.5));
    let one = bootstrap_ci(&[3.0], BOOTSTRAP_ITERS, CI_LEVEL, 0).unwrap();
    assert!(one.degenerate && one.low == 3.0 && one.high == 3.0);

    // two seeds {0, 10}: each resample mean is 0, 5 or 10 with weights 1:2:1
    let ci = bootstrap_ci(&[0.0, 10.0], BOOTSTRAP_ITERS, CI_LEVEL, 42).unwrap();
    assert_eq!(ci, bootstrap_ci(&[0.0, 10.0], BOOTSTRAP_ITERS, CI_LEVEL, 42).unwrap());
    assert_eq!((ci.low, ci.high), (0.0, 10.0));
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut means: Vec<f64> = (0..BOOTSTRAP_ITERS)
        .map(|_| (0..2).map(|_| [0.0, 10.0][rng.gen_range(0..2)]).sum::<f64>() / 2.0)
        .collect();
    means.sort_by(f64::total_cmp);
    assert_eq!(ci.low, percentile(&means, 0.16));
    assert_eq!(ci.high, percentile(&means, 0.84));

    assert_eq!((BOOTSTRAP_ITERS, CI_LEVEL), (1000, 0.68));
    assert!(bootstrap_ci(&[], 10, 0.68, 0).is_err());
}

#[test]
fn spearman_examples() {
    let x: Vec<f64> = (0..10).map(f64::from).collect();
    let up: Vec<f64> = x.iter().map(|v| v * v).collect();
    let down: Vec<f64> = x.iter().map(|v| -v.exp()).collect();
    assert!((spearman(&x, &up) - 1.0).abs() < 1e-12);
    assert!((spearman(&x, &down) + 1.0).abs() < 1e-12);
    assert_eq!(spearman(&x, &[1.0; 10]), 0.0);
}

#[test]
fn learning_rate_grid_and_ties() {
    assert_eq!(LR_GRID.len(), 5);
    assert_eq!(LR_GRID, [3e-3, 1e-3, 3e-4, 1e-4, 3e-5]);
    assert_eq!(best_lr(&[(3e-3, 1.0), (1e-3, 2.0), (3e-4, 2.0)]), Some(3e-4));
    assert_eq!(best_lr(&[(1e-4, 5.0), (3e-5, 5.0), (3e-3, 5.0)]), Some(3e-5));
    assert_eq!(best_lr(&[(1e-3, 1.0), (3e-4, 0.5)]), Some(1e-3));
}

#[test]
fn sweep_is_deterministic_and_tie_breaks_low() {
    let mut cfg = small(EnvKind::Tls, Variant::SplaggerNornn, AggKind::Max);
    cfg.train.frames = 0;
    cfg.train.seeds = vec![1, 2];
    // no training happens, so every rate scores the same
    let a = lr_sweep::<f64>(&cfg, &LR_GRID, 1).unwrap();
    assert_eq!(a.best_lr, 3e-5);
    assert_eq!(a.entries.len(), 5);
    cfg.train.frames = 200;
    let b = lr_sweep::<f64>(&cfg, &[1e-3, 1e-4], 2).unwrap();
    let c = lr_sweep::<f64>(&cfg, &[1e-3, 1e-4], 1).unwrap();
    assert_eq!(b.best_lr, c.best_lr);
    let scores = |s: &SweepResult<f64>| s.entries.iter().map(|e| e.score).collect::<Vec<_>>();
    assert_eq!(scores(&b), scores(&c));
}

#[test]
fn training_is_bitwise_deterministic() {
    let mut cfg = small(EnvKind::Tls, Variant::Splagger, AggKind::Avg);
    cfg.train.frames = 400;
    cfg.train.eval_every = 100;
    let run = || train::<f64>(&cfg, 4, |_, _| Ok(())).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.agent.store, b.agent.store);
    assert!(a.curve.len() >= 4);
    assert_ne!(a.agent.store, init_agent::<f64>(&cfg, 4).unwrap().store);
}

#[test]
fn zero_frames_is_one_evaluation() {
    let mut cfg = small(EnvKind::Mcls, Variant::Cnp, AggKind::Avg);
    cfg.train.frames = 0;
    let r = train::<f64>(&cfg, 1, |_, _| Ok(())).unwrap();
    assert_eq!(r.curve.len(), 1);
    assert_eq!(r.updates, 0);
    assert_eq!(r.curve[0].frames, 0);
}

#[test]
fn summaries_over_seeds() {
    let mut cfg = small(EnvKind::Tls, Variant::Cnp, AggKind::Avg);
    cfg.train.frames = 0;
    cfg.train.seeds = vec![1, 2, 3];
    let runs = train_seeds::<f64>(&cfg, 1).unwrap();
    let s = summarize(&runs).unwrap();
    assert_eq!(s.len(), 1);
    let want = mean(&runs.iter().map(|r| r.curve[0].eval_return_mean).collect::<Vec<_>>());
    assert!((s[0].mean - want).abs() < 1e-12);
    assert!(s[0].ci_low <= s[0].mean && s[0].mean <= s[0].ci_high);
}

#[test]
fn config_round_trip_and_validation() {
    let text = "[env]\nkind = \"tls\"\n\n[model]\nvariant = \"splagger\"\nagg = \"wsoftmax\"\n";
    let cfg = TrainConfig::from_toml(text).unwrap();
    assert_eq!(cfg.model.spec().embed, 52);
    assert_eq!(cfg.env.cfg(), EnvConfig::desk());
    let resolved = cfg.resolved();
    let back = TrainConfig::from_toml(&resolved.to_toml().unwrap()).unwrap();
    assert_eq!(back, resolved);
    assert_eq!(back.resolved(), resolved);

    let missing = TrainConfig::from_toml("[env]\nkind = \"tls\"\n[model]\nagg = \"max\"\n").unwrap_err();
    assert!(missing.to_string().contains("variant"), "{missing}");
    let bad = TrainConfig::from_toml("[env]\nkind = \"tls\"\n[model]\nvariant = \"rnn\"\n[train]\nlr = -1.0\n").unwrap_err();
    assert!(bad.to_string().contains("train.lr"), "{bad}");
    let st = TrainConfig::from_toml("[env]\nkind = \"tls\"\n[model]\nvariant = \"splagger\"\nst_gradient = true\n").unwrap_err();
    assert!(st.to_string().contains("model.st_gradient"), "{st}");
    let ent = TrainConfig::from_toml("[env]\nkind = \"plan\"\n[model]\nvariant = \"rnn\"\n[train]\nentropy = 0.01\n").unwrap_err();
    assert!(ent.to_string().contains("train.entropy"), "{ent}");

    let plan = TrainConfig::new(EnvKind::Plan, ModelSection::new(Variant::Rnn, AggKind::Max));
    assert_eq!(plan.entropy_coef(), 0.0);
    let tls = TrainConfig::new(EnvKind::Tls, ModelSection::new(Variant::Rnn, AggKind::Max));
    assert_eq!(tls.entropy_coef(), 0.01);
}

#[test]
fn return_scaler_matches_direct_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut scaler = ReturnScaler::new(0.9);
    assert_eq!(scaler.scale(), 1.0);
    let mut seen = Vec::new();
    for _ in 0..3 {
        let steps = 7;
        let rewards: Vec<Vec<f64>> = (0..steps).map(|_| (0..2).map(|_| rng.gen_range(-1.0..2.0)).collect()).collect();
        let done: Vec<Vec<bool>> = (0..steps).map(|t| vec![t == 3 || t == steps - 1, t == steps - 1]).collect();
        for r in 0..2 {
            let mut g = 0.0;
            for t in 0..steps {
                g = 0.9 * g + rewards[t][r];
                seen.push(g);
                if done[t][r] {
                    g = 0.0;
                }
            }
        }
        let got = scaler.observe(&rewards, &done);
        let m = seen.iter().sum::<f64>() / seen.len() as f64;
        let var = seen.iter().map(|g| (g - m).powi(2)).sum::<f64>() / seen.len() as f64;
        assert!((got - (var + 1e-8).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn reward_scale_divides_value_targets() {
    let cfg = small(EnvKind::Tls, Variant::Rnn, AggKind::Max);
    let agent = init_agent::<f64>(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ts = tasks(&cfg, 3, 4);
    let (batch, _) = collect_meta_episodes(&agent, &mut ts, &mut rng).unwrap();
    let zeros: Vec<Vec<f64>> = batch.values.iter().map(|v| vec![0.0; v.len()]).collect();
    let scaled: Vec<Vec<f64>> = batch.rewards.iter().map(|r| r.iter().map(|x| x / 4.0).collect()).collect();
    let a = compute_advantages(&batch.rewards, &zeros, &batch.meta_done, 0.99, 0.95);
    let b = compute_advantages(&scaled, &zeros, &batch.meta_done, 0.99, 0.95);
    for (x, y) in a.returns.iter().flatten().zip(b.returns.iter().flatten()) {
        assert!((x / 4.0 - y).abs() < 1e-12);
    }
}
