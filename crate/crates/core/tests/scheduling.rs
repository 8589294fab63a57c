use std::sync::Arc;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use sensorsched::env::{EnvConfig, EnvParams, MdpState, SensorEnv};
use sensorsched::link_energy::LinkBudget;
use sensorsched::linmodel::{ProcessModel, SensorModel};
use sensorsched::scheduling::*;
use sensorsched::seeds::SimRng;

fn small_config(probs: &[f64], distances: &[f64], a_diag: f64, beta: f64, horizon: usize) -> Arc<EnvConfig> {
    let a = DMatrix::from_row_slice(2, 2, &[a_diag, 0.1, 0.0, a_diag * 0.8]);
    let q = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.1]);
    let model = ProcessModel::new(a, q).unwrap();
    let sensors = probs
        .iter()
        .zip(distances)
        .enumerate()
        .map(|(i, (&p, &d))| {
            let c = DMatrix::from_row_slice(1, 2, &[1.0, i as f64 * 0.7 - 0.3]);
            let r = DMatrix::from_element(1, 1, 0.1 + 0.2 * i as f64);
            SensorModel::new(i + 1, c, r, p, d).unwrap()
        })
        .collect();
    let params = EnvParams {
        horizon,
        beta,
        ..EnvParams::default()
    };
    Arc::new(EnvConfig::new(model, sensors, &LinkBudget::default(), params).unwrap())
}

#[test]
fn random_policy_with_one_sensor_is_a_fair_coin() {
    let mut p = RandomPolicy::new(3);
    let ones = (0..10_000).filter(|_| p.sample(1) == 1).count();
    assert!((4_800..=5_200).contains(&ones), "{ones}");
}

#[test]
fn random_policy_passes_chi_square() {
    let mut p = RandomPolicy::new(17);
    let mut counts = [0usize; 21];
    let n = 100_000;
    for _ in 0..n {
        counts[p.sample(20)] += 1;
    }
    let expected = n as f64 / 21.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99th percentile of χ² with 20 degrees of freedom.
    assert!(chi2 < 37.566, "chi2 = {chi2}");
}

#[test]
fn random_policy_replays_with_same_seed() {
    let mut a = RandomPolicy::new(5);
    let mut b = RandomPolicy::new(5);
    let xs: Vec<usize> = (0..200).map(|_| a.sample(20)).collect();
    let ys: Vec<usize> = (0..200).map(|_| b.sample(20)).collect();
    assert_eq!(xs, ys);
}

#[test]
fn greedy_prefers_cheaper_sensor_on_equal_gain() {
    assert_eq!(greedy_choice(&[Some(0.4), Some(0.4)], &[1e-6, 2e-6], 5.0, 0.1), 1);
    assert_eq!(greedy_choice(&[Some(0.4), Some(0.4)], &[3e-6, 2e-6], 5.0, 0.1), 2);
    assert_eq!(greedy_choice(&[None, None, None], &[1.0, 1.0, 1.0], 5.0, 0.1), 0);
    // Gain too small to pay for the normalized energy.
    assert_eq!(greedy_choice(&[Some(0.1)], &[1.0], 5.0, 0.1), 0);
}

proptest! {
    #[test]
    fn greedy_argmax_ignores_energy_scale(
        gains in prop::collection::vec(prop::option::of(0.0f64..3.0), 1..12),
        raw in prop::collection::vec(0.1f64..10.0, 12),
        scale in 1e-3f64..1e3,
        beta in 0.0f64..1.0,
    ) {
        let energies = &raw[..gains.len()];
        let scaled: Vec<f64> = energies.iter().map(|e| e * scale).collect();
        prop_assert_eq!(
            greedy_choice(&gains, energies, 2.0, beta),
            greedy_choice(&gains, &scaled, 2.0, beta)
        );
    }

    #[test]
    fn normalized_advantages_are_standardized(xs in prop::collection::vec(-1e3f64..1e3, 2..300)) {
        let mut a = xs.clone();
        normalize_advantages(&mut a);
        let (mean, std) = mean_std(&a);
        prop_assert!(mean.abs() < 1e-6);
        let spread = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - xs.iter().copied().fold(f64::INFINITY, f64::min);
        if spread > 1e-6 {
            prop_assert!((0.99..=1.01).contains(&std), "std {}", std);
        }
    }

    #[test]
    fn clipped_term_never_exceeds_unclipped(ratio in 0.0f64..5.0, adv in -5.0f64..5.0, clip in 0.01f64..0.5) {
        let (s, _) = clipped_surrogate(ratio, adv, clip);
        prop_assert!(s <= ratio * adv + 1e-15);
    }
}

/// With equal link costs the ζ rule and the best one-step reward coincide.
#[test]
fn greedy_matches_one_step_brute_force() {
    let cfg = small_config(&[0.9, 0.5, 0.3], &[150.0, 150.0, 150.0], 1.05, 0.1, 40);
    let script = [2usize, 0, 1, 3, 0, 0, 2, 1, 0, 3, 0, 0, 0, 1, 2, 0, 3, 0, 0, 2];
    let mut agreed = 0;
    for prefix in 0..script.len() {
        let fresh = || {
            let mut env = SensorEnv::new(Arc::clone(&cfg), 77).unwrap();
            for &a in &script[..prefix] {
                env.step(a).unwrap();
            }
            env
        };
        let rewards: Vec<f64> = (0..cfg.n_actions())
            .map(|a| fresh().observe_step().unwrap().act(a).unwrap().reward)
            .collect();
        let best = (0..rewards.len()).fold(0, |b, a| if rewards[a] > rewards[b] { a } else { b });
        let mut env = fresh();
        let pending = env.observe_step().unwrap();
        let obs: MdpState = pending.env().state();
        let choice = GreedyPolicy.choose(&obs, pending.env()).unwrap();
        assert_eq!(choice, best, "step {prefix}: rewards {rewards:?}");
        agreed += usize::from(choice != 0);
    }
    assert!(agreed > 3, "scenario should exercise non-idle choices");
}

#[test]
fn gae_single_step_and_td_collapse() {
    let (a, r) = compute_gae(&[2.5], &[0.0], &[true], 0.0, 0.9, 0.95);
    assert_eq!(a, vec![2.5]);
    assert_eq!(r, vec![2.5]);

    let rewards = [0.3, -1.2, 0.8, 0.1];
    let values = [0.5, -0.4, 0.9, 0.2];
    let dones = [false, false, true, false];
    let last = 0.7;
    let (a, ret) = compute_gae(&rewards, &values, &dones, last, 0.9, 0.0);
    let next = [values[1], values[2], values[3], last];
    for t in 0..4 {
        let live = if dones[t] { 0.0 } else { 1.0 };
        assert_eq!(a[t], rewards[t] + 0.9 * next[t] * live - values[t]);
        assert_eq!(ret[t], a[t] + values[t]);
    }
}

#[test]
fn gae_matches_hand_unrolled_sum() {
    let (gamma, lambda) = (0.9, 0.95);
    let (a, _) = compute_gae(&[1.0, 1.0, 1.0], &[0.5, 0.5, 0.5], &[false; 3], 0.0, gamma, lambda);
    let v = [0.5, 0.5, 0.5, 0.0];
    let td: Vec<f64> = (0..3).map(|t| 1.0 + gamma * v[t + 1] - v[t]).collect();
    for t in 0..3 {
        let brute: f64 = (t..3).map(|l| (gamma * lambda).powi((l - t) as i32) * td[l]).sum();
        assert!((a[t] - brute).abs() < 1e-14);
    }
    assert!((a[0] - 2.1277625).abs() < 1e-12);
}

#[test]
fn balanced_partition_covers_every_sample() {
    let parts = balanced_partition(3072, 28);
    assert_eq!(parts.len(), 28);
    assert_eq!(parts.iter().map(|r| r.len()).sum::<usize>(), 3072);
    assert_eq!(parts.iter().filter(|r| r.len() == 110).count(), 20);
    assert_eq!(parts.iter().filter(|r| r.len() == 109).count(), 8);
    assert!(parts.windows(2).all(|w| w[0].end == w[1].start));
}

fn minibatch_for(net: &ActorCritic, cfg: &EnvConfig, n: usize, seed: u64, jitter: f64) -> Minibatch {
    use rand::Rng;
    let mut rng = SimRng::seed_from_u64(seed);
    let features = DMatrix::from_fn(n, cfg.obs_dim(), |_, _| rng.random_range(-1.0..1.0));
    let logits = net.actor.predict_batch(&features).unwrap();
    let mut actions = Vec::new();
    let mut old = Vec::new();
    for i in 0..n {
        let row: Vec<f64> = logits.row(i).iter().copied().collect();
        let lp = log_softmax(&row);
        let a = rng.random_range(0..cfg.n_actions());
        actions.push(a);
        old.push(lp[a] + jitter * rng.random_range(-1.0..1.0));
    }
    let mut advantages: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    normalize_advantages(&mut advantages);
    Minibatch {
        features,
        actions,
        old_log_probs: old,
        advantages,
        returns: (0..n).map(|_| rng.random_range(-3.0..0.0)).collect(),
    }
}

#[test]
fn unit_ratio_surrogate_is_negative_mean_advantage() {
    let cfg = small_config(&[0.5; 20], &[200.0; 20], 0.9, 0.1, 10);
    let ppo = PpoConfig::default();
    let net = ActorCritic::new(&cfg, &[16, 8], &mut SimRng::seed_from_u64(1)).unwrap();
    let mb = minibatch_for(&net, &cfg, 40, 2, 0.0);
    let (stats, _, _) = ppo_loss(&net, &mb, &ppo).unwrap();
    let mean_adv = mb.advantages.iter().sum::<f64>() / 40.0;
    assert!((stats.policy + mean_adv).abs() < 1e-15);
    assert_eq!(stats.clip_frac, 0.0);

    let (s, active) = clipped_surrogate(1.5, 1.0, 0.18);
    assert_eq!(s, 1.18);
    assert!(!active);
}

#[test]
fn uniform_policy_has_maximum_entropy() {
    let cfg = small_config(&[0.5; 20], &[200.0; 20], 0.9, 0.1, 10);
    let mut net = ActorCritic::new(&cfg, &[16, 8], &mut SimRng::seed_from_u64(1)).unwrap();
    let last = net.actor.n_layers() - 1;
    net.actor.weight_mut(last).fill(0.0);
    net.actor.bias_mut(last).fill(0.0);
    let mb = minibatch_for(&net, &cfg, 10, 3, 0.0);
    let (stats, _, _) = ppo_loss(&net, &mb, &PpoConfig::default()).unwrap();
    assert!((stats.entropy - 21f64.ln()).abs() < 1e-9);
    assert!((21f64.ln() - 3.0445).abs() < 1e-4);
}

#[test]
fn ppo_loss_gradient_matches_finite_differences() {
    let cfg = small_config(&[0.5; 4], &[200.0; 4], 0.9, 0.1, 10);
    let ppo = PpoConfig::default();
    let mut net = ActorCritic::new(&cfg, &[6, 5], &mut SimRng::seed_from_u64(4)).unwrap();
    let mb = minibatch_for(&net, &cfg, 12, 5, 0.1);
    let (_, ga, gc) = ppo_loss(&net, &mb, &ppo).unwrap();
    let h = 1e-6;
    for (which, analytic) in [(0, ga.flat()), (1, gc.flat())] {
        let base = if which == 0 { net.actor.params_flat() } else { net.critic.params_flat() };
        for i in 0..base.len() {
            let mut eval = |delta: f64| {
                let mut p = base.clone();
                p[i] += delta;
                if which == 0 {
                    net.actor.set_params_flat(&p).unwrap();
                } else {
                    net.critic.set_params_flat(&p).unwrap();
                }
                let total = ppo_loss(&net, &mb, &ppo).unwrap().0.total;
                if which == 0 {
                    net.actor.set_params_flat(&base).unwrap();
                } else {
                    net.critic.set_params_flat(&base).unwrap();
                }
                total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let g = analytic[i];
            assert!(
                (g - fd).abs() <= 1e-5 * g.abs().max(fd.abs()).max(1e-3),
                "net {which} param {i}: analytic {g} vs fd {fd}"
            );
        }
    }
}

#[test]
fn nan_ratio_aborts_update() {
    let cfg = small_config(&[0.5; 3], &[200.0; 3], 0.9, 0.1, 10);
    let net = ActorCritic::new(&cfg, &[4], &mut SimRng::seed_from_u64(1)).unwrap();
    let mut mb = minibatch_for(&net, &cfg, 5, 1, 0.0);
    mb.old_log_probs[2] = f64::NAN;
    assert!(matches!(
        ppo_loss(&net, &mb, &PpoConfig::default()),
        Err(sensorsched::Error::Training(_))
    ));
}

fn tiny_ppo() -> PpoConfig {
    PpoConfig {
        n_envs: 2,
        n_steps: 24,
        n_minibatches: 4,
        update_epochs: 3,
        total_steps: 96,
        hidden: vec![8, 8],
        ..PpoConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = small_config(&[0.6, 0.4, 0.8], &[120.0, 200.0, 280.0], 0.95, 0.1, 20);
    let ppo = PpoConfig { lr: 0.0, ..tiny_ppo() };
    let out = train(Arc::clone(&cfg), &ppo, 9).unwrap();
    let init = ActorCritic::new(&cfg, &ppo.hidden, &mut sensorsched::seeds::rng_for(9, "train/init")).unwrap();
    assert_eq!(out.policy, init);
    assert_eq!(out.curve.len(), 2);
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = small_config(&[0.6, 0.4, 0.8], &[120.0, 200.0, 280.0], 0.95, 0.1, 20);
    let a = train(Arc::clone(&cfg), &tiny_ppo(), 10).unwrap();
    let b = train(Arc::clone(&cfg), &tiny_ppo(), 10).unwrap();
    assert_eq!(a.policy, b.policy);
    assert_eq!(a.curve, b.curve);
    let c = train(Arc::clone(&cfg), &tiny_ppo(), 11).unwrap();
    assert_ne!(a.policy, c.policy);
}

#[test]
fn huge_entropy_bonus_keeps_policy_uniform() {
    let cfg = small_config(&[0.5; 20], &[200.0; 20], 0.95, 0.1, 20);
    let ppo = PpoConfig {
        entropy_coef: 1e3,
        lr: 1e-3,
        update_epochs: 8,
        ..tiny_ppo()
    };
    let out = train(Arc::clone(&cfg), &ppo, 12).unwrap();
    let entropy = out.curve.last().unwrap().entropy;
    assert!(entropy > 0.95 * 21f64.ln(), "entropy {entropy}");
}

#[test]
fn idle_objective_follows_lyapunov_oracle() {
    let cfg = small_config(&[0.5, 0.5], &[100.0, 300.0], 0.9, 0.1, 60);
    let summary = evaluate(&cfg, &PolicySpec::Idle, 5, 3).unwrap();
    let a = cfg.model.a();
    let mut p = DMatrix::<f64>::identity(2, 2);
    let mut total = 0.0;
    for _ in 0..60 {
        p = a * &p * a.transpose() + cfg.model.q();
        total += p.trace() / 2.0;
    }
    let expected = total / 60.0;
    assert!((summary.mean_objective - expected).abs() < 1e-12 * expected);
    assert_eq!(summary.std_objective, 0.0);
    assert_eq!(summary.mean_energy_total, 0.0);
}

#[test]
fn zero_beta_drops_the_energy_term() {
    let cfg = small_config(&[0.7, 0.3], &[100.0, 300.0], 1.02, 0.0, 30);
    let mut policy = RandomPolicy::new(0);
    let res = run_episode(&cfg, &mut policy, 44).unwrap();
    let trace_only: f64 = res.traces.iter().map(|t| t / 2.0).sum::<f64>() / 30.0;
    assert!((res.objective - trace_only).abs() < 1e-12);
    assert!(res.energy_total > 0.0);
}

#[test]
fn policies_share_episode_realizations() {
    let cfg = small_config(&[0.7, 0.3], &[100.0, 300.0], 1.02, 0.1, 30);
    let seed = eval_episode_seed(5, 0);
    let mut idle = IdlePolicy;
    let mut random = RandomPolicy::new(0);
    let mut env_a = SensorEnv::new(Arc::clone(&cfg), seed).unwrap();
    let mut env_b = SensorEnv::new(Arc::clone(&cfg), seed).unwrap();
    for _ in 0..30 {
        let obs = env_a.state();
        let pa = env_a.observe_step().unwrap();
        let a = idle.choose(&obs, pa.env()).unwrap();
        pa.act(a).unwrap();
        let obs = env_b.state();
        let pb = env_b.observe_step().unwrap();
        let b = random.choose(&obs, pb.env()).unwrap();
        pb.act(b).unwrap();
        assert_eq!(env_a.truth().state(), env_b.truth().state());
        assert_eq!(env_a.truth().latest_all(), env_b.truth().latest_all());
    }
    let s1 = evaluate(&cfg, &PolicySpec::Random, 8, 5).unwrap();
    let s2 = evaluate(&cfg, &PolicySpec::Random, 8, 5).unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn checkpoint_roundtrip_preserves_policy() {
    let cfg = small_config(&[0.6, 0.4], &[120.0, 200.0], 0.95, 0.1, 20);
    let net = ActorCritic::new(&cfg, &[8, 4], &mut SimRng::seed_from_u64(3)).unwrap();
    let mut buf = Vec::new();
    net.save(&mut buf, 31).unwrap();
    let (back, seed) = ActorCritic::load(&buf[..]).unwrap();
    assert_eq!(seed, 31);
    assert_eq!(back, net);
    let mut env = SensorEnv::new(Arc::clone(&cfg), 1).unwrap();
    let obs = env.state();
    let pending = env.observe_step().unwrap();
    let mut p = PpoPolicy::new(Arc::new(back));
    assert!(p.choose(&obs, pending.env()).unwrap() <= 2);
}
