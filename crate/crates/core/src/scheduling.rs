//! Scheduling policies (idle, random, greedy information-per-joule, PPO),
//! the PPO trainer, and paired-seed evaluation.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, MdpState, SensorEnv};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nn::{read_checkpoint, write_checkpoint, Adam, Mlp};
use crate::seeds::{derive_seed, rng_for, SimRng};

/// A policy queried once per step, after the sensors have sampled and the
/// estimator has predicted. `obs` is the observation returned by the
/// previous step (or by reset).
pub trait Scheduler {
    fn name(&self) -> &str;
    /// Called at the start of every episode.
    fn reset(&mut self, _episode_seed: u64) {}
    fn choose(&mut self, obs: &MdpState, env: &SensorEnv) -> Result<usize>;
}

pub struct IdlePolicy;

impl Scheduler for IdlePolicy {
    fn name(&self) -> &str {
        "idle"
    }

    fn choose(&mut self, _obs: &MdpState, _env: &SensorEnv) -> Result<usize> {
        Ok(0)
    }
}

/// Uniform over `{0, …, M}`.
pub struct RandomPolicy {
    rng: SimRng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: rng_for(seed, "policy/random"),
        }
    }

    pub fn sample(&mut self, n_sensors: usize) -> usize {
        self.rng.random_range(0..=n_sensors)
    }
}

impl Scheduler for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn reset(&mut self, episode_seed: u64) {
        self.rng = rng_for(episode_seed, "policy/random");
    }

    fn choose(&mut self, _obs: &MdpState, env: &SensorEnv) -> Result<usize> {
        Ok(self.sample(env.config().n_sensors()))
    }
}

/// Hypothetical gain of every sensor holding a sample, from dry runs of the
/// delayed-fusion pipeline. Sensors without a sample map to `None`.
pub fn hypothetical_gains(env: &SensorEnv) -> Result<Vec<Option<f64>>> {
    let cfg = env.config();
    let prior_trace = env.buffer().current_prior().trace();
    cfg.sensors
        .iter()
        .map(|s| match env.pending_measurement(s.id()) {
            None => Ok(None),
            Some(meas) => match env.buffer().delayed_estimate(&meas, s, &cfg.model) {
                Ok(b) => Ok(Some(prior_trace - b.trace())),
                Err(Error::StaleMeasurement { .. }) => Ok(None),
                Err(e) => Err(e),
            },
        })
        .collect()
}

/// Benefit-to-cost rule: among sensors whose normalized gain beats their
/// normalized energy cost, pick the largest `Δ_i / E_i`. Ties go to the lower
/// id; returns 0 when no sensor improves the one-step reward.
pub fn greedy_choice(gains: &[Option<f64>], energies: &[f64], trace_p0: f64, beta: f64) -> usize {
    let max_e = energies.iter().copied().fold(0.0, f64::max);
    let mut best = 0;
    let mut best_zeta = f64::NEG_INFINITY;
    for (i, (gain, &e)) in gains.iter().zip(energies).enumerate() {
        let Some(delta) = *gain else { continue };
        if delta / trace_p0 <= beta * e / max_e {
            continue;
        }
        let zeta = delta / e;
        if zeta > best_zeta {
            best_zeta = zeta;
            best = i + 1;
        }
    }
    best
}

/// Greedy ζ baseline. It reads the hidden sample ages and runs hypothetical
/// fusions, so it has more information than the learned policy.
pub struct GreedyPolicy;

impl Scheduler for GreedyPolicy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn choose(&mut self, _obs: &MdpState, env: &SensorEnv) -> Result<usize> {
        let cfg = env.config();
        let gains = hypothetical_gains(env)?;
        Ok(greedy_choice(&gains, &cfg.energies.per_sensor, env.trace_p0(), cfg.params.beta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub lr: f64,
    pub gamma: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub n_envs: usize,
    pub n_steps: usize,
    pub n_minibatches: usize,
    pub update_epochs: usize,
    pub gae_lambda: f64,
    pub total_steps: usize,
    pub hidden: Vec<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 1.9e-4,
            gamma: 0.94,
            clip: 0.18,
            entropy_coef: 0.01,
            value_coef: 0.5,
            n_envs: 16,
            n_steps: 192,
            n_minibatches: 28,
            update_epochs: 108,
            gae_lambda: 0.98,
            total_steps: 200_000,
            hidden: vec![128, 64],
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if !(self.entropy_coef >= 0.0) || !(self.value_coef >= 0.0) {
            return bad("loss coefficients must be non-negative");
        }
        if self.n_envs == 0 || self.n_steps == 0 || self.update_epochs == 0 {
            return bad("n_envs, n_steps and update_epochs must be positive");
        }
        if self.n_minibatches == 0 || self.n_minibatches > self.batch_size() {
            return bad("n_minibatches must lie in 1..=n_envs*n_steps");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.n_envs * self.n_steps
    }

    pub fn iterations(&self) -> usize {
        self.total_steps.div_ceil(self.batch_size())
    }
}

/// Splits `n` items into `parts` contiguous chunks whose sizes differ by at
/// most one, larger chunks first.
pub fn balanced_partition(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let base = n / parts;
    let extra = n % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// GAE over one environment's trajectory. `last_value` bootstraps the step
/// after the final one; `dones[t]` cuts the bootstrap after step `t`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "misaligned GAE inputs");
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let td = rewards[t] + gamma * next_value * live - values[t];
        running = td + gamma * lambda * live * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts to mean 0 and scales to unit population std (skipped for a
/// near-constant slice).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
    adv.iter_mut().for_each(|a| *a = (*a - mean) * scale);
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn entropy(log_probs: &[f64]) -> f64 {
    -log_probs.iter().map(|lp| lp.exp() * lp).sum::<f64>()
}

/// Separate actor (logits over `0..=M`) and critic (scalar value) networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub actor: Mlp,
    pub critic: Mlp,
    n_sensors: usize,
    horizon: usize,
}

impl ActorCritic {
    pub fn new(cfg: &EnvConfig, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut sizes = vec![cfg.obs_dim()];
        sizes.extend_from_slice(hidden);
        let mut actor_sizes = sizes.clone();
        actor_sizes.push(cfg.n_actions());
        sizes.push(1);
        Ok(Self {
            actor: Mlp::new(&actor_sizes, rng)?,
            critic: Mlp::new(&sizes, rng)?,
            n_sensors: cfg.n_sensors(),
            horizon: cfg.params.horizon,
        })
    }

    /// Network input: log-variances as is, sensor ids scaled by `1/M` and
    /// delays by `1/T`.
    pub fn features(&self, obs: &MdpState) -> Vec<f64> {
        let mut v = obs.log_diag.clone();
        for &(id, delay) in &obs.history {
            v.push(id as f64 / self.n_sensors as f64);
            v.push(delay / self.horizon as f64);
        }
        v
    }

    fn check_env(&self, cfg: &EnvConfig) -> Result<()> {
        if cfg.obs_dim() != self.actor.input_dim()
            || cfg.n_actions() != self.actor.output_dim()
            || cfg.params.horizon != self.horizon
        {
            return Err(Error::Usage(
                "policy was trained for a different environment shape".into(),
            ));
        }
        Ok(())
    }

    pub fn log_probs(&self, obs: &MdpState) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.actor.forward(&self.features(obs))?))
    }

    pub fn value(&self, obs: &MdpState) -> Result<f64> {
        Ok(self.critic.forward(&self.features(obs))?[0])
    }

    /// Most probable action (lowest index on ties).
    pub fn mode(&self, obs: &MdpState) -> Result<usize> {
        let logits = self.actor.forward(&self.features(obs))?;
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn save<W: Write>(&self, out: W, seed: u64) -> Result<()> {
        let meta = serde_json::json!({ "n_sensors": self.n_sensors, "horizon": self.horizon });
        write_checkpoint(out, seed, &[("actor", &self.actor), ("critic", &self.critic)], meta)
    }

    pub fn load<R: BufRead>(input: R) -> Result<(Self, u64)> {
        let (header, nets) = read_checkpoint(input)?;
        let field = |k: &str| {
            header.meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Parse(format!("checkpoint metadata lacks `{k}`")))
        };
        let (n_sensors, horizon) = (field("n_sensors")?, field("horizon")?);
        let mut actor = None;
        let mut critic = None;
        for (name, net) in nets {
            match name.as_str() {
                "actor" => actor = Some(net),
                "critic" => critic = Some(net),
                other => return Err(Error::Parse(format!("unexpected network `{other}`"))),
            }
        }
        let (Some(actor), Some(critic)) = (actor, critic) else {
            return Err(Error::Parse("checkpoint needs an actor and a critic".into()));
        };
        if actor.output_dim() != n_sensors + 1 || critic.output_dim() != 1 || actor.input_dim() != critic.input_dim() {
            return Err(Error::Parse("checkpoint networks have inconsistent shapes".into()));
        }
        Ok((
            Self {
                actor,
                critic,
                n_sensors,
                horizon,
            },
            header.seed,
        ))
    }
}

/// Evaluates the learned policy greedily (most probable action).
pub struct PpoPolicy {
    net: Arc<ActorCritic>,
}

impl PpoPolicy {
    pub fn new(net: Arc<ActorCritic>) -> Self {
        Self { net }
    }
}

impl Scheduler for PpoPolicy {
    fn name(&self) -> &str {
        "ppo"
    }

    fn choose(&mut self, obs: &MdpState, env: &SensorEnv) -> Result<usize> {
        self.net.check_env(env.config())?;
        self.net.mode(obs)
    }
}

/// Flat rollout storage, indexed `env * n_steps + step`.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub features: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Minibatch view consumed by [`ppo_loss`].
pub struct Minibatch {
    pub features: Mat,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    /// Gathers `idx` from the batch and normalizes the advantages.
    pub fn gather(batch: &RolloutBatch, idx: &[usize]) -> Self {
        let dim = batch.features[0].len();
        let mut features = Mat::zeros(idx.len(), dim);
        for (r, &i) in idx.iter().enumerate() {
            for (c, v) in batch.features[i].iter().enumerate() {
                features[(r, c)] = *v;
            }
        }
        let mut advantages: Vec<f64> = idx.iter().map(|&i| batch.advantages[i]).collect();
        normalize_advantages(&mut advantages);
        Self {
            features,
            actions: idx.iter().map(|&i| batch.actions[i]).collect(),
            old_log_probs: idx.iter().map(|&i| batch.log_probs[i]).collect(),
            advantages,
            returns: idx.iter().map(|&i| batch.returns[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossStats {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
}

/// Per-sample clipped surrogate `min(ρA, clip(ρ, 1−ε, 1+ε)A)` and whether
/// the unclipped branch is active (the one carrying gradient).
pub fn clipped_surrogate(ratio: f64, adv: f64, clip: f64) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

/// `L = L_clip + c_v L_value − β_p H` with gradients for both networks.
pub fn ppo_loss(
    net: &ActorCritic,
    mb: &Minibatch,
    cfg: &PpoConfig,
) -> Result<(LossStats, crate::nn::Gradients, crate::nn::Gradients)> {
    let n = mb.actions.len();
    if n == 0 {
        return Err(Error::Usage("empty minibatch".into()));
    }
    let inv_n = 1.0 / n as f64;
    let (logits, mut actor_tape) = net.actor.forward_batch(&mb.features)?;
    let (values, mut critic_tape) = net.critic.forward_batch(&mb.features)?;
    let n_actions = logits.ncols();

    let mut d_logits = Mat::zeros(n, n_actions);
    let mut stats = LossStats::default();
    for i in 0..n {
        let row: Vec<f64> = logits.row(i).iter().copied().collect();
        let lp = log_softmax(&row);
        let a = mb.actions[i];
        let log_ratio = lp[a] - mb.old_log_probs[i];
        let ratio = log_ratio.exp();
        if !ratio.is_finite() {
            return Err(Error::Training(format!(
                "non-finite probability ratio (log-ratio {log_ratio}) in sample {i}"
            )));
        }
        let adv = mb.advantages[i];
        let (surr, active) = clipped_surrogate(ratio, adv, cfg.clip);
        stats.policy -= surr * inv_n;
        stats.approx_kl += ((ratio - 1.0) - log_ratio) * inv_n;
        if (ratio - 1.0).abs() > cfg.clip {
            stats.clip_frac += inv_n;
        }
        let h = entropy(&lp);
        stats.entropy += h * inv_n;
        // d(−surr)/d logp_a = −ρA on the active branch.
        let g_logp = if active { -ratio * adv * inv_n } else { 0.0 };
        for j in 0..n_actions {
            let p = lp[j].exp();
            let indicator = if j == a { 1.0 } else { 0.0 };
            // −β_p H contributes β_p p_j (log p_j + H) per sample.
            d_logits[(i, j)] = g_logp * (indicator - p) + cfg.entropy_coef * inv_n * p * (lp[j] + h);
        }
    }
    let mut d_values = Mat::zeros(n, 1);
    for i in 0..n {
        let err = values[(i, 0)] - mb.returns[i];
        stats.value += err * err * inv_n;
        d_values[(i, 0)] = cfg.value_coef * 2.0 * err * inv_n;
    }
    stats.total = stats.policy + cfg.value_coef * stats.value - cfg.entropy_coef * stats.entropy;
    if !stats.total.is_finite() {
        return Err(Error::Training(format!("non-finite loss {stats:?}")));
    }
    let g_actor = net.actor.backward(&mut actor_tape, &d_logits)?;
    let g_critic = net.critic.backward(&mut critic_tape, &d_values)?;
    Ok((stats, g_actor, g_critic))
}

/// One row per PPO iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub env_steps: usize,
    /// Mean undiscounted return of episodes finished during the rollout;
    /// `None` if none finished.
    pub mean_episode_reward: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
}

pub fn write_curve<W: Write>(rows: &[CurveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainOutput {
    pub policy: ActorCritic,
    pub curve: Vec<CurveRow>,
}

pub const DIVERGENCE_LIMIT: f64 = 1e6;

fn episode_seed(master: u64, scope: &str, env: usize, episode: usize) -> u64 {
    derive_seed(master, &format!("{scope}/env{env}/episode{episode}"))
}

/// PPO training. Rollouts use `n_envs` environments stepped in lockstep with
/// frozen parameters, auto-resetting at the horizon; each iteration then runs
/// `update_epochs` passes over a balanced partition into `n_minibatches`.
pub fn train(cfg: Arc<EnvConfig>, ppo: &PpoConfig, seed: u64) -> Result<TrainOutput> {
    ppo.validate()?;
    let mut init_rng = rng_for(seed, "train/init");
    let mut net = ActorCritic::new(&cfg, &ppo.hidden, &mut init_rng)?;
    let mut opt_actor = Adam::new(&net.actor);
    let mut opt_critic = Adam::new(&net.critic);
    let mut action_rng = rng_for(seed, "train/actions");
    let mut shuffle_rng = rng_for(seed, "train/shuffle");

    let mut episodes = vec![0usize; ppo.n_envs];
    let mut envs = (0..ppo.n_envs)
        .map(|e| SensorEnv::new(Arc::clone(&cfg), episode_seed(seed, "train", e, 0)))
        .collect::<Result<Vec<_>>>()?;
    let mut obs: Vec<MdpState> = envs.iter().map(|e| e.state()).collect();
    let mut ep_return = vec![0.0; ppo.n_envs];

    let mut curve = Vec::with_capacity(ppo.iterations());
    let mut env_steps = 0;
    for iteration in 0..ppo.iterations() {
        let mut per_env: Vec<RolloutBatch> = vec![RolloutBatch::default(); ppo.n_envs];
        let mut finished = Vec::new();
        for _ in 0..ppo.n_steps {
            let feats: Vec<Vec<f64>> = obs.iter().map(|o| net.features(o)).collect();
            let x = Mat::from_fn(ppo.n_envs, feats[0].len(), |r, c| feats[r][c]);
            let logits = net.actor.predict_batch(&x)?;
            let values = net.critic.predict_batch(&x)?;
            for e in 0..ppo.n_envs {
                let row: Vec<f64> = logits.row(e).iter().copied().collect();
                let lp = log_softmax(&row);
                let u: f64 = action_rng.random();
                let mut action = lp.len() - 1;
                let mut acc = 0.0;
                for (a, l) in lp.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        action = a;
                        break;
                    }
                }
                let out = envs[e].step(action)?;
                ep_return[e] += out.reward;
                let b = &mut per_env[e];
                b.features.push(feats[e].clone());
                b.actions.push(action);
                b.log_probs.push(lp[action]);
                b.rewards.push(out.reward);
                b.values.push(values[(e, 0)]);
                b.dones.push(out.done);
                if out.done {
                    finished.push(ep_return[e]);
                    ep_return[e] = 0.0;
                    episodes[e] += 1;
                    obs[e] = envs[e].reset(episode_seed(seed, "train", e, episodes[e]));
                } else {
                    obs[e] = out.next_state;
                }
            }
        }
        env_steps += ppo.batch_size();

        let mut batch = RolloutBatch::default();
        for (e, mut b) in per_env.into_iter().enumerate() {
            let last_value = net.value(&obs[e])?;
            let (adv, ret) = compute_gae(&b.rewards, &b.values, &b.dones, last_value, ppo.gamma, ppo.gae_lambda);
            b.advantages = adv;
            b.returns = ret;
            batch.features.append(&mut b.features);
            batch.actions.append(&mut b.actions);
            batch.log_probs.append(&mut b.log_probs);
            batch.rewards.append(&mut b.rewards);
            batch.values.append(&mut b.values);
            batch.dones.append(&mut b.dones);
            batch.advantages.append(&mut b.advantages);
            batch.returns.append(&mut b.returns);
        }
        let mean_abs_value = batch.values.iter().map(|v| v.abs()).sum::<f64>() / batch.len() as f64;
        if !(mean_abs_value <= DIVERGENCE_LIMIT) {
            return Err(Error::Training(format!(
                "value estimates diverged at iteration {iteration}: mean |V| = {mean_abs_value:e}"
            )));
        }

        let chunks = balanced_partition(batch.len(), ppo.n_minibatches);
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut last = LossStats::default();
        for _ in 0..ppo.update_epochs {
            order.shuffle(&mut shuffle_rng);
            let mut epoch = LossStats::default();
            for range in &chunks {
                let mb = Minibatch::gather(&batch, &order[range.clone()]);
                let (stats, g_actor, g_critic) = ppo_loss(&net, &mb, ppo)?;
                opt_actor.step(&mut net.actor, &g_actor, ppo.lr);
                opt_critic.step(&mut net.critic, &g_critic, ppo.lr);
                let w = 1.0 / chunks.len() as f64;
                epoch.total += stats.total * w;
                epoch.policy += stats.policy * w;
                epoch.value += stats.value * w;
                epoch.entropy += stats.entropy * w;
                epoch.approx_kl += stats.approx_kl * w;
                epoch.clip_frac += stats.clip_frac * w;
            }
            last = epoch;
        }
        let row = CurveRow {
            iteration,
            env_steps,
            mean_episode_reward: (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64),
            policy_loss: last.policy,
            value_loss: last.value,
            entropy: last.entropy,
            approx_kl: last.approx_kl,
            clip_frac: last.clip_frac,
        };
        log::info!(
            "iter {iteration}: steps {env_steps} return {} entropy {:.3} value_loss {:.4}",
            row.mean_episode_reward.map_or("-".to_string(), |r| format!("{r:.3}")),
            row.entropy,
            row.value_loss
        );
        curve.push(row);
    }
    Ok(TrainOutput { policy: net, curve })
}

/// Policies that can be evaluated side by side.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    Idle,
    Random,
    Greedy,
    Ppo(Arc<ActorCritic>),
}

impl PolicySpec {
    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::Idle => "idle",
            PolicySpec::Random => "random",
            PolicySpec::Greedy => "greedy",
            PolicySpec::Ppo(_) => "ppo",
        }
    }

    pub fn build(&self) -> Box<dyn Scheduler> {
        match self {
            PolicySpec::Idle => Box::new(IdlePolicy),
            PolicySpec::Random => Box::new(RandomPolicy::new(0)),
            PolicySpec::Greedy => Box::new(GreedyPolicy),
            PolicySpec::Ppo(net) => Box::new(PpoPolicy::new(Arc::clone(net))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    /// `(1/T) Σ_k [trace(P_k)/trace(P_0) + β ê_k]`.
    pub objective: f64,
    pub trace_final: f64,
    pub energy_total: f64,
    pub traces: Vec<f64>,
    pub energies: Vec<f64>,
    pub actions: Vec<usize>,
}

/// Seed of evaluation episode `i`; identical for every policy.
pub fn eval_episode_seed(master: u64, i: usize) -> u64 {
    derive_seed(master, &format!("eval/episode{i}"))
}

pub fn run_episode(cfg: &Arc<EnvConfig>, policy: &mut dyn Scheduler, episode_seed: u64) -> Result<EpisodeResult> {
    let mut env = SensorEnv::new(Arc::clone(cfg), episode_seed)?;
    policy.reset(episode_seed);
    let horizon = cfg.params.horizon;
    let mut obs = env.state();
    let mut res = EpisodeResult {
        objective: 0.0,
        trace_final: 0.0,
        energy_total: 0.0,
        traces: Vec::with_capacity(horizon),
        energies: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
    };
    let mut reward_sum = 0.0;
    while !env.is_done() {
        let pending = env.observe_step()?;
        let action = policy.choose(&obs, pending.env())?;
        let out = pending.act(action)?;
        reward_sum += out.reward;
        res.traces.push(out.info.trace_p);
        res.energies.push(out.info.energy);
        res.actions.push(action);
        res.energy_total += out.info.energy;
        obs = out.next_state;
    }
    res.objective = -reward_sum / horizon as f64;
    res.trace_final = *res.traces.last().expect("horizon ≥ 1");
    Ok(res)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub policy: String,
    pub n_runs: usize,
    pub seed: u64,
    pub mean_objective: f64,
    /// Population standard deviation over runs.
    pub std_objective: f64,
    pub mean_trace_final: f64,
    pub mean_energy_total: f64,
    pub step_trace: Vec<f64>,
    pub step_energy: Vec<f64>,
    pub objectives: Vec<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs `n_runs` episodes with paired seeds. Episodes run in parallel and
/// are reduced in index order, so results do not depend on thread count.
pub fn evaluate(cfg: &Arc<EnvConfig>, policy: &PolicySpec, n_runs: usize, seed: u64) -> Result<EvalSummary> {
    if n_runs == 0 {
        return Err(Error::Usage("evaluation needs at least one run".into()));
    }
    let results = (0..n_runs)
        .into_par_iter()
        .map(|i| run_episode(cfg, policy.build().as_mut(), eval_episode_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let objectives: Vec<f64> = results.iter().map(|r| r.objective).collect();
    let (mean_objective, std_objective) = mean_std(&objectives);
    let horizon = cfg.params.horizon;
    let n = n_runs as f64;
    let mut step_trace = vec![0.0; horizon];
    let mut step_energy = vec![0.0; horizon];
    for r in &results {
        for k in 0..horizon {
            step_trace[k] += r.traces[k] / n;
            step_energy[k] += r.energies[k] / n;
        }
    }
    Ok(EvalSummary {
        policy: policy.name().to_string(),
        n_runs,
        seed,
        mean_objective,
        std_objective,
        mean_trace_final: results.iter().map(|r| r.trace_final).sum::<f64>() / n,
        mean_energy_total: results.iter().map(|r| r.energy_total).sum::<f64>() / n,
        step_trace,
        step_energy,
        objectives,
    })
}

/// Per-step averages as `k,mean_trace_P,mean_energy`.
pub fn write_step_csv<W: Write>(summary: &EvalSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "mean_trace_P", "mean_energy"])?;
    for (k, (t, e)) in summary.step_trace.iter().zip(&summary.step_energy).enumerate() {
        w.write_record([(k + 1).to_string(), t.to_string(), e.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
