//! Deterministic actors with a centralized critic per agent.
//!
//! Every agent `i` owns an actor `μ_i(s_i, g_i)` and a critic
//! `Q_i(s_1..s_N, a_1..a_N, g_1..g_N)`, plus Polyak-averaged target copies.
//! With a single agent the critic input collapses to `[s, a, g]` and the
//! update rules are plain DDPG.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::env::Vec2;
use crate::error::{Error, Result};
use crate::net::{
    self, polyak_average, Activation, AdamConfig, AdamState, Gradients, Matrix, MlpParams,
    OutputActivation,
};
use crate::replay::Minibatch;

pub const STATE_DIM: usize = 2;
pub const GOAL_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Fraction of the target kept on every soft update.
    pub polyak: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub action_l2: f64,
    pub noise_std: f64,
    pub random_action_prob: f64,
    pub max_action: f64,
    pub norm_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.98,
            polyak: 0.95,
            actor_lr: 4e-4,
            critic_lr: 4e-4,
            action_l2: 0.01,
            noise_std: 0.2,
            random_action_prob: 0.3,
            max_action: 1.0,
            norm_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..1.0).contains(&self.gamma) {
            problems.push(format!("gamma {} not in [0, 1)", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.polyak) {
            problems.push(format!("polyak {} not in [0, 1]", self.polyak));
        }
        if !(0.0..=1.0).contains(&self.random_action_prob) {
            problems.push(format!(
                "random_action_prob {} not in [0, 1]",
                self.random_action_prob
            ));
        }
        for (name, v) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("max_action", self.max_action),
            ("norm_clip", self.norm_clip),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("action_l2", self.action_l2), ("noise_std", self.noise_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be non-negative, got {v}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Running mean/std estimate, applied as `clip((x - mean) / std)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    sum: [f64; 2],
    sumsq: [f64; 2],
    count: f64,
    pub mean: [f64; 2],
    pub std: [f64; 2],
    pub clip: f64,
    pub min_std: f64,
}

impl Normalizer {
    pub fn new(clip: f64) -> Self {
        Self {
            sum: [0.0; 2],
            sumsq: [0.0; 2],
            count: 0.0,
            mean: [0.0; 2],
            std: [1.0; 2],
            clip,
            min_std: 0.01,
        }
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    /// Accumulates samples; statistics refresh on `recompute`.
    pub fn observe(&mut self, p: Vec2) {
        for (k, v) in p.to_array().into_iter().enumerate() {
            self.sum[k] += v;
            self.sumsq[k] += v * v;
        }
        self.count += 1.0;
    }

    pub fn recompute(&mut self) {
        if self.count == 0.0 {
            return;
        }
        for k in 0..2 {
            let mean = self.sum[k] / self.count;
            let var = (self.sumsq[k] / self.count - mean * mean).max(0.0);
            self.mean[k] = mean;
            self.std[k] = var.sqrt().max(self.min_std);
        }
    }

    pub fn apply(&self, p: Vec2) -> [f64; 2] {
        let a = p.to_array();
        [
            ((a[0] - self.mean[0]) / self.std[0]).clamp(-self.clip, self.clip),
            ((a[1] - self.mean[1]) / self.std[1]).clamp(-self.clip, self.clip),
        ]
    }

    /// Replaces the statistics wholesale, e.g. when restoring a checkpoint.
    pub fn set_stats(&mut self, mean: [f64; 2], std: [f64; 2]) {
        self.mean = mean;
        self.std = std;
    }
}

/// An actor and its critic. Used both for the trained networks and for
/// their target copies.
#[derive(Debug, Clone, PartialEq)]
pub struct NetPair {
    pub actor: MlpParams,
    pub critic: MlpParams,
}

#[derive(Debug, Clone)]
pub struct AgentNets {
    pub main: NetPair,
    pub target: NetPair,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub obs_norm: Normalizer,
    pub goal_norm: Normalizer,
}

impl AgentNets {
    /// Fresh networks for one member of an `agents`-sized team. Targets start
    /// as exact copies.
    pub fn new<R: Rng + ?Sized>(
        agents: usize,
        hidden: &[usize],
        config: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut actor_dims = vec![STATE_DIM + GOAL_DIM];
        actor_dims.extend_from_slice(hidden);
        actor_dims.push(ACTION_DIM);
        let mut critic_dims = vec![agents * (STATE_DIM + ACTION_DIM + GOAL_DIM)];
        critic_dims.extend_from_slice(hidden);
        critic_dims.push(1);
        let actor = net::init_params(
            &actor_dims,
            Activation::Relu,
            OutputActivation::ScaledTanh(config.max_action),
            rng,
        )?;
        let critic = net::init_params(&critic_dims, Activation::Relu, OutputActivation::Linear, rng)?;
        Ok(Self::from_nets(actor, critic, config))
    }

    pub fn from_nets(actor: MlpParams, critic: MlpParams, config: &TrainConfig) -> Self {
        let main = NetPair { actor, critic };
        Self {
            actor_opt: AdamState::new(&main.actor, AdamConfig::with_lr(config.actor_lr)),
            critic_opt: AdamState::new(&main.critic, AdamConfig::with_lr(config.critic_lr)),
            target: main.clone(),
            main,
            obs_norm: Normalizer::new(config.norm_clip),
            goal_norm: Normalizer::new(config.norm_clip),
        }
    }

    /// Re-draws all parameters, copies them into the targets and zeroes the
    /// optimizer moments. Normalizer statistics are kept.
    pub fn reinitialize<R: Rng + ?Sized>(
        &mut self,
        agents: usize,
        hidden: &[usize],
        config: &TrainConfig,
        rng: &mut R,
    ) -> Result<()> {
        let fresh = Self::new(agents, hidden, config, rng)?;
        self.main = fresh.main;
        self.target = fresh.target;
        self.actor_opt.reset();
        self.critic_opt.reset();
        Ok(())
    }

    pub fn actor_input(&self, state: Vec2, goal: Vec2) -> [f64; 4] {
        let s = self.obs_norm.apply(state);
        let g = self.goal_norm.apply(goal);
        [s[0], s[1], g[0], g[1]]
    }

    pub fn is_finite(&self) -> bool {
        self.main.actor.is_finite()
            && self.main.critic.is_finite()
            && self.target.actor.is_finite()
            && self.target.critic.is_finite()
    }

    /// Concatenated snapshots of actor, critic, target actor, target critic,
    /// then one text line per normalizer.
    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<()> {
        for p in [
            &self.main.actor,
            &self.main.critic,
            &self.target.actor,
            &self.target.critic,
        ] {
            net::write_snapshot(p, out)?;
        }
        for n in [&self.obs_norm, &self.goal_norm] {
            writeln!(
                out,
                "norm {:?} {:?} {:?} {:?}",
                n.mean[0], n.mean[1], n.std[0], n.std[1]
            )?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: &mut R, config: &TrainConfig) -> Result<Self> {
        let actor = net::read_snapshot(input)?;
        let critic = net::read_snapshot(input)?;
        let target_actor = net::read_snapshot(input)?;
        let target_critic = net::read_snapshot(input)?;
        let mut nets = Self::from_nets(actor, critic, config);
        nets.target = NetPair {
            actor: target_actor,
            critic: target_critic,
        };
        for norm in [&mut nets.obs_norm, &mut nets.goal_norm] {
            let mut line = String::new();
            input.read_line(&mut line)?;
            let v: Vec<f64> = line
                .split_whitespace()
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
                .collect::<Result<_>>()?;
            if v.len() != 4 || !line.starts_with("norm ") {
                return Err(Error::Parse(format!("bad normalizer line `{}`", line.trim())));
            }
            norm.set_stats([v[0], v[1]], [v[2], v[3]]);
        }
        Ok(nets)
    }
}

/// Policy action, optionally with Gaussian noise and random-action mixing,
/// clipped to the action box.
pub fn act<R: Rng + ?Sized>(
    nets: &AgentNets,
    state: Vec2,
    goal: Vec2,
    explore: bool,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<[f64; 2]> {
    let out = net::forward(&nets.main.actor, &nets.actor_input(state, goal))?;
    let max = config.max_action;
    let mut a = [out[0], out[1]];
    if explore {
        if config.noise_std > 0.0 {
            let noise = Normal::new(0.0, config.noise_std * max)
                .map_err(|e| Error::Config(e.to_string()))?;
            for v in a.iter_mut() {
                *v += noise.sample(rng);
            }
        }
        for v in a.iter_mut() {
            *v = v.clamp(-max, max);
        }
        if rng.random::<f64>() < config.random_action_prob {
            a = [rng.random_range(-max..=max), rng.random_range(-max..=max)];
        }
    }
    for v in a.iter_mut() {
        *v = v.clamp(-max, max);
    }
    Ok(a)
}

/// Network-ready view of a relabelled minibatch.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    pub size: usize,
    /// Per agent `[norm(s), norm(g)]`, `m × 4`.
    pub actor_in: Vec<Matrix>,
    /// Per agent `[norm(s'), norm(g)]`, `m × 4`.
    pub next_actor_in: Vec<Matrix>,
    /// Per agent stored actions, `m × 2`.
    pub actions: Vec<Matrix>,
    pub rewards: Vec<Vec<f64>>,
}

impl BatchTensors {
    pub fn new(batch: &Minibatch, agents: &[AgentNets]) -> Result<Self> {
        if batch.agents() != agents.len() {
            return Err(Error::Shape(format!(
                "batch has {} streams for {} agents",
                batch.agents(),
                agents.len()
            )));
        }
        let m = batch.size();
        let mut out = Self {
            size: m,
            actor_in: Vec::new(),
            next_actor_in: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
        };
        for (stream, nets) in batch.streams.iter().zip(agents) {
            if stream.len() != m {
                return Err(Error::Shape("streams differ in length".into()));
            }
            let mut x = Vec::with_capacity(m * 4);
            let mut xn = Vec::with_capacity(m * 4);
            let mut acts = Vec::with_capacity(m * 2);
            for s in stream {
                let tr = &s.transition;
                x.extend_from_slice(&nets.actor_input(tr.state, tr.goal));
                xn.extend_from_slice(&nets.actor_input(tr.next_state, tr.goal));
                acts.extend_from_slice(&tr.action);
            }
            out.actor_in.push(Matrix::from_rows(m, 4, x)?);
            out.next_actor_in.push(Matrix::from_rows(m, 4, xn)?);
            out.actions.push(Matrix::from_rows(m, 2, acts)?);
            out.rewards
                .push(stream.iter().map(|s| s.transition.reward).collect());
        }
        Ok(out)
    }

    pub fn agents(&self) -> usize {
        self.actor_in.len()
    }
}

/// Column offset of agent `j`'s action inside the critic input.
pub fn action_offset(agents: usize, j: usize) -> usize {
    agents * STATE_DIM + j * ACTION_DIM
}

/// Builds the critic input `[s_1..s_N, a_1..a_N, g_1..g_N]` from per-agent
/// actor inputs (`[s, g]` rows) and per-agent actions.
pub fn critic_input(actor_in: &[Matrix], actions: &[&Matrix]) -> Matrix {
    let n = actor_in.len();
    let m = actor_in[0].rows;
    let width = n * (STATE_DIM + ACTION_DIM + GOAL_DIM);
    let mut out = Matrix::zeros(m, width);
    for r in 0..m {
        let row = out.row_mut(r);
        for j in 0..n {
            let x = actor_in[j].row(r);
            row[j * STATE_DIM..(j + 1) * STATE_DIM].copy_from_slice(&x[..STATE_DIM]);
            let ao = action_offset(n, j);
            row[ao..ao + ACTION_DIM].copy_from_slice(actions[j].row(r));
            let go = n * (STATE_DIM + ACTION_DIM) + j * GOAL_DIM;
            row[go..go + GOAL_DIM].copy_from_slice(&x[STATE_DIM..]);
        }
    }
    out
}

/// Bellman targets `y_i = r_i + γ Q'_i(s', μ'_1(s'_1, g_1), …, g)` for every
/// agent, computed from target networks only.
pub fn critic_targets(
    targets: &[&NetPair],
    batch: &BatchTensors,
    gamma: f64,
) -> Result<Vec<Vec<f64>>> {
    let next_actions = targets
        .iter()
        .zip(&batch.next_actor_in)
        .map(|(t, x)| t.actor.predict(x))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = next_actions.iter().collect();
    let input = critic_input(&batch.next_actor_in, &refs);
    targets
        .iter()
        .zip(&batch.rewards)
        .map(|(t, r)| {
            let q = t.critic.predict(&input)?;
            Ok(r.iter().zip(&q.data).map(|(r, q)| r + gamma * q).collect())
        })
        .collect()
}

/// Gradient of `mean (Q(s, a, g) − y)²` for one critic. Returns the loss too.
pub fn critic_gradients(
    critic: &MlpParams,
    batch: &BatchTensors,
    y: &[f64],
) -> Result<(Gradients, f64)> {
    let refs: Vec<&Matrix> = batch.actions.iter().collect();
    let input = critic_input(&batch.actor_in, &refs);
    let trace = critic.forward_batch(&input)?;
    let q = trace.output();
    let m = batch.size as f64;
    let mut loss = 0.0;
    let mut dq = Matrix::zeros(batch.size, 1);
    for (k, (&qv, &yv)) in q.data.iter().zip(y).enumerate() {
        let err = qv - yv;
        loss += err * err;
        dq.data[k] = 2.0 * err / m;
    }
    loss /= m;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("critic loss is {loss}")));
    }
    let (grads, _) = critic.backward_batch(&trace, &dq)?;
    Ok((grads, loss))
}

/// Gradient of `−mean Q_i(s, μ_i(s_i, g_i), a_{-i}, g) + λ mean ‖μ_i‖²` with
/// respect to agent `i`'s actor. Partner actions come from the batch.
pub fn actor_gradients(
    agent: usize,
    actor: &MlpParams,
    critic: &MlpParams,
    batch: &BatchTensors,
    action_l2: f64,
) -> Result<(Gradients, f64)> {
    let n = batch.agents();
    let actor_trace = actor.forward_batch(&batch.actor_in[agent])?;
    let own = actor_trace.output();
    let refs: Vec<&Matrix> = (0..n)
        .map(|j| if j == agent { own } else { &batch.actions[j] })
        .collect();
    let input = critic_input(&batch.actor_in, &refs);
    let critic_trace = critic.forward_batch(&input)?;
    let m = batch.size as f64;
    let q_mean = critic_trace.output().data.iter().sum::<f64>() / m;
    let sq = own.data.iter().map(|a| a * a).sum::<f64>() / m;
    let loss = -q_mean + action_l2 * sq;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("actor loss is {loss}")));
    }
    let dq = Matrix::from_rows(batch.size, 1, vec![-1.0 / m; batch.size])?;
    let (_, d_input) = critic.backward_batch(&critic_trace, &dq)?;
    let ao = action_offset(n, agent);
    let mut d_action = d_input.columns(ao, ACTION_DIM);
    for (d, a) in d_action.data.iter_mut().zip(&own.data) {
        *d += action_l2 * 2.0 * a / m;
    }
    let (grads, _) = actor.backward_batch(&actor_trace, &d_action)?;
    Ok((grads, loss))
}

/// Soft target update for both networks of one agent.
pub fn polyak_update(target: &mut NetPair, main: &NetPair, polyak: f64) -> Result<()> {
    polyak_average(&mut target.actor, &main.actor, polyak)?;
    polyak_average(&mut target.critic, &main.critic, polyak)
}

/// Losses observed during one agent's update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateLosses {
    pub critic: f64,
    pub actor: f64,
}

/// One critic step, one actor step and a soft target update for `agent`,
/// with gradients averaged over `batches` in order. `targets[k]` holds the
/// Bellman targets of `batches[k]` for this agent.
pub fn update_agent(
    agents: &mut [AgentNets],
    agent: usize,
    batches: &[&BatchTensors],
    targets: &[&[f64]],
    config: &TrainConfig,
) -> Result<UpdateLosses> {
    let nets = &agents[agent];
    let mut critic_parts = Vec::with_capacity(batches.len());
    let mut critic_loss = 0.0;
    for (b, y) in batches.iter().zip(targets) {
        let (g, l) = critic_gradients(&nets.main.critic, b, y)?;
        critic_parts.push(g);
        critic_loss += l;
    }
    let critic_grad = Gradients::average(&critic_parts)?;
    let nets = &mut agents[agent];
    nets.critic_opt.step(&mut nets.main.critic, &critic_grad)?;

    let mut actor_parts = Vec::with_capacity(batches.len());
    let mut actor_loss = 0.0;
    for b in batches {
        let (g, l) = actor_gradients(agent, &nets.main.actor, &nets.main.critic, b, config.action_l2)?;
        actor_parts.push(g);
        actor_loss += l;
    }
    let actor_grad = Gradients::average(&actor_parts)?;
    nets.actor_opt.step(&mut nets.main.actor, &actor_grad)?;
    polyak_update(&mut nets.target, &nets.main, config.polyak)?;
    if !nets.is_finite() {
        return Err(Error::Numeric(format!("agent {agent} parameters became non-finite")));
    }
    let k = batches.len() as f64;
    Ok(UpdateLosses {
        critic: critic_loss / k,
        actor: actor_loss / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::{Sample, Transition};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_batch(agents: usize, m: usize, seed: u64) -> Minibatch {
        let mut r = rng(seed);
        let mut v = || Vec2::new(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
        let streams = (0..agents)
            .map(|_| {
                (0..m)
                    .map(|k| {
                        let s = v();
                        let n = v();
                        let g = v();
                        let a = v();
                        Sample {
                            transition: Transition {
                                state: s,
                                action: [a.x / 3.0, a.y / 3.0],
                                goal: g,
                                reward: if k % 3 == 0 { 0.0 } else { -1.0 },
                                next_state: n,
                                achieved_next: n,
                            },
                            source: 0,
                            t: 0,
                            her_relabelled: false,
                            cer_changed: false,
                        }
                    })
                    .collect()
            })
            .collect();
        Minibatch {
            streams,
            sources: vec![],
            source_ids: vec![],
        }
    }

    fn team(agents: usize, seed: u64) -> Vec<AgentNets> {
        let mut r = rng(seed);
        (0..agents)
            .map(|_| AgentNets::new(agents, &[8, 8], &TrainConfig::default(), &mut r).unwrap())
            .collect()
    }

    fn zero(p: &mut MlpParams) {
        for v in p.values_mut() {
            *v = 0.0;
        }
    }

    #[test]
    fn deterministic_actions_repeat() {
        let t = team(1, 1);
        let cfg = TrainConfig::default();
        let s = Vec2::new(1.0, 2.0);
        let g = Vec2::new(3.0, -1.0);
        let a1 = act(&t[0], s, g, false, &cfg, &mut rng(0)).unwrap();
        let a2 = act(&t[0], s, g, false, &cfg, &mut rng(99)).unwrap();
        assert_eq!(a1, a2);
        let quiet = TrainConfig {
            noise_std: 0.0,
            random_action_prob: 0.0,
            ..cfg
        };
        assert_eq!(act(&t[0], s, g, true, &quiet, &mut rng(5)).unwrap(), a1);
    }

    #[test]
    fn exploratory_actions_stay_in_box() {
        let t = team(1, 2);
        let cfg = TrainConfig {
            noise_std: 1.0,
            ..TrainConfig::default()
        };
        let mut r = rng(3);
        for k in 0..2000 {
            let s = Vec2::new(k as f64 * 0.01, -(k as f64) * 0.02);
            let a = act(&t[0], s, Vec2::new(4.0, 4.0), true, &cfg, &mut r).unwrap();
            assert!(a.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn targets_reduce_to_rewards() {
        let mut t = team(2, 4);
        let batch = random_batch(2, 6, 7);
        let bt = BatchTensors::new(&batch, &t).unwrap();
        let pairs: Vec<&NetPair> = t.iter().map(|n| &n.target).collect();
        let y = critic_targets(&pairs, &bt, 0.0).unwrap();
        assert_eq!(y, bt.rewards);

        for n in t.iter_mut() {
            zero(&mut n.target.critic);
        }
        let pairs: Vec<&NetPair> = t.iter().map(|n| &n.target).collect();
        let y = critic_targets(&pairs, &bt, 0.98).unwrap();
        assert_eq!(y, bt.rewards);
    }

    #[test]
    fn targets_match_hand_chained_forward() {
        let t = team(2, 5);
        let batch = random_batch(2, 5, 8);
        let bt = BatchTensors::new(&batch, &t).unwrap();
        let pairs: Vec<&NetPair> = t.iter().map(|n| &n.target).collect();
        let y = critic_targets(&pairs, &bt, 0.9).unwrap();
        for k in 0..5 {
            let mut next_actions = Vec::new();
            for (j, n) in t.iter().enumerate() {
                let tr = &batch.streams[j][k].transition;
                let x = n.actor_input(tr.next_state, tr.goal);
                next_actions.push(net::forward(&n.target.actor, &x).unwrap());
            }
            let mut input = Vec::new();
            for (j, n) in t.iter().enumerate() {
                let tr = &batch.streams[j][k].transition;
                input.extend_from_slice(&n.obs_norm.apply(tr.next_state));
            }
            for a in &next_actions {
                input.extend_from_slice(a);
            }
            for (j, n) in t.iter().enumerate() {
                let tr = &batch.streams[j][k].transition;
                input.extend_from_slice(&n.goal_norm.apply(tr.goal));
            }
            for (i, n) in t.iter().enumerate() {
                let q = net::forward(&n.target.critic, &input).unwrap()[0];
                let want = batch.streams[i][k].transition.reward + 0.9 * q;
                assert!((y[i][k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn targets_never_touch_main_networks() {
        let mut t = team(2, 6);
        let batch = random_batch(2, 4, 9);
        let bt = BatchTensors::new(&batch, &t).unwrap();
        let pairs: Vec<&NetPair> = t.iter().map(|n| &n.target).collect();
        let before = critic_targets(&pairs, &bt, 0.98).unwrap();
        for n in t.iter_mut() {
            for v in n.main.actor.values_mut().chain(n.main.critic.values_mut()) {
                *v = f64::NAN;
            }
        }
        let pairs: Vec<&NetPair> = t.iter().map(|n| &n.target).collect();
        assert_eq!(critic_targets(&pairs, &bt, 0.98).unwrap(), before);
    }

    #[test]
    fn critic_at_fixed_point_has_zero_gradient() {
        let t = team(2, 10);
        let batch = random_batch(2, 8, 11);
        let bt = BatchTensors::new(&batch, &t).unwrap();
        let refs: Vec<&Matrix> = bt.actions.iter().collect();
        let q = t[0]
            .main
            .critic
            .predict(&critic_input(&bt.actor_in, &refs))
            .unwrap();
        let (g, loss) = critic_gradients(&t[0].main.critic, &bt, &q.data).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.values().all(|v| v == 0.0));
    }

    #[test]
    fn action_penalty_pulls_actions_to_zero() {
        let mut t = team(1, 12);
        zero(&mut t[0].main.critic);
        // single linear actor 4 -> 2 so the sign check is unambiguous
        let mut r = rng(13);
        let actor = net::init_params(&[4, 2], Activation::Relu, OutputActivation::ScaledTanh(1.0), &mut r)
            .unwrap();
        t[0].main.actor = actor.clone();
        let batch = random_batch(1, 16, 14);
        let bt = BatchTensors::new(&batch, &t).unwrap();
        let (g, _) = actor_gradients(0, &actor, &t[0].main.critic, &bt, 1.0).unwrap();
        // stepping against the gradient shrinks the mean squared action
        let mut stepped = actor.clone();
        for (p, gv) in stepped.values_mut().zip(g.values()) {
            *p -= 1e-3 * gv;
        }
        let msq = |p: &MlpParams| {
            let out = p.predict(&bt.actor_in[0]).unwrap();
            out.data.iter().map(|a| a * a).sum::<f64>()
        };
        assert!(msq(&stepped) < msq(&actor));
        // the bias gradient has the sign of the mean action
        let out = actor.predict(&bt.actor_in[0]).unwrap();
        for k in 0..2 {
            let mean_a: f64 = (0..16).map(|r| out.row(r)[k]).sum::<f64>();
            assert_eq!(g.layers[0].bias[k].signum(), mean_a.signum());
        }
    }

    #[test]
    fn actor_update_reads_partner_actions_from_batch() {
        let mut t = team(2, 15);
        let batch = random_batch(2, 6, 16);
        let bt = BatchTensors::new(&batch, &t).unwrap();
        let before = actor_gradients(0, &t[0].main.actor, &t[0].main.critic, &bt, 0.01).unwrap();
        // poison every network the actor step must not consult
        let (first, second) = t.split_at_mut(1);
        for v in second[0]
            .main
            .actor
            .values_mut()
            .chain(second[0].target.actor.values_mut())
            .chain(first[0].target.critic.values_mut())
        {
            *v = f64::NAN;
        }
        let after = actor_gradients(0, &t[0].main.actor, &t[0].main.critic, &bt, 0.01).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn polyak_contracts_toward_main() {
        let mut t = team(1, 17);
        let mut r = rng(18);
        let other = AgentNets::new(1, &[8, 8], &TrainConfig::default(), &mut r).unwrap();
        t[0].main = other.main.clone();
        let gap = |a: &NetPair, b: &NetPair| {
            a.actor
                .values()
                .zip(b.actor.values())
                .chain(a.critic.values().zip(b.critic.values()))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        let before = gap(&t[0].target, &t[0].main);
        let main = t[0].main.clone();
        polyak_update(&mut t[0].target, &main, 0.95).unwrap();
        let after = gap(&t[0].target, &t[0].main);
        assert!((after - 0.95 * before).abs() <= 1e-12 * before);
    }

    #[test]
    fn polyak_rejects_shape_mismatch() {
        let mut a = team(1, 1).remove(0).target;
        let b = team(2, 1).remove(0).main;
        assert!(polyak_update(&mut a, &b, 0.5).is_err());
    }

    #[test]
    fn update_keeps_parameters_finite() {
        let mut t = team(2, 19);
        let cfg = TrainConfig::default();
        for seed in 0..5 {
            let batch = random_batch(2, 8, 100 + seed);
            let bt = BatchTensors::new(&batch, &t).unwrap();
            let pairs: Vec<&NetPair> = t.iter().map(|n| &n.target).collect();
            let y = critic_targets(&pairs, &bt, cfg.gamma).unwrap();
            for i in 0..2 {
                update_agent(&mut t, i, &[&bt], &[&y[i]], &cfg).unwrap();
            }
        }
        assert!(t.iter().all(AgentNets::is_finite));
    }

    #[test]
    fn nan_targets_abort_update() {
        let mut t = team(1, 20);
        let batch = random_batch(1, 4, 21);
        let bt = BatchTensors::new(&batch, &t).unwrap();
        let before = t[0].main.clone();
        let y = vec![f64::NAN; 4];
        let err = update_agent(&mut t, 0, &[&bt], &[&y], &TrainConfig::default());
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(t[0].main, before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut t = team(2, 22);
        t[0].obs_norm.set_stats([1.0, 2.0], [3.0, 4.0]);
        let mut buf = Vec::new();
        t[0].write_checkpoint(&mut buf).unwrap();
        let back = AgentNets::read_checkpoint(&mut buf.as_slice(), &TrainConfig::default()).unwrap();
        assert_eq!(back.main, t[0].main);
        assert_eq!(back.target, t[0].target);
        assert_eq!(back.obs_norm.mean, [1.0, 2.0]);
        assert_eq!(back.obs_norm.std, [3.0, 4.0]);
    }

    #[test]
    fn normalizer_statistics() {
        let mut n = Normalizer::new(5.0);
        assert_eq!(n.apply(Vec2::new(2.0, -3.0)), [2.0, -3.0]);
        for k in 0..100 {
            n.observe(Vec2::new(k as f64, 10.0));
        }
        n.recompute();
        assert!((n.mean[0] - 49.5).abs() < 1e-12);
        assert_eq!(n.std[1], 0.01);
        assert_eq!(n.apply(Vec2::new(1e6, 10.0)), [5.0, 0.0]);
    }

    #[test]
    fn critic_input_layout() {
        let a_in = Matrix::from_rows(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b_in = Matrix::from_rows(1, 4, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let aa = Matrix::from_rows(1, 2, vec![0.1, 0.2]).unwrap();
        let ab = Matrix::from_rows(1, 2, vec![0.3, 0.4]).unwrap();
        let x = critic_input(&[a_in, b_in], &[&aa, &ab]);
        assert_eq!(
            x.data,
            vec![1.0, 2.0, 5.0, 6.0, 0.1, 0.2, 0.3, 0.4, 3.0, 4.0, 7.0, 8.0]
        );
    }
}
