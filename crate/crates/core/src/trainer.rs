//! Training loop: paired rollouts, relabelling, per-agent updates, the
//! agent-B reset schedule and evaluation.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{self, AgentNets, BatchTensors, NetPair, TrainConfig};
use crate::env::{self, EnvState, MazeKind, PointMaze, Vec2};
use crate::error::{Error, Result};
use crate::metrics::{self, EpochRecord, VisitGrid};
use crate::replay::{self, Minibatch, PairedEpisode, RelabelConfig, ReplayStore, Transition};

/// `reset_to` attempts for an int-CER start state before falling back to
/// the regular initial state.
pub const INT_RESET_RETRIES: usize = 8;
pub const VISIT_CELL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CerMode {
    None,
    Independent,
    Interact,
}

impl CerMode {
    pub fn name(self) -> &'static str {
        match self {
            CerMode::None => "none",
            CerMode::Independent => "ind",
            CerMode::Interact => "int",
        }
    }
}

impl std::str::FromStr for CerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "off" => Ok(CerMode::None),
            "ind" => Ok(CerMode::Independent),
            "int" => Ok(CerMode::Interact),
            other => Err(Error::Config(format!(
                "unknown cer mode `{other}` (expected none, ind or int)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub maze: MazeKind,
    pub cer: CerMode,
    pub her: bool,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    /// Optimization steps after every collected episode.
    pub updates_per_episode: usize,
    pub batch_size: usize,
    pub workers_a: usize,
    pub workers_b: usize,
    pub reset_epochs: usize,
    pub max_reset_epochs: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub buffer_size: usize,
    pub p_future: f64,
    pub hidden: Vec<usize>,
    /// `None` resolves to `1 - 1/T`.
    pub gamma: Option<f64>,
    pub train: TrainConfig,
    /// Keep every n-th minibatch (before and after competitive relabelling)
    /// for offline checks; 0 disables.
    pub log_batches_every: usize,
    /// Draw every stream's sample `i` from the same episode and time step.
    pub joint_sampling: bool,
}

impl RunConfig {
    /// Defaults for a maze, following the per-maze hyperparameter table.
    pub fn for_maze(maze: MazeKind) -> Self {
        let (buffer_size, epochs) = match maze {
            MazeKind::U => (100_000, 50),
            MazeKind::S => (1_000_000, 100),
        };
        Self {
            maze,
            cer: CerMode::Interact,
            her: true,
            episodes_per_epoch: 16,
            epochs,
            updates_per_episode: 40,
            batch_size: 128,
            workers_a: 1,
            workers_b: 1,
            reset_epochs: 2,
            max_reset_epochs: 10,
            eval_episodes: 10,
            seed: 0,
            buffer_size,
            p_future: 0.8,
            hidden: vec![256, 256, 256],
            gamma: None,
            train: TrainConfig::default(),
            log_batches_every: 0,
            joint_sampling: false,
        }
    }

    pub fn horizon(&self) -> usize {
        env::MazeGeometry::new(self.maze).horizon
    }

    pub fn agents(&self) -> usize {
        if self.cer == CerMode::None {
            1
        } else {
            2
        }
    }

    /// Training hyperparameters with the discount resolved.
    pub fn resolved_train(&self) -> TrainConfig {
        TrainConfig {
            gamma: self
                .gamma
                .unwrap_or_else(|| 1.0 - 1.0 / self.horizon() as f64),
            ..self.train
        }
    }

    pub fn relabel(&self, threshold: f64) -> RelabelConfig {
        RelabelConfig {
            her: self.her,
            cer: self.cer != CerMode::None,
            p_future: self.p_future,
            threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("epochs", self.epochs),
            ("updates_per_episode", self.updates_per_episode),
            ("batch_size", self.batch_size),
            ("workers_a", self.workers_a),
            ("workers_b", self.workers_b),
            ("reset_epochs", self.reset_epochs),
            ("eval_episodes", self.eval_episodes),
            ("buffer_size", self.buffer_size),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.p_future) {
            problems.push(format!("p_future {} not in [0, 1]", self.p_future));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            problems.push(format!("hidden layers must be positive, got {:?}", self.hidden));
        }
        if self.buffer_size < self.horizon() {
            problems.push(format!(
                "buffer_size {} cannot hold one episode of {} steps",
                self.buffer_size,
                self.horizon()
            ));
        }
        if let Err(Error::Config(msg)) = self.resolved_train().validate() {
            problems.push(msg);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// How agent B's episode was started.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StartKind {
    Origin,
    FromA { attempts: usize },
    Fallback,
}

#[derive(Debug, Clone)]
pub struct CollectedEpisode {
    pub episode: PairedEpisode,
    pub b_start: Option<StartKind>,
}

/// Rolls out one agent for `horizon` steps from `start`.
pub fn rollout<R: Rng + ?Sized>(
    env: &mut PointMaze,
    nets: &AgentNets,
    start: EnvState,
    goal: env::GoalSpec,
    explore: bool,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    let mut state = start;
    let mut track = Vec::with_capacity(env.horizon());
    for _ in 0..env.horizon() {
        let action = agent::act(nets, state.position, goal.target, explore, config, rng)?;
        let next = env.step(&state, action);
        let achieved = env::achieved_goal(&next);
        track.push(Transition {
            state: state.position,
            action,
            goal: goal.target,
            reward: env::reward(achieved, &goal),
            next_state: next.position,
            achieved_next: achieved,
        });
        state = next;
    }
    Ok(track)
}

/// Every position of a track, start state first.
pub fn positions(track: &[Transition]) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(track.len() + 1);
    if let Some(first) = track.first() {
        out.push(first.state);
    }
    out.extend(track.iter().map(|t| t.next_state));
    out
}

/// Collects A's episode, then B's (if the run has a B). In `Interact` mode B
/// starts from a uniformly drawn position of A's fresh episode.
pub fn collect_paired_episode<R: Rng + ?Sized>(
    env: &mut PointMaze,
    agents: &[AgentNets],
    mode: CerMode,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<CollectedEpisode> {
    let (start_a, goal_a) = env.reset(rng);
    let track_a = rollout(env, &agents[0], start_a, goal_a, true, config, rng)?;
    if agents.len() == 1 {
        return Ok(CollectedEpisode {
            episode: PairedEpisode::single(track_a)?,
            b_start: None,
        });
    }
    let (origin, goal_b) = env.reset(rng);
    let (start_b, kind) = match mode {
        CerMode::Interact => {
            let visited = positions(&track_a);
            let mut chosen = None;
            for attempt in 1..=INT_RESET_RETRIES {
                let candidate = visited[rng.random_range(0..visited.len())];
                if let Ok(s) = env.reset_to(EnvState {
                    position: candidate,
                }) {
                    chosen = Some((s, StartKind::FromA { attempts: attempt }));
                    break;
                }
            }
            chosen.unwrap_or((origin, StartKind::Fallback))
        }
        _ => (origin, StartKind::Origin),
    };
    let track_b = rollout(env, &agents[1], start_b, goal_b, true, config, rng)?;
    Ok(CollectedEpisode {
        episode: PairedEpisode::new(track_a, track_b)?,
        b_start: Some(kind),
    })
}

/// Re-initializes agent B at epochs `0, r, 2r, …` below `max_reset_epochs`.
/// Returns whether a reset happened.
pub fn reset_agent_b_if_scheduled<R: Rng + ?Sized>(
    epoch: usize,
    agents: &mut [AgentNets],
    config: &RunConfig,
    rng: &mut R,
) -> Result<bool> {
    if agents.len() < 2 || !reset_scheduled(epoch, config.reset_epochs, config.max_reset_epochs) {
        return Ok(false);
    }
    let n = agents.len();
    agents[1].reinitialize(n, &config.hidden, &config.resolved_train(), rng)?;
    Ok(true)
}

pub fn reset_scheduled(epoch: usize, reset_epochs: usize, max_reset_epochs: usize) -> bool {
    reset_epochs > 0 && epoch < max_reset_epochs && epoch % reset_epochs == 0
}

/// Greedy rollouts; success means the final achieved goal is within the
/// threshold of the goal.
pub fn evaluate<R: Rng + ?Sized>(
    env: &mut PointMaze,
    nets: &AgentNets,
    n_episodes: usize,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    Ok(evaluate_detailed(env, nets, n_episodes, config, rng)?.success_rate)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub success_rate: f64,
    pub goals: Vec<Vec2>,
    pub visits: VisitGrid,
}

pub fn evaluate_detailed<R: Rng + ?Sized>(
    env: &mut PointMaze,
    nets: &AgentNets,
    n_episodes: usize,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<EvalReport> {
    let mut visits = VisitGrid::new(env.geometry.workspace, VISIT_CELL);
    let mut goals = Vec::with_capacity(n_episodes);
    let mut successes = 0usize;
    for _ in 0..n_episodes {
        let (start, goal) = env.reset(rng);
        let track = rollout(env, nets, start, goal, false, config, rng)?;
        let last = track.last().map_or(start.position, |t| t.achieved_next);
        if last.dist(goal.target) < goal.threshold {
            successes += 1;
        }
        visits.accumulate(&positions(&track));
        goals.push(goal.target);
    }
    let success_rate = if n_episodes == 0 {
        0.0
    } else {
        successes as f64 / n_episodes as f64
    };
    Ok(EvalReport {
        success_rate,
        goals,
        visits,
    })
}

/// A minibatch kept for offline recomputation of the effect ratio.
#[derive(Debug, Clone)]
pub struct LoggedBatch {
    pub epoch: usize,
    pub step: usize,
    /// After hindsight relabelling, before competitive relabelling.
    pub before_cer: Minibatch,
    pub after_cer: Minibatch,
    pub n_changed: usize,
}

/// Effect-ratio bookkeeping for one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub n_changed: usize,
    pub samples: usize,
    pub effect_ratio: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EpochStats {
    pub n_changed: usize,
    pub samples: usize,
    pub updates: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub int_fallbacks: usize,
}

pub struct Trainer {
    pub config: RunConfig,
    pub train: TrainConfig,
    pub env: PointMaze,
    pub agents: Vec<AgentNets>,
    pub store: ReplayStore,
    pub rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    pub epoch: usize,
    pub episodes_done: usize,
    pub updates_done: usize,
    pub visits: Vec<VisitGrid>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub logged_batches: Vec<LoggedBatch>,
    pub b_starts: Vec<(Vec<Vec2>, Vec2)>,
    started: Instant,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let train = config.resolved_train();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e7a1_0000_0001);
        let n = config.agents();
        let agents = (0..n)
            .map(|_| AgentNets::new(n, &config.hidden, &train, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let env = PointMaze::new(config.maze);
        let visits = (0..n)
            .map(|_| VisitGrid::new(env.geometry.workspace, VISIT_CELL))
            .collect();
        Ok(Self {
            store: ReplayStore::new(config.buffer_size),
            config,
            train,
            env,
            agents,
            rng,
            eval_rng,
            epoch: 0,
            episodes_done: 0,
            updates_done: 0,
            visits,
            history: Vec::new(),
            steps: Vec::new(),
            logged_batches: Vec::new(),
            b_starts: Vec::new(),
            started: Instant::now(),
        })
    }

    fn observe_normalizers(&mut self, episode: &PairedEpisode) {
        for (nets, track) in self.agents.iter_mut().zip(&episode.tracks) {
            for p in positions(track) {
                nets.obs_norm.observe(p);
                nets.goal_norm.observe(p);
            }
            for t in track {
                nets.goal_norm.observe(t.goal);
            }
            nets.obs_norm.recompute();
            nets.goal_norm.recompute();
        }
    }

    /// Collects one paired episode, stores it and runs the configured number
    /// of optimization steps.
    pub fn train_episode(&mut self, stats: &mut EpochStats) -> Result<()> {
        let collected = collect_paired_episode(
            &mut self.env,
            &self.agents,
            self.config.cer,
            &self.train,
            &mut self.rng,
        )?;
        if collected.b_start == Some(StartKind::Fallback) {
            stats.int_fallbacks += 1;
        }
        if self.config.cer == CerMode::Interact {
            let visited = positions(&collected.episode.tracks[0]);
            let start = collected.episode.tracks[1][0].state;
            self.b_starts.push((visited, start));
        }
        for (grid, track) in self.visits.iter_mut().zip(&collected.episode.tracks) {
            grid.accumulate(&positions(track));
        }
        self.observe_normalizers(&collected.episode);
        self.store.store(collected.episode)?;
        self.episodes_done += 1;
        for _ in 0..self.config.updates_per_episode {
            self.optimize_step(stats)?;
        }
        Ok(())
    }

    /// Sample → relabel → per-agent critic/actor/target updates.
    pub fn optimize_step(&mut self, stats: &mut EpochStats) -> Result<()> {
        let n = self.agents.len();
        let workers = if n == 1 {
            self.config.workers_a
        } else {
            self.config.workers_a.max(self.config.workers_b)
        };
        let relabel = self.config.relabel(self.env.threshold);
        let step = self.updates_done;
        let log_this = self.config.log_batches_every > 0 && step % self.config.log_batches_every == 0;
        let mut tensors = Vec::with_capacity(workers);
        let mut step_changed = 0;
        let mut step_samples = 0;
        for w in 0..workers {
            let mut batch =
                self.store
                    .sample_with(self.config.batch_size, self.config.joint_sampling, &mut self.rng)?;
            if relabel.her {
                replay::her_relabel(&mut batch, relabel.p_future, relabel.threshold, &mut self.rng)?;
            }
            let before = (log_this && w == 0).then(|| batch.clone());
            let changed = if relabel.cer {
                replay::cer_relabel(&mut batch, relabel.threshold)?
            } else {
                0
            };
            if let Some(before_cer) = before {
                self.logged_batches.push(LoggedBatch {
                    epoch: self.epoch,
                    step,
                    before_cer,
                    after_cer: batch.clone(),
                    n_changed: changed,
                });
            }
            step_changed += changed;
            step_samples += batch.total_samples();
            tensors.push(BatchTensors::new(&batch, &self.agents)?);
        }
        let targets: Vec<Vec<Vec<f64>>> = tensors
            .iter()
            .map(|bt| {
                let pairs: Vec<&NetPair> = self.agents.iter().map(|a| &a.target).collect();
                agent::critic_targets(&pairs, bt, self.train.gamma)
            })
            .collect::<Result<_>>()?;
        for i in 0..n {
            let count = if i == 0 {
                self.config.workers_a
            } else {
                self.config.workers_b
            };
            let batches: Vec<&BatchTensors> = tensors.iter().take(count).collect();
            let ys: Vec<&[f64]> = targets.iter().take(count).map(|t| t[i].as_slice()).collect();
            let losses = agent::update_agent(&mut self.agents, i, &batches, &ys, &self.train)
                .map_err(|e| {
                    e.with_context(&format!("epoch {} step {step} agent {i}", self.epoch))
                })?;
            if i == 0 {
                stats.critic_loss += losses.critic;
                stats.actor_loss += losses.actor;
            }
        }
        let ratio = metrics::effect_ratio(step_changed, step_samples)?;
        self.steps.push(StepRecord {
            epoch: self.epoch,
            step,
            n_changed: step_changed,
            samples: step_samples,
            effect_ratio: ratio,
        });
        stats.n_changed += step_changed;
        stats.samples += step_samples;
        stats.updates += 1;
        self.updates_done += 1;
        Ok(())
    }

    /// One full epoch including the B reset check and evaluation.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        reset_agent_b_if_scheduled(self.epoch, &mut self.agents, &self.config, &mut self.rng)?;
        let mut stats = EpochStats::default();
        for _ in 0..self.config.episodes_per_epoch {
            self.train_episode(&mut stats)?;
        }
        let success_a = evaluate(
            &mut self.env,
            &self.agents[0],
            self.config.eval_episodes,
            &self.train,
            &mut self.eval_rng,
        )?;
        let success_b = match self.agents.get(1) {
            Some(b) => Some(evaluate(
                &mut self.env,
                b,
                self.config.eval_episodes,
                &self.train,
                &mut self.eval_rng,
            )?),
            None => None,
        };
        let record = EpochRecord {
            epoch: self.epoch,
            success_a,
            success_b,
            effect_ratio: if stats.samples == 0 {
                0.0
            } else {
                metrics::effect_ratio(stats.n_changed, stats.samples)?
            },
            n_episodes: self.episodes_done,
            n_updates: self.updates_done,
            wall_s: self.started.elapsed().as_secs_f64(),
        };
        self.history.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    pub fn run(&mut self) -> Result<&[EpochRecord]> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(&self.history)
    }

    /// Greedy evaluation of agent A with a dedicated seed.
    pub fn final_evaluation(&mut self, episodes: usize, seed: u64) -> Result<EvalReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        evaluate_detailed(&mut self.env, &self.agents[0], episodes, &self.train, &mut rng)
    }
}
