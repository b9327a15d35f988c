//! Oracle suites: finite-difference gradients, brute-force competitive
//! relabelling, hindsight goal membership and wall collisions.
//!
//! Each oracle is written independently of the code path it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{self, EnvState, GoalSpec, MazeGeometry, MazeKind, PointMaze, Vec2, WALL_TOL};
use crate::error::Result;
use crate::net::{self, Activation, Gradients, MlpParams, OutputActivation};
use crate::replay::{self, Minibatch, PairedEpisode, ReplayStore, Sample, Transition};
use crate::trainer::positions;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub first_failure: Option<String>,
    /// Suite-specific headline number, e.g. the worst relative error.
    pub worst: f64,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            cases: 0,
            failures: 0,
            first_failure: None,
            worst: 0.0,
        }
    }

    fn fail(&mut self, msg: String) {
        self.failures += 1;
        if self.first_failure.is_none() {
            self.first_failure = Some(msg);
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

pub type BackwardFn = fn(&MlpParams, &[f64], &[f64]) -> Result<(Gradients, Vec<f64>)>;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative errors of near-zero partials.
pub const FD_FLOOR: f64 = 1e-5;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

fn objective(p: &MlpParams, x: &[f64], w: &[f64]) -> f64 {
    net::forward(p, x)
        .expect("shape checked")
        .iter()
        .zip(w)
        .map(|(o, w)| o * w)
        .sum()
}

/// Smallest |pre-activation| over hidden units, recomputed naively.
fn min_hidden_margin(p: &MlpParams, x: &[f64]) -> f64 {
    let mut a = x.to_vec();
    let mut margin = f64::INFINITY;
    for l in &p.layers[..p.layers.len() - 1] {
        let z: Vec<f64> = (0..l.outputs)
            .map(|o| l.bias[o] + (0..l.inputs).map(|i| l.w(o, i) * a[i]).sum::<f64>())
            .collect();
        margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
        a = z.iter().map(|&v| if p.hidden == Activation::Relu { v.max(0.0) } else { v.tanh() }).collect();
    }
    margin
}

/// Compares `backward` against central differences on `n_nets` random nets
/// no larger than `[6, 16, 16, 16, 4]`.
pub fn gradient_suite_with(n_nets: usize, seed: u64, backward: BackwardFn) -> SuiteReport {
    let mut report = SuiteReport::new("fd-gradients");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n_nets {
        let depth = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(1..=6)];
        for _ in 0..depth {
            dims.push(rng.random_range(1..=16));
        }
        dims.push(rng.random_range(1..=4));
        let hidden = if k % 3 == 2 {
            Activation::Tanh
        } else {
            Activation::Relu
        };
        let output = if k % 2 == 0 {
            OutputActivation::Linear
        } else {
            OutputActivation::ScaledTanh(1.0)
        };
        let p = net::init_params(&dims, hidden, output, &mut rng).expect("valid dims");
        // keep inputs away from ReLU kinks so the difference quotient is smooth
        let x = loop {
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.5..1.5)).collect();
            if hidden != Activation::Relu || min_hidden_margin(&p, &x) > 1e-3 {
                break x;
            }
        };
        let w: Vec<f64> = (0..p.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (grads, dx) = match backward(&p, &x, &w) {
            Ok(v) => v,
            Err(e) => {
                report.fail(format!("net {k}: backward failed: {e}"));
                continue;
            }
        };
        let mut numeric = Vec::with_capacity(p.num_params());
        let mut probe = p.clone();
        let n_params = p.num_params();
        for idx in 0..n_params {
            let orig = p.values().nth(idx).expect("in range");
            let set = |q: &mut MlpParams, v: f64| {
                *q.values_mut().nth(idx).expect("in range") = v;
            };
            set(&mut probe, orig + FD_STEP);
            let up = objective(&probe, &x, &w);
            set(&mut probe, orig - FD_STEP);
            let down = objective(&probe, &x, &w);
            set(&mut probe, orig);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += FD_STEP;
            let up = objective(&p, &xp, &w);
            xp[i] -= 2.0 * FD_STEP;
            let down = objective(&p, &xp, &w);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let analytic: Vec<f64> = grads.values().chain(dx.iter().copied()).collect();
        report.cases += 1;
        if analytic.len() != numeric.len() {
            report.fail(format!("net {k}: {} analytic vs {} numeric partials", analytic.len(), numeric.len()));
            continue;
        }
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(*a, *n))
            .fold(0.0, f64::max);
        report.worst = report.worst.max(worst);
        if !(worst < FD_TOLERANCE) {
            report.fail(format!("net {k} dims {dims:?}: relative error {worst:e}"));
        }
    }
    report
}

pub fn gradient_suite(n_nets: usize, seed: u64) -> SuiteReport {
    gradient_suite_with(n_nets, seed, net::backward)
}

/// Pairwise reference for competitive relabelling: `(rewards A, rewards B,
/// changed count)`.
pub fn cer_brute_force(a: &[Vec2], ra: &[f64], b: &[Vec2], rb: &[f64], threshold: f64) -> (Vec<f64>, Vec<f64>, usize) {
    let mut out_a = ra.to_vec();
    let mut out_b = rb.to_vec();
    let mut hit_a = vec![false; a.len()];
    let mut gain_b = vec![0.0; b.len()];
    for i in 0..a.len() {
        for j in 0..b.len() {
            let d = ((a[i].x - b[j].x).powi(2) + (a[i].y - b[j].y).powi(2)).sqrt();
            if d < threshold {
                hit_a[i] = true;
                gain_b[j] += 1.0;
            }
        }
    }
    let mut changed = 0;
    for i in 0..a.len() {
        if hit_a[i] {
            out_a[i] -= 1.0;
            changed += 1;
        }
    }
    for j in 0..b.len() {
        if gain_b[j] > 0.0 {
            out_b[j] += gain_b[j];
            changed += 1;
        }
    }
    (out_a, out_b, changed)
}

fn synthetic_batch(a: &[Vec2], ra: &[f64], b: &[Vec2], rb: &[f64]) -> Minibatch {
    let mk = |p: Vec2, r: f64| Sample {
        transition: Transition {
            state: p,
            action: [0.0, 0.0],
            goal: Vec2::ZERO,
            reward: r,
            next_state: p,
            achieved_next: p,
        },
        source: 0,
        t: 0,
        her_relabelled: false,
        cer_changed: false,
    };
    Minibatch {
        streams: vec![
            a.iter().zip(ra).map(|(p, r)| mk(*p, *r)).collect(),
            b.iter().zip(rb).map(|(p, r)| mk(*p, *r)).collect(),
        ],
        sources: vec![],
        source_ids: vec![],
    }
}

/// Random minibatches (m ≤ `max_m`) checked against the pairwise reference.
pub fn cer_suite(n_batches: usize, max_m: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("cer-pairwise");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n_batches {
        let m = rng.random_range(1..=max_m);
        // small arenas make matches common, large ones make them rare
        let span = [2.0, 5.0, 25.0][k % 3];
        let mut pts = |n: usize| -> Vec<Vec2> {
            (0..n)
                .map(|_| Vec2::new(rng.random_range(0.0..span), rng.random_range(0.0..span)))
                .collect()
        };
        let a = pts(m);
        let b = pts(m);
        let ra: Vec<f64> = (0..m).map(|_| if rng.random_bool(0.3) { 0.0 } else { -1.0 }).collect();
        let rb: Vec<f64> = (0..m).map(|_| if rng.random_bool(0.3) { 0.0 } else { -1.0 }).collect();
        let threshold = 1.0;
        let (want_a, want_b, want_n) = cer_brute_force(&a, &ra, &b, &rb, threshold);
        let mut batch = synthetic_batch(&a, &ra, &b, &rb);
        let got_n = replay::cer_relabel(&mut batch, threshold).expect("two streams");
        report.cases += 1;
        let got_a = batch.rewards(0);
        let got_b = batch.rewards(1);
        if got_a != want_a || got_b != want_b || got_n != want_n {
            report.fail(format!("batch {k}: mismatch against pairwise reference (n {got_n} vs {want_n})"));
            continue;
        }
        let once = got_a.iter().zip(&ra).all(|(g, o)| *g == *o || *g == *o - 1.0);
        let b_ok = got_b
            .iter()
            .zip(&rb)
            .all(|(g, o)| *g >= *o && (*g - *o).fract() == 0.0);
        let dec: f64 = ra.iter().zip(&got_a).map(|(o, g)| o - g).sum();
        let inc: f64 = got_b.iter().zip(&rb).map(|(g, o)| g - o).sum();
        let flags_ok = batch.streams[0]
            .iter()
            .zip(got_a.iter().zip(&ra))
            .all(|(s, (g, o))| s.cer_changed == (g != o));
        if !(once && b_ok && inc >= dec && dec <= m as f64 && flags_ok) {
            report.fail(format!("batch {k}: asymmetry invariants violated"));
        }
    }
    report
}

/// Random-walk episode in a maze; rewards computed against a random goal.
pub fn random_episode<R: Rng + ?Sized>(env: &mut PointMaze, len: usize, rng: &mut R) -> Vec<Transition> {
    let (mut state, goal) = env.reset(rng);
    let mut track = Vec::with_capacity(len);
    for _ in 0..len {
        let action = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
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
    track
}

/// Every relabelled goal must be the achieved goal of a strictly later state
/// of the same episode (excluding the terminal state), with the reward
/// recomputed against it.
pub fn her_suite(n_episodes: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("her-membership");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = PointMaze::new(MazeKind::U);
    let horizon = env.horizon();
    let threshold = env.threshold;
    let mut checked_relabels = 0usize;
    for k in 0..n_episodes {
        // short episodes concentrate samples near the end of the window
        let len = if k % 4 == 0 { rng.random_range(1..=4) } else { horizon };
        let a = random_episode(&mut env, len, &mut rng);
        let b = random_episode(&mut env, len, &mut rng);
        let mut store = ReplayStore::new(10 * horizon);
        store
            .store(PairedEpisode::new(a, b).expect("valid rollout"))
            .expect("fits");
        let mut batch = store.sample(64, &mut rng).expect("non-empty");
        let original = batch.clone();
        let p = if k % 2 == 0 { 1.0 } else { 0.8 };
        if let Err(e) = replay::her_relabel(&mut batch, p, threshold, &mut rng) {
            report.fail(format!("episode {k}: {e}"));
            continue;
        }
        report.cases += 1;
        for (agent, (stream, before)) in batch.streams.iter().zip(&original.streams).enumerate() {
            let track = &batch.sources[0].tracks[agent];
            let visited = positions(track);
            let last = track.len() - 1;
            for (s, o) in stream.iter().zip(before) {
                let tr = &s.transition;
                let orig = &o.transition;
                if tr.state != orig.state
                    || tr.action != orig.action
                    || tr.next_state != orig.next_state
                    || tr.achieved_next != orig.achieved_next
                {
                    report.fail(format!("episode {k}: relabelling touched states or actions"));
                    continue;
                }
                if !s.her_relabelled {
                    if tr != orig {
                        report.fail(format!("episode {k}: untouched sample changed"));
                    }
                    if p == 1.0 && s.t < last {
                        report.fail(format!("episode {k}: p=1 left t={} unrelabelled", s.t));
                    }
                    continue;
                }
                checked_relabels += 1;
                let member = (s.t + 1..=last).any(|j| visited[j] == tr.goal);
                let spec = GoalSpec {
                    target: tr.goal,
                    threshold,
                };
                if s.t == last || !member {
                    report.fail(format!("episode {k}: goal at t={} is not a future achieved goal", s.t));
                } else if tr.reward != env::reward(tr.achieved_next, &spec) {
                    report.fail(format!("episode {k}: reward not recomputed at t={}", s.t));
                }
            }
        }
        // the backing store never changes
        if store.get(0).map(|e| &**e) != Some(&*original.sources[0]) {
            report.fail(format!("episode {k}: store mutated by relabelling"));
        }
    }
    report.worst = checked_relabels as f64;
    report
}

fn orientation(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Orientation-based closed segment intersection test.
pub fn segments_intersect(p1: Vec2, p2: Vec2, q1: Vec2, q2: Vec2) -> bool {
    let d1 = orientation(q1, q2, p1);
    let d2 = orientation(q1, q2, p2);
    let d3 = orientation(p1, p2, q1);
    let d4 = orientation(p1, p2, q2);
    let on = |a: Vec2, b: Vec2, c: Vec2| {
        c.x >= a.x.min(b.x) && c.x <= a.x.max(b.x) && c.y >= a.y.min(b.y) && c.y <= a.y.max(b.y)
    };
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on(q1, q2, p1))
        || (d2 == 0.0 && on(q1, q2, p2))
        || (d3 == 0.0 && on(p1, p2, q1))
        || (d4 == 0.0 && on(p1, p2, q2))
}

/// Random steps in both mazes. A step must never cross or end on a wall,
/// never leave the workspace, and must reach the clamped target exactly
/// when the straight path to it is clear.
pub fn collision_suite(n_steps: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("wall-collisions");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for kind in [MazeKind::U, MazeKind::S] {
        let mut env = PointMaze::new(kind);
        let geo: MazeGeometry = env.geometry.clone();
        let mut state = EnvState { position: Vec2::ZERO };
        for k in 0..n_steps / 2 {
            if k % 200 == 0 {
                state = EnvState { position: Vec2::ZERO };
            }
            // mix of uniform actions and pushes straight into the nearest wall
            let action = if rng.random_bool(0.2) {
                let w = geo.walls[rng.random_range(0..geo.walls.len())];
                let dx = (w.a.x - state.position.x).signum();
                [dx, rng.random_range(-0.05..0.05)]
            } else {
                [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
            };
            let next = env.step(&state, action);
            report.cases += 1;
            let p = next.position;
            let target = geo.workspace.clamp(Vec2::new(
                state.position.x + action[0] * geo.max_step,
                state.position.y + action[1] * geo.max_step,
            ));
            let crosses = geo
                .walls
                .iter()
                .any(|w| segments_intersect(state.position, p, w.a, w.b));
            let clear = !geo
                .walls
                .iter()
                .any(|w| segments_intersect(state.position, target, w.a, w.b));
            let on_wall = geo.walls.iter().any(|w| w.distance_to(p) < WALL_TOL);
            if crosses || on_wall || !geo.workspace.contains(p) {
                report.fail(format!("{kind:?} step {k}: {} -> {p} penetrates or escapes", state.position));
            } else if clear && p != target {
                report.fail(format!("{kind:?} step {k}: clear move to {target} ended at {p}"));
            } else if !clear && p.dist(state.position) > target.dist(state.position) {
                report.fail(format!("{kind:?} step {k}: blocked move overshot"));
            }
            state = next;
        }
    }
    report
}

/// Default sizes used by the `selftest` command.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![
        gradient_suite(100, seed),
        cer_suite(10_000, 64, seed),
        her_suite(1_000, seed),
        collision_suite(200_000, seed),
    ]
}
