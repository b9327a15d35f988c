//! Goal-conditioned point-mass mazes.
//!
//! The agent is a kinematic point that moves at most `max_step` per step.
//! Walls are zero-thickness segments; a move that would cross one stops
//! `STOP_EPS` short of the first contact. Rewards are sparse: `0` inside
//! the goal threshold, `-1` everywhere else.

use std::fmt;
use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};

/// Backoff distance before a wall contact.
pub const STOP_EPS: f64 = 1e-6;
/// Points closer than this to a wall count as being inside it.
pub const WALL_TOL: f64 = 1e-9;
/// Sampled goals closer than this to a wall are redrawn.
pub const GOAL_WALL_BUFFER: f64 = 0.1;
/// Range of both goal coordinates.
pub const GOAL_RANGE: (f64, f64) = (-5.0, 20.0);
pub const DEFAULT_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Vec2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.x, self.y]
    }

    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    fn add_scaled(self, d: Vec2, s: f64) -> Vec2 {
        Vec2::new(self.x + d.x * s, self.y + d.y * s)
    }

    fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }
}

impl fmt::Display for Vec2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vec2,
    pub b: Vec2,
}

impl Segment {
    pub const fn new(a: Vec2, b: Vec2) -> Self {
        Self { a, b }
    }

    pub fn distance_to(&self, p: Vec2) -> f64 {
        let d = self.b.sub(self.a);
        let len2 = d.dot(d);
        if len2 == 0.0 {
            return p.dist(self.a);
        }
        let t = (p.sub(self.a).dot(d) / len2).clamp(0.0, 1.0);
        p.dist(self.a.add_scaled(d, t))
    }

    /// Smallest `t ∈ [0, 1]` at which `from + t (to - from)` touches this
    /// segment, or `None` if the path misses it.
    pub fn first_contact(&self, from: Vec2, to: Vec2) -> Option<f64> {
        let r = to.sub(from);
        let s = self.b.sub(self.a);
        let denom = r.cross(s);
        let qp = self.a.sub(from);
        if denom.abs() > 1e-15 {
            let t = qp.cross(s) / denom;
            let u = qp.cross(r) / denom;
            if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
                return Some(t);
            }
            return None;
        }
        // parallel; only collinear overlap matters
        if qp.cross(r).abs() > 1e-15 {
            return None;
        }
        let rr = r.dot(r);
        if rr == 0.0 {
            return (self.distance_to(from) == 0.0).then_some(0.0);
        }
        let t0 = qp.dot(r) / rr;
        let t1 = self.b.sub(from).dot(r) / rr;
        let (lo, hi) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
        if hi < 0.0 || lo > 1.0 {
            None
        } else {
            Some(lo.max(0.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn clamp(&self, p: Vec2) -> Vec2 {
        Vec2::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MazeKind {
    U,
    S,
}

impl MazeKind {
    pub fn name(self) -> &'static str {
        match self {
            MazeKind::U => "U",
            MazeKind::S => "S",
        }
    }
}

impl std::str::FromStr for MazeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "U" | "u" => Ok(MazeKind::U),
            "S" | "s" => Ok(MazeKind::S),
            other => Err(Error::Config(format!("unknown maze `{other}` (expected U or S)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MazeGeometry {
    pub workspace: Rect,
    pub walls: Vec<Segment>,
    pub max_step: f64,
    pub horizon: usize,
}

impl MazeGeometry {
    pub fn new(kind: MazeKind) -> Self {
        let workspace = Rect {
            min: Vec2::new(-6.0, -6.0),
            max: Vec2::new(21.0, 21.0),
        };
        let (walls, horizon) = match kind {
            MazeKind::U => (
                vec![Segment::new(Vec2::new(8.0, -6.0), Vec2::new(8.0, 13.0))],
                50,
            ),
            MazeKind::S => (
                vec![
                    Segment::new(Vec2::new(6.0, -6.0), Vec2::new(6.0, 14.0)),
                    Segment::new(Vec2::new(13.0, 21.0), Vec2::new(13.0, 1.0)),
                ],
                100,
            ),
        };
        Self {
            workspace,
            walls,
            max_step: 1.0,
            horizon,
        }
    }

    pub fn wall_distance(&self, p: Vec2) -> f64 {
        self.walls
            .iter()
            .map(|w| w.distance_to(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Inside the workspace and not on a wall.
    pub fn is_free(&self, p: Vec2) -> bool {
        p.x.is_finite() && p.y.is_finite() && self.workspace.contains(p) && self.wall_distance(p) >= WALL_TOL
    }

    /// True if the straight path between two points touches a wall.
    pub fn blocked(&self, from: Vec2, to: Vec2) -> bool {
        self.walls.iter().any(|w| w.first_contact(from, to).is_some())
    }

    /// Fraction of goal-sampling cells (at `cell` resolution) that a 4-connected
    /// flood fill from the start cell reaches without crossing a wall.
    pub fn reachable_fraction(&self, cell: f64) -> f64 {
        let min = self.workspace.min;
        let nx = ((self.workspace.max.x - min.x) / cell).round() as usize;
        let ny = ((self.workspace.max.y - min.y) / cell).round() as usize;
        let center = |i: usize, j: usize| {
            Vec2::new(min.x + (i as f64 + 0.5) * cell, min.y + (j as f64 + 0.5) * cell)
        };
        let idx_of = |p: Vec2| {
            (
                (((p.x - min.x) / cell) as usize).min(nx - 1),
                (((p.y - min.y) / cell) as usize).min(ny - 1),
            )
        };
        let mut seen = vec![false; nx * ny];
        let (si, sj) = idx_of(Vec2::ZERO);
        let mut stack = vec![(si, sj)];
        seen[sj * nx + si] = true;
        while let Some((i, j)) = stack.pop() {
            let here = center(i, j);
            let mut neighbours = Vec::with_capacity(4);
            if i > 0 {
                neighbours.push((i - 1, j));
            }
            if i + 1 < nx {
                neighbours.push((i + 1, j));
            }
            if j > 0 {
                neighbours.push((i, j - 1));
            }
            if j + 1 < ny {
                neighbours.push((i, j + 1));
            }
            for (a, b) in neighbours {
                if !seen[b * nx + a] && !self.blocked(here, center(a, b)) {
                    seen[b * nx + a] = true;
                    stack.push((a, b));
                }
            }
        }
        let (lo, hi) = GOAL_RANGE;
        let mut total = 0usize;
        let mut reached = 0usize;
        for j in 0..ny {
            for i in 0..nx {
                let c = center(i, j);
                if c.x >= lo && c.x <= hi && c.y >= lo && c.y <= hi {
                    total += 1;
                    reached += usize::from(seen[j * nx + i]);
                }
            }
        }
        reached as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub position: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalSpec {
    pub target: Vec2,
    pub threshold: f64,
}

/// Counters for the lifetime of one environment instance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub steps: u64,
    pub clamped_actions: u64,
    pub wall_contacts: u64,
}

#[derive(Debug, Clone)]
pub struct PointMaze {
    pub kind: MazeKind,
    pub geometry: MazeGeometry,
    pub threshold: f64,
    pub stats: StepStats,
}

/// Sparse goal reward: `0` when strictly within the threshold, else `-1`.
pub fn reward(achieved: Vec2, goal: &GoalSpec) -> f64 {
    if achieved.dist(goal.target) < goal.threshold {
        0.0
    } else {
        -1.0
    }
}

/// Projection of a state into goal space.
pub fn achieved_goal(state: &EnvState) -> Vec2 {
    state.position
}

impl PointMaze {
    pub fn new(kind: MazeKind) -> Self {
        Self {
            kind,
            geometry: MazeGeometry::new(kind),
            threshold: DEFAULT_THRESHOLD,
            stats: StepStats::default(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.geometry.horizon
    }

    pub fn sample_goal<R: Rng + ?Sized>(&self, rng: &mut R) -> GoalSpec {
        let (lo, hi) = GOAL_RANGE;
        loop {
            let target = Vec2::new(rng.random_range(lo..hi), rng.random_range(lo..hi));
            if self.geometry.wall_distance(target) >= GOAL_WALL_BUFFER {
                return GoalSpec {
                    target,
                    threshold: self.threshold,
                };
            }
        }
    }

    /// Start at the origin with a fresh uniform goal.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (EnvState, GoalSpec) {
        let goal = self.sample_goal(rng);
        (
            EnvState {
                position: Vec2::ZERO,
            },
            goal,
        )
    }

    pub fn reset_to(&mut self, state: EnvState) -> Result<EnvState> {
        if self.geometry.is_free(state.position) {
            Ok(state)
        } else {
            Err(Error::InvalidState(format!(
                "{} is outside the workspace or on a wall",
                state.position
            )))
        }
    }

    pub fn step(&mut self, state: &EnvState, action: [f64; 2]) -> EnvState {
        self.stats.steps += 1;
        let mut a = action;
        let mut clamped = false;
        for v in a.iter_mut() {
            if !v.is_finite() {
                *v = 0.0;
                clamped = true;
            } else if v.abs() > 1.0 {
                *v = v.clamp(-1.0, 1.0);
                clamped = true;
            }
        }
        if clamped {
            self.stats.clamped_actions += 1;
        }
        let geo = &self.geometry;
        let from = state.position;
        let proposed = geo.workspace.clamp(Vec2::new(
            from.x + a[0] * geo.max_step,
            from.y + a[1] * geo.max_step,
        ));
        let delta = proposed.sub(from);
        let len = delta.norm();
        if len == 0.0 {
            return *state;
        }
        let hit = geo
            .walls
            .iter()
            .filter_map(|w| w.first_contact(from, proposed))
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |m| m.min(t))));
        let position = match hit {
            None => proposed,
            Some(t) => {
                self.stats.wall_contacts += 1;
                let travel = (t - STOP_EPS / len).max(0.0);
                let p = from.add_scaled(delta, travel);
                if geo.wall_distance(p) >= WALL_TOL {
                    p
                } else {
                    from
                }
            }
        };
        EnvState { position }
    }
}

/// Tab-separated trajectory log, one line per step: `t x y ax ay r gx gy`.
pub struct TrajectoryLog<W: Write> {
    out: W,
}

impl<W: Write> TrajectoryLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(
        &mut self,
        t: usize,
        state: &EnvState,
        action: [f64; 2],
        reward: f64,
        goal: &GoalSpec,
    ) -> Result<()> {
        writeln!(
            self.out,
            "{t}\t{}\t{}\t{}\t{}\t{reward}\t{}\t{}",
            state.position.x, state.position.y, action[0], action[1], goal.target.x, goal.target.y
        )?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
