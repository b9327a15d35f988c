//! Paired-episode replay memory and the two reward re-labelling strategies.
//!
//! Hindsight relabelling rewrites a sampled transition's goal with a state
//! the same agent reached later in that episode. Competitive relabelling
//! compares the A and B halves of a minibatch: every A transition that sits
//! within the goal threshold of any B transition loses one unit of reward
//! (once), and every B transition gains one unit per matching A transition.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::Rng;

use crate::env::{self, GoalSpec, Vec2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: Vec2,
    pub action: [f64; 2],
    pub goal: Vec2,
    pub reward: f64,
    pub next_state: Vec2,
    pub achieved_next: Vec2,
}

impl Transition {
    const DUMP_WIDTH: usize = 11;

    fn to_reals(self) -> [f64; Self::DUMP_WIDTH] {
        [
            self.state.x,
            self.state.y,
            self.action[0],
            self.action[1],
            self.goal.x,
            self.goal.y,
            self.reward,
            self.next_state.x,
            self.next_state.y,
            self.achieved_next.x,
            self.achieved_next.y,
        ]
    }

    fn from_reals(v: &[f64]) -> Self {
        Self {
            state: Vec2::new(v[0], v[1]),
            action: [v[2], v[3]],
            goal: Vec2::new(v[4], v[5]),
            reward: v[6],
            next_state: Vec2::new(v[7], v[8]),
            achieved_next: Vec2::new(v[9], v[10]),
        }
    }
}

/// One rollout per agent, stored as a single multi-agent record. Index 0 is
/// agent A; index 1, when present, is agent B.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedEpisode {
    pub tracks: Vec<Vec<Transition>>,
}

impl PairedEpisode {
    pub fn new(a: Vec<Transition>, b: Vec<Transition>) -> Result<Self> {
        let ep = Self { tracks: vec![a, b] };
        ep.validate()?;
        Ok(ep)
    }

    /// Single-agent record, used by the plain DDPG and HER baselines.
    pub fn single(a: Vec<Transition>) -> Result<Self> {
        let ep = Self { tracks: vec![a] };
        ep.validate()?;
        Ok(ep)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tracks.is_empty() {
            return Err(Error::Validation("episode has no agent tracks".into()));
        }
        for (agent, track) in self.tracks.iter().enumerate() {
            if track.is_empty() {
                return Err(Error::Validation(format!("track {agent} is empty")));
            }
            for (t, pair) in track.windows(2).enumerate() {
                if pair[0].next_state != pair[1].state {
                    return Err(Error::Validation(format!(
                        "track {agent} breaks at step {t}: next state {} != state {}",
                        pair[0].next_state, pair[1].state
                    )));
                }
            }
            for (t, tr) in track.iter().enumerate() {
                if tr.achieved_next != tr.next_state {
                    return Err(Error::Validation(format!(
                        "track {agent} step {t}: achieved goal is not the next position"
                    )));
                }
                if tr.reward != 0.0 && tr.reward != -1.0 {
                    return Err(Error::Validation(format!(
                        "track {agent} step {t}: stored reward {} is not sparse",
                        tr.reward
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn agents(&self) -> usize {
        self.tracks.len()
    }

    /// Capacity charge: the longest track.
    pub fn cost(&self) -> usize {
        self.tracks.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Bounded FIFO of paired episodes. Capacity is counted in transitions.
#[derive(Debug, Clone)]
pub struct ReplayStore {
    capacity: usize,
    used: usize,
    next_id: u64,
    episodes: VecDeque<(u64, Arc<PairedEpisode>)>,
}

impl ReplayStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            used: 0,
            next_id: 0,
            episodes: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len_transitions(&self) -> usize {
        self.used
    }

    pub fn len_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.episodes.iter().map(|(id, _)| *id).collect()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Arc<PairedEpisode>> {
        self.episodes.iter().map(|(_, e)| e)
    }

    pub fn get(&self, id: u64) -> Option<&Arc<PairedEpisode>> {
        let front = self.episodes.front()?.0;
        let idx = id.checked_sub(front)? as usize;
        self.episodes.get(idx).map(|(_, e)| e)
    }

    /// Appends an episode, evicting the oldest ones until it fits.
    /// Returns the id assigned to the new episode.
    pub fn store(&mut self, ep: PairedEpisode) -> Result<u64> {
        ep.validate()?;
        if let Some((_, first)) = self.episodes.front() {
            if first.agents() != ep.agents() {
                return Err(Error::Validation(format!(
                    "store holds {}-agent episodes, got {}",
                    first.agents(),
                    ep.agents()
                )));
            }
        }
        let cost = ep.cost();
        if cost > self.capacity {
            return Err(Error::Validation(format!(
                "episode of {cost} transitions exceeds capacity {}",
                self.capacity
            )));
        }
        while self.used + cost > self.capacity {
            let (_, old) = self.episodes.pop_front().expect("used > 0 implies non-empty");
            self.used -= old.cost();
        }
        let id = self.next_id;
        self.next_id += 1;
        self.used += cost;
        self.episodes.push_back((id, Arc::new(ep)));
        Ok(id)
    }

    /// Uniform over episodes, then uniform over time steps, drawn
    /// independently for every agent stream.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Minibatch> {
        self.sample_with(m, false, rng)
    }

    /// Like [`ReplayStore::sample`], but with `joint` set sample `i` of every
    /// stream comes from the same episode and time step (the last step of a
    /// shorter track stands in when it runs out).
    pub fn sample_with<R: Rng + ?Sized>(&self, m: usize, joint: bool, rng: &mut R) -> Result<Minibatch> {
        if self.episodes.is_empty() {
            return Err(Error::EmptyStore);
        }
        let agents = self.episodes[0].1.agents();
        let mut sources: Vec<Arc<PairedEpisode>> = Vec::new();
        let mut source_ids: Vec<u64> = Vec::new();
        let mut slot_of: HashMap<u64, usize> = HashMap::new();
        let mut streams = Vec::with_capacity(agents);
        let draws: Vec<(usize, usize)> = if joint {
            (0..m)
                .map(|_| {
                    let e = rng.random_range(0..self.episodes.len());
                    (e, rng.random_range(0..self.episodes[e].1.tracks[0].len()))
                })
                .collect()
        } else {
            Vec::new()
        };
        for agent in 0..agents {
            let mut stream = Vec::with_capacity(m);
            for i in 0..m {
                let (e, t) = if joint {
                    let (e, t) = draws[i];
                    (e, t.min(self.episodes[e].1.tracks[agent].len() - 1))
                } else {
                    let e = rng.random_range(0..self.episodes.len());
                    (e, rng.random_range(0..self.episodes[e].1.tracks[agent].len()))
                };
                let (id, ep) = &self.episodes[e];
                let source = *slot_of.entry(*id).or_insert_with(|| {
                    sources.push(Arc::clone(ep));
                    source_ids.push(*id);
                    sources.len() - 1
                });
                stream.push(Sample {
                    transition: ep.tracks[agent][t],
                    source,
                    t,
                    her_relabelled: false,
                    cer_changed: false,
                });
            }
            streams.push(stream);
        }
        Ok(Minibatch {
            streams,
            sources,
            source_ids,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub transition: Transition,
    /// Index into `Minibatch::sources`.
    pub source: usize,
    /// Time index inside the source track.
    pub t: usize,
    pub her_relabelled: bool,
    pub cer_changed: bool,
}

/// Index-paired samples, one stream per agent, plus shared handles on the
/// episodes they came from.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub streams: Vec<Vec<Sample>>,
    pub sources: Vec<Arc<PairedEpisode>>,
    pub source_ids: Vec<u64>,
}

impl Minibatch {
    pub fn size(&self) -> usize {
        self.streams.first().map_or(0, Vec::len)
    }

    pub fn agents(&self) -> usize {
        self.streams.len()
    }

    pub fn total_samples(&self) -> usize {
        self.streams.iter().map(Vec::len).sum()
    }

    pub fn rewards(&self, agent: usize) -> Vec<f64> {
        self.streams[agent].iter().map(|s| s.transition.reward).collect()
    }

    pub fn states(&self, agent: usize) -> Vec<Vec2> {
        self.streams[agent].iter().map(|s| s.transition.state).collect()
    }
}

/// Hindsight relabelling with the "future" strategy.
///
/// For a sample at time index `t` of a track with `T` transitions the
/// candidate goals are the achieved goals of states `t+1 ..= T-1` (state `k`
/// being the start state of transition `k`). The last transition has no
/// candidate and is never relabelled.
pub fn her_relabel<R: Rng + ?Sized>(
    batch: &mut Minibatch,
    p_future: f64,
    threshold: f64,
    rng: &mut R,
) -> Result<()> {
    for (agent, stream) in batch.streams.iter_mut().enumerate() {
        for sample in stream.iter_mut() {
            let track = batch
                .sources
                .get(sample.source)
                .and_then(|ep| ep.tracks.get(agent))
                .ok_or_else(|| Error::Internal("sample points at a missing track".into()))?;
            if track.get(sample.t) != Some(&sample.transition) && !sample.her_relabelled {
                return Err(Error::Internal(format!(
                    "sample at t={} does not match its source episode",
                    sample.t
                )));
            }
            if !(rng.random::<f64>() < p_future) {
                continue;
            }
            let horizon = track.len();
            if sample.t + 2 > horizon {
                continue;
            }
            let k = rng.random_range(sample.t + 1..horizon);
            let goal = track[k - 1].achieved_next;
            let goal_spec = GoalSpec {
                target: goal,
                threshold,
            };
            sample.transition.goal = goal;
            sample.transition.reward = env::reward(sample.transition.achieved_next, &goal_spec);
            sample.her_relabelled = true;
        }
    }
    Ok(())
}

/// Competitive relabelling between stream 0 (A) and stream 1 (B). Returns
/// the number of transitions, across both streams, whose reward changed.
///
/// Pairs are found through a uniform grid with cell size `threshold`, so
/// only the 3×3 neighbourhood of each A state is scanned.
pub fn cer_relabel(batch: &mut Minibatch, threshold: f64) -> Result<usize> {
    if batch.agents() != 2 {
        return Err(Error::Config(format!(
            "competitive relabelling needs two agent streams, batch has {}",
            batch.agents()
        )));
    }
    let cell = |p: Vec2| -> (i64, i64) {
        (
            (p.x / threshold).floor() as i64,
            (p.y / threshold).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (j, s) in batch.streams[1].iter().enumerate() {
        grid.entry(cell(s.transition.state)).or_default().push(j);
    }
    let mut bonus = vec![0u32; batch.streams[1].len()];
    let mut penalised = vec![false; batch.streams[0].len()];
    for (i, a) in batch.streams[0].iter().enumerate() {
        let pa = a.transition.state;
        let (cx, cy) = cell(pa);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else {
                    continue;
                };
                for &j in bucket {
                    if pa.dist(batch.streams[1][j].transition.state) < threshold {
                        penalised[i] = true;
                        bonus[j] += 1;
                    }
                }
            }
        }
    }
    let mut changed = 0;
    for (s, &hit) in batch.streams[0].iter_mut().zip(&penalised) {
        if hit {
            s.transition.reward -= 1.0;
            s.cer_changed = true;
            changed += 1;
        }
    }
    for (s, &n) in batch.streams[1].iter_mut().zip(&bonus) {
        if n > 0 {
            s.transition.reward += f64::from(n);
            s.cer_changed = true;
            changed += 1;
        }
    }
    Ok(changed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelabelConfig {
    pub her: bool,
    pub cer: bool,
    pub p_future: f64,
    pub threshold: f64,
}

/// Hindsight first, then competitive relabelling on the resulting rewards.
pub fn relabel_pipeline<R: Rng + ?Sized>(
    batch: &mut Minibatch,
    config: &RelabelConfig,
    rng: &mut R,
) -> Result<usize> {
    if config.her {
        her_relabel(batch, config.p_future, config.threshold, rng)?;
    }
    if config.cer {
        cer_relabel(batch, config.threshold)
    } else {
        Ok(0)
    }
}

/// Writes the store for offline inspection: a text header
/// (`cerlab-replay v1 <episodes> <agents>`, one line of track lengths per
/// episode, `end`), then every transition as 11 little-endian `f64`s
/// (`sx sy ax ay gx gy r nx ny agx agy`), episode by episode, track by track.
pub fn write_dump<W: Write>(store: &ReplayStore, out: &mut W) -> Result<()> {
    let agents = store.episodes().next().map_or(0, |e| e.agents());
    writeln!(out, "cerlab-replay v1 {} {agents}", store.len_episodes())?;
    for (id, ep) in store.ids().into_iter().zip(store.episodes()) {
        let lens: Vec<String> = ep.tracks.iter().map(|t| t.len().to_string()).collect();
        writeln!(out, "{id} {}", lens.join(" "))?;
    }
    writeln!(out, "end")?;
    for ep in store.episodes() {
        for track in &ep.tracks {
            for tr in track {
                for v in tr.to_reals() {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

/// Reads a dump back as `(episode id, episode)` pairs.
pub fn read_dump<R: BufRead>(input: &mut R) -> Result<Vec<(u64, PairedEpisode)>> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let head: Vec<&str> = line.split_whitespace().collect();
    if head.len() != 4 || head[0] != "cerlab-replay" || head[1] != "v1" {
        return Err(Error::Parse(format!("bad replay dump header `{}`", line.trim())));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::Parse(format!("`{s}`: {e}")))
    };
    let n = parse(head[2])?;
    let mut layout = Vec::with_capacity(n);
    for _ in 0..n {
        line.clear();
        input.read_line(&mut line)?;
        let mut fields = line.split_whitespace();
        let id = fields
            .next()
            .ok_or_else(|| Error::Parse("missing episode id".into()))?
            .parse::<u64>()
            .map_err(|e| Error::Parse(e.to_string()))?;
        let lens = fields.map(parse).collect::<Result<Vec<_>>>()?;
        layout.push((id, lens));
    }
    line.clear();
    input.read_line(&mut line)?;
    if line.trim() != "end" {
        return Err(Error::Parse("replay dump header is not terminated".into()));
    }
    let mut buf = [0u8; 8];
    let mut reals = [0.0; Transition::DUMP_WIDTH];
    let mut out = Vec::with_capacity(n);
    for (id, lens) in layout {
        let mut tracks = Vec::with_capacity(lens.len());
        for len in lens {
            let mut track = Vec::with_capacity(len);
            for _ in 0..len {
                for r in reals.iter_mut() {
                    input.read_exact(&mut buf)?;
                    *r = f64::from_le_bytes(buf);
                }
                track.push(Transition::from_reals(&reals));
            }
            tracks.push(track);
        }
        out.push((id, PairedEpisode { tracks }));
    }
    Ok(out)
}
