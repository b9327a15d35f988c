//! Effect ratio, learning curves and state-visitation grids.

use std::io::{BufRead, Write};

use crate::env::{Rect, Vec2};
use crate::error::{Error, Result};

/// Fraction of minibatch samples whose reward competitive relabelling
/// changed.
pub fn effect_ratio(n_changed: usize, batch_total: usize) -> Result<f64> {
    if batch_total == 0 {
        return Err(Error::Config("effect ratio needs a non-empty minibatch".into()));
    }
    Ok(n_changed as f64 / batch_total as f64)
}

/// Visit counts over a regular grid covering a rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitGrid {
    pub cell: f64,
    pub origin: Vec2,
    pub nx: usize,
    pub ny: usize,
    /// Row-major, row 0 at `origin.y`.
    pub counts: Vec<u64>,
    /// Points that fell outside the rectangle and were counted in the
    /// nearest boundary cell.
    pub out_of_bounds: u64,
}

impl VisitGrid {
    pub fn new(area: Rect, cell: f64) -> Self {
        let nx = ((area.max.x - area.min.x) / cell).ceil() as usize;
        let ny = ((area.max.y - area.min.y) / cell).ceil() as usize;
        Self {
            cell,
            origin: area.min,
            nx,
            ny,
            counts: vec![0; nx * ny],
            out_of_bounds: 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn cell_of(&self, p: Vec2) -> (usize, usize, bool) {
        let fx = ((p.x - self.origin.x) / self.cell).floor();
        let fy = ((p.y - self.origin.y) / self.cell).floor();
        let ix = fx.clamp(0.0, (self.nx - 1) as f64) as usize;
        let iy = fy.clamp(0.0, (self.ny - 1) as f64) as usize;
        // the far edge of the rectangle belongs to the last cell
        let max_x = self.origin.x + self.nx as f64 * self.cell;
        let max_y = self.origin.y + self.ny as f64 * self.cell;
        let inside = p.x >= self.origin.x && p.x <= max_x && p.y >= self.origin.y && p.y <= max_y;
        (ix, iy, inside)
    }

    pub fn center(&self, ix: usize, iy: usize) -> Vec2 {
        Vec2::new(
            self.origin.x + (ix as f64 + 0.5) * self.cell,
            self.origin.y + (iy as f64 + 0.5) * self.cell,
        )
    }

    pub fn get(&self, ix: usize, iy: usize) -> u64 {
        self.counts[iy * self.nx + ix]
    }

    pub fn accumulate(&mut self, trajectory: &[Vec2]) {
        for &p in trajectory {
            let (ix, iy, inside) = self.cell_of(p);
            if !inside {
                self.out_of_bounds += 1;
            }
            self.counts[iy * self.nx + ix] += 1;
        }
    }

    pub fn same_geometry(&self, other: &VisitGrid) -> bool {
        self.nx == other.nx
            && self.ny == other.ny
            && self.cell == other.cell
            && self.origin == other.origin
    }

    /// Adds another grid's counts.
    pub fn merge(&mut self, other: &VisitGrid) -> Result<()> {
        if !self.same_geometry(other) {
            return Err(Error::Shape("visit grids have different geometry".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.out_of_bounds += other.out_of_bounds;
        Ok(())
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    /// Share of visits whose cell centre lies within `radius` of `point`.
    pub fn mass_within(&self, point: Vec2, radius: f64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let mut near = 0;
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                if self.center(ix, iy).dist(point) <= radius {
                    near += self.get(ix, iy);
                }
            }
        }
        near as f64 / total as f64
    }

    /// Non-empty cells at least as large as all eight neighbours.
    pub fn local_modes(&self) -> Vec<(usize, usize)> {
        let mut modes = Vec::new();
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let c = self.get(ix, iy);
                if c == 0 {
                    continue;
                }
                let mut is_mode = true;
                'scan: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (x, y) = (ix as i64 + dx, iy as i64 + dy);
                        if (dx, dy) == (0, 0)
                            || x < 0
                            || y < 0
                            || x >= self.nx as i64
                            || y >= self.ny as i64
                        {
                            continue;
                        }
                        if self.get(x as usize, y as usize) > c {
                            is_mode = false;
                            break 'scan;
                        }
                    }
                }
                if is_mode {
                    modes.push((ix, iy));
                }
            }
        }
        modes
    }

    /// Plain-text heatmap: a header line `origin_x origin_y cell nx ny`,
    /// then `ny` rows of `nx` space-separated counts, row 0 first.
    pub fn write_text<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(
            out,
            "{} {} {} {} {}",
            self.origin.x, self.origin.y, self.cell, self.nx, self.ny
        )?;
        for row in self.counts.chunks(self.nx) {
            let line: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty heatmap".into()))??;
        let h: Vec<f64> = header
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<_>>()?;
        if h.len() != 5 {
            return Err(Error::Parse(format!("bad heatmap header `{header}`")));
        }
        let (nx, ny) = (h[3] as usize, h[4] as usize);
        let mut counts = Vec::with_capacity(nx * ny);
        for line in lines.take(ny) {
            let line = line?;
            for tok in line.split_whitespace() {
                counts.push(tok.parse::<u64>().map_err(|e| Error::Parse(e.to_string()))?);
            }
        }
        if counts.len() != nx * ny {
            return Err(Error::Parse(format!(
                "heatmap has {} counts, header says {nx}x{ny}",
                counts.len()
            )));
        }
        Ok(Self {
            cell: h[2],
            origin: Vec2::new(h[0], h[1]),
            nx,
            ny,
            counts,
            out_of_bounds: 0,
        })
    }

    /// Binary portable graymap, brightest cell = most visits, top row = max y.
    pub fn write_pgm<W: Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.nx, self.ny)?;
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        for iy in (0..self.ny).rev() {
            let row: Vec<u8> = (0..self.nx)
                .map(|ix| (255.0 * self.get(ix, iy) as f64 / max).round() as u8)
                .collect();
            out.write_all(&row)?;
        }
        Ok(())
    }
}

/// Per-cell difference of visit frequencies, `freq(a) - freq(b)`.
pub fn grid_diff(a: &VisitGrid, b: &VisitGrid) -> Result<Vec<f64>> {
    if !a.same_geometry(b) {
        return Err(Error::Shape("visit grids have different geometry".into()));
    }
    Ok(a.frequencies()
        .iter()
        .zip(b.frequencies())
        .map(|(x, y)| x - y)
        .collect())
}

/// One row of `curve.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub success_a: f64,
    /// Absent for single-agent runs.
    pub success_b: Option<f64>,
    pub effect_ratio: f64,
    pub n_episodes: usize,
    pub n_updates: usize,
    pub wall_s: f64,
}

pub const CURVE_HEADER: &str = "epoch,success_A,success_B,effect_ratio,n_episodes,n_updates,wall_s";

impl EpochRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.success_a,
            self.success_b.map_or(String::new(), |v| v.to_string()),
            self.effect_ratio,
            self.n_episodes,
            self.n_updates,
            self.wall_s
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Parse(format!("curve row has {} fields: `{line}`", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("`{s}`: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("`{s}`: {e}")));
        Ok(Self {
            epoch: int(f[0])?,
            success_a: num(f[1])?,
            success_b: if f[2].is_empty() { None } else { Some(num(f[2])?) },
            effect_ratio: num(f[3])?,
            n_episodes: int(f[4])?,
            n_updates: int(f[5])?,
            wall_s: num(f[6])?,
        })
    }
}

pub fn write_curve<W: Write>(records: &[EpochRecord], out: &mut W) -> Result<()> {
    writeln!(out, "{CURVE_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.to_csv_row())?;
    }
    Ok(())
}

pub fn read_curve<R: BufRead>(input: &mut R) -> Result<Vec<EpochRecord>> {
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == CURVE_HEADER => {}
        _ => return Err(Error::Parse("missing curve.csv header".into())),
    }
    lines
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| EpochRecord::from_csv_row(&l?))
        .collect()
}

/// Sample mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
