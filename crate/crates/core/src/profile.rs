//! Profiled decode and prefill latencies.
//!
//! TPOT is a grid over (batch size, context length) with bilinear
//! interpolation, clamped at the grid edges. Prefill time is piecewise-linear
//! in the number of batch tokens, extrapolated along the last segment.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpotTable {
    pub batch_sizes: Vec<f64>,
    pub context_lens: Vec<f64>,
    /// `seconds[i][j]`: per-token latency at `batch_sizes[i]`, `context_lens[j]`.
    pub seconds: Vec<Vec<f64>>,
}

/// Index of the grid cell containing `x` and the interpolation weight.
fn locate(grid: &[f64], x: f64) -> (usize, f64) {
    if grid.len() == 1 || x <= grid[0] {
        return (0, 0.0);
    }
    let last = grid.len() - 1;
    if x >= grid[last] {
        return (last - 1, 1.0);
    }
    let i = grid.partition_point(|&g| g <= x) - 1;
    (i, (x - grid[i]) / (grid[i + 1] - grid[i]))
}

impl TpotTable {
    pub fn constant(seconds: f64) -> Self {
        TpotTable {
            batch_sizes: vec![1.0],
            context_lens: vec![1.0],
            seconds: vec![vec![seconds]],
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("tpot table: {m}")));
        if self.batch_sizes.is_empty() || self.context_lens.is_empty() {
            return bad("empty grid");
        }
        let increasing = |g: &[f64]| g.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.batch_sizes) || !increasing(&self.context_lens) {
            return bad("grid axes must be strictly increasing");
        }
        if self.seconds.len() != self.batch_sizes.len()
            || self.seconds.iter().any(|row| row.len() != self.context_lens.len())
        {
            return bad("value grid shape does not match the axes");
        }
        if self.seconds.iter().flatten().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("latencies must be positive");
        }
        for row in &self.seconds {
            if row.windows(2).any(|w| w[0] > w[1]) {
                return bad("latency must be non-decreasing in context length");
            }
        }
        for j in 0..self.context_lens.len() {
            if self.seconds.windows(2).any(|w| w[0][j] > w[1][j]) {
                return bad("latency must be non-decreasing in batch size");
            }
        }
        Ok(())
    }

    /// Latency of one decode step at this batch size and context length.
    pub fn tpot(&self, batch: f64, context: f64) -> f64 {
        let (i, u) = locate(&self.batch_sizes, batch);
        let (j, v) = locate(&self.context_lens, context);
        let at = |i: usize, j: usize| {
            self.seconds[i.min(self.batch_sizes.len() - 1)][j.min(self.context_lens.len() - 1)]
        };
        let lo = at(i, j) * (1.0 - v) + at(i, j + 1) * v;
        let hi = at(i + 1, j) * (1.0 - v) + at(i + 1, j + 1) * v;
        lo * (1.0 - u) + hi * u
    }

    /// `sum_{k < ticks} tpot(batch, context + k)`, exact up to rounding.
    ///
    /// For a fixed batch the interpolant is linear in context inside each
    /// grid cell and flat outside the grid, so each cell contributes an
    /// arithmetic series.
    pub fn sum_over_context(&self, batch: f64, context: f64, ticks: u64) -> f64 {
        if ticks == 0 {
            return 0.0;
        }
        let (i, u) = locate(&self.batch_sizes, batch);
        let rows = self.batch_sizes.len();
        let row: Vec<f64> = (0..self.context_lens.len())
            .map(|j| self.seconds[i][j] * (1.0 - u) + self.seconds[(i + 1).min(rows - 1)][j] * u)
            .collect();
        let grid = &self.context_lens;

        let mut total = 0.0;
        let mut k = 0u64;
        while k < ticks {
            let c = context + k as f64;
            let remaining = ticks - k;
            // number of consecutive ticks whose context falls in the current piece
            let (n, value_at) = if c < grid[0] {
                let n = ((grid[0] - c).ceil() as u64).clamp(1, remaining);
                (n, None)
            } else if c >= grid[grid.len() - 1] {
                (remaining, None)
            } else {
                let j = grid.partition_point(|&g| g <= c) - 1;
                let n = ((grid[j + 1] - c).ceil() as u64).clamp(1, remaining);
                let slope = (row[j + 1] - row[j]) / (grid[j + 1] - grid[j]);
                (n, Some((row[j] + slope * (c - grid[j]), slope)))
            };
            total += match value_at {
                None => {
                    let flat = if c < grid[0] { row[0] } else { row[row.len() - 1] };
                    flat * n as f64
                }
                Some((first, slope)) => {
                    let nf = n as f64;
                    first * nf + slope * nf * (nf - 1.0) / 2.0
                }
            };
            k += n;
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    /// `(x, y)` knots with strictly increasing `x`.
    pub points: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    fn validate(&self, what: &str) -> Result<()> {
        if self.points.is_empty() || self.points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config(format!("{what}: knots must be non-empty with increasing x")));
        }
        if self.points.iter().any(|p| p.1 < 0.0 || !p.1.is_finite()) {
            return Err(Error::Config(format!("{what}: values must be non-negative")));
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> f64 {
        let p = &self.points;
        if p.len() == 1 {
            return p[0].1 * if p[0].0 > 0.0 { x / p[0].0 } else { 1.0 };
        }
        let seg = match p.partition_point(|q| q.0 <= x) {
            0 => 0,
            k if k >= p.len() => p.len() - 2,
            k => k - 1,
        };
        let (x0, y0) = p[seg];
        let (x1, y1) = p[seg + 1];
        (y0 + (y1 - y0) * (x - x0) / (x1 - x0)).max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub tpot: TpotTable,
    /// Seconds to prefill a batch of the given token count.
    pub prefill: PiecewiseLinear,
    /// Dollars per GPU per second.
    pub rho: f64,
    /// GPUs per decode actor, uniform across actors.
    pub gpus_per_actor: u32,
}

impl LatencyProfile {
    pub fn validate(&self) -> Result<()> {
        self.tpot.validate()?;
        self.prefill.validate("prefill")?;
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if self.gpus_per_actor == 0 {
            return Err(Error::Config("gpus_per_actor must be at least 1".into()));
        }
        Ok(())
    }

    pub fn tpot(&self, batch: usize, context: usize) -> f64 {
        self.tpot.tpot(batch as f64, context as f64)
    }

    pub fn prefill_time(&self, batch_tokens: u64) -> f64 {
        if batch_tokens == 0 {
            return 0.0;
        }
        self.prefill.eval(batch_tokens as f64)
    }

    /// Constant-rate profile, mostly for tests.
    pub fn constant(tpot: f64, rho: f64, gpus_per_actor: u32) -> Self {
        LatencyProfile {
            tpot: TpotTable::constant(tpot),
            prefill: PiecewiseLinear {
                points: vec![(0.0, 0.0), (1.0, 0.0)],
            },
            rho,
            gpus_per_actor,
        }
    }

    /// A 3B-class policy on two 48 GB GPUs per actor: decode is
    /// memory-bound at small batches and grows with batch and context.
    pub fn reference() -> Self {
        let batch_sizes = vec![1.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0];
        let context_lens = vec![128.0, 512.0, 1024.0, 2048.0, 3072.0];
        let seconds = batch_sizes
            .iter()
            .map(|&b| {
                context_lens
                    .iter()
                    .map(|&c| 0.011 + 4.0e-5 * b + 1.25e-8 * b * c)
                    .collect()
            })
            .collect();
        LatencyProfile {
            tpot: TpotTable {
                batch_sizes,
                context_lens,
                seconds,
            },
            prefill: PiecewiseLinear {
                points: vec![(0.0, 0.03), (4096.0, 0.23), (65536.0, 3.1), (262144.0, 12.6)],
            },
            rho: 5.0e-4,
            gpus_per_actor: 2,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let profile: LatencyProfile = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.line(), e))?
        } else {
            toml::from_str(&text).map_err(|e| Error::format(path, line_of(&text, e.span()), e.message()))?
        };
        profile.validate()?;
        Ok(profile)
    }
}

pub(crate) fn line_of(text: &str, span: Option<std::ops::Range<usize>>) -> usize {
    span.map_or(0, |s| text.as_bytes()[..s.start.min(text.len())].iter().filter(|&&b| b == b'\n').count() + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_grid_points_and_midpoints() {
        let t = TpotTable {
            batch_sizes: vec![1.0, 3.0],
            context_lens: vec![10.0, 20.0],
            seconds: vec![vec![1.0, 2.0], vec![3.0, 5.0]],
        };
        assert_eq!(t.tpot(1.0, 10.0), 1.0);
        assert_eq!(t.tpot(3.0, 20.0), 5.0);
        assert_eq!(t.tpot(2.0, 15.0), (1.0 + 2.0 + 3.0 + 5.0) / 4.0);
        // clamped outside
        assert_eq!(t.tpot(0.0, 0.0), 1.0);
        assert_eq!(t.tpot(100.0, 100.0), 5.0);
    }

    #[test]
    fn context_sum_matches_tick_loop() {
        let p = LatencyProfile::reference();
        for &(b, c, n) in &[(5.0, 3.0, 4000u64), (64.0, 500.0, 900), (300.0, 2047.5, 3), (1.0, 3072.0, 10), (17.0, 128.0, 1)] {
            let naive: f64 = (0..n).map(|k| p.tpot.tpot(b, c + k as f64)).sum();
            let fast = p.tpot.sum_over_context(b, c, n);
            assert!((naive - fast).abs() <= 1e-9 * naive, "{b} {c} {n}: {naive} vs {fast}");
        }
        assert_eq!(p.tpot.sum_over_context(4.0, 4.0, 0), 0.0);
    }

    #[test]
    fn reference_profile_is_valid_and_monotone() {
        let p = LatencyProfile::reference();
        p.validate().unwrap();
        assert!(p.tpot(64, 1024) < p.tpot(128, 1024));
        assert!(p.tpot(64, 512) < p.tpot(64, 2048));
        assert!(p.prefill_time(1000) < p.prefill_time(100_000));
        assert_eq!(p.prefill_time(0), 0.0);
    }

    #[test]
    fn rejects_decreasing_table() {
        let mut p = LatencyProfile::reference();
        p.tpot.seconds[3][2] = 1e-6;
        assert!(p.validate().is_err());
        let mut q = LatencyProfile::reference();
        q.rho = 0.0;
        assert!(q.validate().is_err());
    }

    #[test]
    fn piecewise_extrapolates() {
        let f = PiecewiseLinear {
            points: vec![(0.0, 1.0), (10.0, 2.0)],
        };
        assert_eq!(f.eval(5.0), 1.5);
        assert_eq!(f.eval(20.0), 3.0);
    }
}
