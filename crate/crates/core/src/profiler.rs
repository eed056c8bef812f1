//! Core-attention latency profiler.
//!
//! A grid of measured (or synthesized) kernel latencies over query and
//! key/value lengths. Off-grid shapes are predicted by bilinear interpolation
//! over the four surrounding grid points; shapes whose surrounding cell runs at
//! (near) peak throughput are costed from FLOPs and the peak directly.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::cost::CostCoefficients;
use crate::error::{Error, Result};
use crate::model::{ClusterConfig, Tokens};
use crate::num::Scalar;

/// Fraction of peak throughput at which a grid cell counts as saturated.
pub const SATURATION_FRACTION: f64 = 0.98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilerGrid<T: Scalar = f64> {
    pub q_points: Vec<Tokens>,
    pub kv_points: Vec<Tokens>,
    /// Row-major `q_points.len() x kv_points.len()` latencies in seconds.
    pub latency: Vec<T>,
    /// FLOPs per second the kernel reaches at saturation.
    pub peak_throughput: T,
    /// Attention FLOPs per unit of causal work (`alpha`).
    pub flops_per_unit: T,
    pub tile_size: Tokens,
    /// Fixed per-launch cost, charged once per fused kernel.
    pub launch_overhead: T,
}

fn shape_work(n_q: Tokens, n_kv: Tokens) -> u128 {
    let q = n_q as u128;
    let kv = (n_kv as u128).max(q);
    q * (2 * kv - q)
}

impl<T: Scalar> ProfilerGrid<T> {
    pub fn new(
        q_points: Vec<Tokens>,
        kv_points: Vec<Tokens>,
        latency: Vec<T>,
        peak_throughput: T,
        flops_per_unit: T,
        tile_size: Tokens,
    ) -> Result<Self> {
        let mut grid = Self {
            q_points,
            kv_points,
            latency,
            peak_throughput,
            flops_per_unit,
            tile_size,
            launch_overhead: T::zero(),
        };
        grid.validate()?;
        let corner = grid.latency[0] - grid.analytic_time(grid.q_points[0], grid.kv_points[0]);
        grid.launch_overhead = corner.max(T::zero());
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        let (nq, nkv) = (self.q_points.len(), self.kv_points.len());
        if nq < 2 || nkv < 2 {
            return Err(Error::config("profiler grid needs at least two points per axis"));
        }
        if self.latency.len() != nq * nkv {
            return Err(Error::config(format!(
                "latency matrix has {} entries, expected {}",
                self.latency.len(),
                nq * nkv
            )));
        }
        let sorted = |p: &[Tokens]| p.windows(2).all(|w| w[0] < w[1]) && p[0] >= 1;
        if !sorted(&self.q_points) || !sorted(&self.kv_points) {
            return Err(Error::config("grid points must be positive and strictly increasing"));
        }
        if self.latency.iter().any(|&l| !(l > T::zero())) {
            return Err(Error::config("grid latencies must be strictly positive"));
        }
        for i in 0..nq {
            for j in 0..nkv {
                let l = self.at(i, j);
                if (i + 1 < nq && self.at(i + 1, j) < l) || (j + 1 < nkv && self.at(i, j + 1) < l) {
                    return Err(Error::config(format!(
                        "grid latency decreases after ({}, {})",
                        self.q_points[i], self.kv_points[j]
                    )));
                }
            }
        }
        if !(self.peak_throughput > T::zero()) {
            return Err(Error::config("peak throughput must be > 0"));
        }
        Ok(())
    }

    fn at(&self, i: usize, j: usize) -> T {
        self.latency[i * self.kv_points.len() + j]
    }

    fn analytic_time(&self, n_q: Tokens, n_kv: Tokens) -> T {
        self.flops_per_unit * T::of_u128(shape_work(n_q, n_kv)) / self.peak_throughput
    }

    fn saturated(&self, i: usize, j: usize) -> bool {
        let flops = self.flops_per_unit * T::of_u128(shape_work(self.q_points[i], self.kv_points[j]));
        flops / self.at(i, j) >= T::of_f64(SATURATION_FRACTION) * self.peak_throughput
    }

    /// Index of the grid cell containing `x` along `points`, or `None` past the end.
    fn cell(points: &[Tokens], x: Tokens) -> Option<usize> {
        if x > *points.last().expect("validated non-empty") {
            return None;
        }
        let idx = points.partition_point(|&p| p <= x);
        Some(idx.saturating_sub(1).min(points.len() - 2))
    }

    /// Predicted latency of one core-attention task with `n_q` query tokens and
    /// `n_kv` key/value tokens. Query lengths below one tile are padded.
    pub fn lookup(&self, n_q: Tokens, n_kv: Tokens) -> Result<T> {
        if n_q == 0 || n_kv == 0 {
            return Err(Error::domain("profile lookup needs n_q, n_kv >= 1"));
        }
        let n_q = n_q.max(self.tile_size);
        let n_kv = n_kv.max(n_q);
        let (last_q, last_kv) = (self.q_points.len() - 1, self.kv_points.len() - 1);

        let (Some(i), Some(j)) = (Self::cell(&self.q_points, n_q), Self::cell(&self.kv_points, n_kv)) else {
            // Beyond the measured range only the saturated edge can be extended.
            let i = Self::cell(&self.q_points, n_q).unwrap_or(last_q - 1);
            let j = Self::cell(&self.kv_points, n_kv).unwrap_or(last_kv - 1);
            if self.saturated(i + 1, j + 1) {
                return Ok(self.launch_overhead + self.analytic_time(n_q, n_kv));
            }
            return Err(Error::Extrapolation { n_q, n_kv });
        };

        if (0..2).all(|di| (0..2).all(|dj| self.saturated(i + di, j + dj))) {
            return Ok(self.launch_overhead + self.analytic_time(n_q, n_kv));
        }

        let clamp = |x: Tokens, lo: Tokens, hi: Tokens| x.clamp(lo, hi);
        let (q0, q1) = (self.q_points[i], self.q_points[i + 1]);
        let (k0, k1) = (self.kv_points[j], self.kv_points[j + 1]);
        let tq = T::of_u64(clamp(n_q, q0, q1) - q0) / T::of_u64(q1 - q0);
        let tk = T::of_u64(clamp(n_kv, k0, k1) - k0) / T::of_u64(k1 - k0);
        let one = T::one();
        let top = self.at(i, j) * (one - tk) + self.at(i, j + 1) * tk;
        let bottom = self.at(i + 1, j) * (one - tk) + self.at(i + 1, j + 1) * tk;
        Ok(top * (one - tq) + bottom * tq)
    }

    /// Latency of one fused kernel over many tasks, given their padded work
    /// units: one launch plus every task at peak throughput.
    pub fn fused_time(&self, padded_work: impl IntoIterator<Item = u128>) -> T {
        let units: u128 = padded_work.into_iter().sum();
        if units == 0 {
            return T::zero();
        }
        self.launch_overhead + self.flops_per_unit * T::of_u128(units) / self.peak_throughput
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["q", "kv", "latency_s"])?;
        for (i, &q) in self.q_points.iter().enumerate() {
            for (j, &kv) in self.kv_points.iter().enumerate() {
                w.write_record([q.to_string(), kv.to_string(), format!("{:e}", self.at(i, j).to_f64_lossy())])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `(q, kv, latency_s)` grid. Every `(q, kv)` pair must be present.
    pub fn read_csv<R: Read>(reader: R, peak_throughput: T, flops_per_unit: T, tile_size: Tokens) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            q: Tokens,
            kv: Tokens,
            latency_s: f64,
        }
        let mut rows = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let row: Row = row?;
            rows.push(row);
        }
        let mut q_points: Vec<Tokens> = rows.iter().map(|r| r.q).collect();
        let mut kv_points: Vec<Tokens> = rows.iter().map(|r| r.kv).collect();
        q_points.sort_unstable();
        q_points.dedup();
        kv_points.sort_unstable();
        kv_points.dedup();
        let mut latency = vec![T::nan(); q_points.len() * kv_points.len()];
        for r in &rows {
            let i = q_points.binary_search(&r.q).expect("collected above");
            let j = kv_points.binary_search(&r.kv).expect("collected above");
            latency[i * kv_points.len() + j] = T::of_f64(r.latency_s);
        }
        if latency.iter().any(|l| l.is_nan()) {
            return Err(Error::config("profiler CSV does not cover the full q x kv grid"));
        }
        Self::new(q_points, kv_points, latency, peak_throughput, flops_per_unit, tile_size)
    }
}

/// Geometric grid axis from one tile to `max`, with `steps_per_octave` points
/// per doubling, each rounded to a tile multiple.
pub fn grid_axis(tile: Tokens, max: Tokens, steps_per_octave: u32) -> Vec<Tokens> {
    let mut points = vec![tile];
    let ratio = 2f64.powf(1.0 / steps_per_octave as f64);
    let mut x = tile as f64;
    while *points.last().expect("non-empty") < max {
        x *= ratio;
        let p = (((x / tile as f64).round() as Tokens) * tile).min(max);
        if p > *points.last().expect("non-empty") {
            points.push(p);
        }
    }
    points
}

/// Synthesizes a grid from the analytical model: a fixed launch overhead plus
/// attention FLOPs at `mfu_attention x peak`. Small shapes are
/// overhead-dominated, which reproduces the throughput dip of short shards.
pub fn synth_grid<T: Scalar>(coeff: &CostCoefficients, cluster: &ClusterConfig, max_tokens: Tokens) -> ProfilerGrid<T> {
    let tile = cluster.tile_size;
    let axis = grid_axis(tile, max_tokens.max(2 * tile), 4);
    let peak = T::of_f64(cluster.mfu_attention * cluster.device_peak_flops());
    let alpha = T::of_u64(coeff.alpha_ca);
    let overhead = T::of_f64(cluster.kernel_overhead_s);
    let mut latency = Vec::with_capacity(axis.len() * axis.len());
    for &q in &axis {
        for &kv in &axis {
            latency.push(overhead + alpha * T::of_u128(shape_work(q, kv)) / peak);
        }
    }
    ProfilerGrid {
        q_points: axis.clone(),
        kv_points: axis,
        latency,
        peak_throughput: peak,
        flops_per_unit: alpha,
        tile_size: tile,
        launch_overhead: overhead,
    }
}
