//! The metric operator L = (I - αΔ)^c and its inverse K, applied as
//! Fourier multipliers on the periodic grid.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{GridDesc, VectorField};
use crate::par;

/// Default smoothness weight α of the metric.
pub const DEFAULT_ALPHA: f64 = 3.0;
/// Default exponent c of the metric.
pub const DEFAULT_POWER: u32 = 3;

/// Columns gathered per task when transforming along a strided axis.
const COLUMN_GROUP: usize = 32;

/// Precomputed multiplier table Λ(k) = (1 + α λ_Δ(k))^c plus FFT plans.
#[derive(Clone)]
pub struct FluidKernel {
    grid: GridDesc,
    alpha: f64,
    power: u32,
    lambda: Vec<f64>,
    inv_lambda: Vec<f64>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl fmt::Debug for FluidKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FluidKernel")
            .field("grid", &self.grid)
            .field("alpha", &self.alpha)
            .field("power", &self.power)
            .finish_non_exhaustive()
    }
}

/// Eigenvalue of the negative discrete Laplacian for the Fourier mode `k`.
pub fn laplacian_eigenvalue(grid: &GridDesc, k: &[usize]) -> f64 {
    k.iter()
        .zip(grid.sizes())
        .zip(grid.spacing())
        .map(|((&kj, &n), &h)| {
            let w = 2.0 * std::f64::consts::PI * kj as f64 / n as f64;
            2.0 * (1.0 - w.cos()) / (h * h)
        })
        .sum()
}

impl FluidKernel {
    pub fn new(grid: &GridDesc, alpha: f64, power: u32) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidParameter(format!("alpha must be > 0, got {alpha}")));
        }
        if power < 1 {
            return Err(Error::InvalidParameter("power must be >= 1".into()));
        }
        let lambda = par::map_index(grid.len(), |i| {
            let k = grid.coords(i);
            (1.0 + alpha * laplacian_eigenvalue(grid, &k)).powi(power as i32)
        });
        let inv_lambda = lambda.iter().map(|l| 1.0 / l).collect();
        let mut planner = FftPlanner::new();
        let forward = grid.sizes().iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inverse = grid.sizes().iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Ok(FluidKernel {
            grid: grid.clone(),
            alpha,
            power,
            lambda,
            inv_lambda,
            forward,
            inverse,
        })
    }

    pub fn grid(&self) -> &GridDesc {
        &self.grid
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn power(&self) -> u32 {
        self.power
    }

    /// Λ(k) in the grid's flat frequency order.
    pub fn multipliers(&self) -> &[f64] {
        &self.lambda
    }

    pub fn multiplier_at(&self, k: &[usize]) -> f64 {
        self.lambda[self.grid.index(k)]
    }

    /// m = L v.
    pub fn apply_l(&self, v: &VectorField) -> Result<VectorField> {
        self.grid.ensure_same(v.grid())?;
        Ok(VectorField::from_raw(
            self.grid.clone(),
            self.apply_components(v.components(), &self.lambda),
        ))
    }

    /// v = K m.
    pub fn apply_k(&self, m: &VectorField) -> Result<VectorField> {
        self.grid.ensure_same(m.grid())?;
        Ok(VectorField::from_raw(
            self.grid.clone(),
            self.apply_components(m.components(), &self.inv_lambda),
        ))
    }

    pub(crate) fn apply_l_raw(&self, comps: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.apply_components(comps, &self.lambda)
    }

    pub(crate) fn apply_k_raw(&self, comps: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.apply_components(comps, &self.inv_lambda)
    }

    /// Applies a real, k ↦ -k symmetric multiplier. Two real components ride
    /// in one complex transform (real and imaginary parts), which the
    /// symmetry keeps from mixing.
    fn apply_components(&self, comps: &[Vec<f64>], mult: &[f64]) -> Vec<Vec<f64>> {
        let n = self.grid.len();
        let scale = 1.0 / n as f64;
        let mut out = Vec::with_capacity(comps.len());
        for pair in comps.chunks(2) {
            let mut buf: Vec<Complex<f64>> = match pair {
                [a, b] => a.iter().zip(b).map(|(&x, &y)| Complex::new(x, y)).collect(),
                [a] => a.iter().map(|&x| Complex::new(x, 0.0)).collect(),
                _ => unreachable!(),
            };
            fft_nd(&self.grid, &mut buf, &self.forward);
            par::for_each_chunk_mut(&mut buf, par::REDUCE_CHUNK, |c, chunk| {
                let base = c * par::REDUCE_CHUNK;
                for (i, z) in chunk.iter_mut().enumerate() {
                    *z *= mult[base + i] * scale;
                }
            });
            fft_nd(&self.grid, &mut buf, &self.inverse);
            out.push(buf.iter().map(|z| z.re).collect());
            if pair.len() == 2 {
                out.push(buf.iter().map(|z| z.im).collect());
            }
        }
        out
    }
}

/// In-place unnormalized multidimensional DFT, one axis at a time.
pub(crate) fn fft_nd(grid: &GridDesc, buf: &mut [Complex<f64>], plans: &[Arc<dyn Fft<f64>>]) {
    for (axis, plan) in plans.iter().enumerate() {
        let n = grid.sizes()[axis];
        let stride = grid.strides()[axis];
        if stride == 1 {
            let rows = (buf.len() / n).max(1);
            let per_task = n * COLUMN_GROUP.min(rows);
            par::for_each_chunk_mut(buf, per_task, |_, c| plan.process(c));
            continue;
        }
        let block = n * stride;
        let columns = buf.len() / n;
        let groups = columns.div_ceil(COLUMN_GROUP);
        let src: &[Complex<f64>] = buf;
        let column_start = |col: usize| (col / stride) * block + col % stride;
        let done = par::map_index(groups, |g| {
            let first = g * COLUMN_GROUP;
            let last = (first + COLUMN_GROUP).min(columns);
            let mut tmp = Vec::with_capacity((last - first) * n);
            for col in first..last {
                let s = column_start(col);
                tmp.extend((0..n).map(|k| src[s + k * stride]));
            }
            plan.process(&mut tmp);
            tmp
        });
        for (g, tmp) in done.into_iter().enumerate() {
            for (c, line) in tmp.chunks(n).enumerate() {
                let s = column_start(g * COLUMN_GROUP + c);
                for (k, z) in line.iter().enumerate() {
                    buf[s + k * stride] = *z;
                }
            }
        }
    }
}

/// Builds the kernel; alias kept for callers that think in operations.
pub fn build_kernel(grid: &GridDesc, alpha: f64, power: u32) -> Result<FluidKernel> {
    FluidKernel::new(grid, alpha, power)
}
