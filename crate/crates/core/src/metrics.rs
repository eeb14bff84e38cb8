//! Scalar objectives: image dissimilarities, overlap scores, the metric
//! regularizers and the assembled registration / joint energies.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{propagate_landmarks, shoot_trajectory, GeodesicPath, ShootingConfig, Trajectory};
use crate::grid::{
    mask_image, mask_velocity, sample_displaced, voxel_and_offset, GridDesc,
    LandmarkSet, MaskImage, ScalarImage, VectorField,
};
use crate::operators::FluidKernel;
use crate::par;

/// Intensities are clamped into [CE_EPS, 1 − CE_EPS] before taking logs.
pub const CE_EPS: f64 = 1e-6;

/// Default weight of the segmentation term in the joint loss.
pub const DEFAULT_GAMMA: f64 = 0.5;

/// Which sign convention the mutual-information bound uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmiSign {
    /// I = −½ log det Σ: more predictable target, larger bound.
    #[default]
    LowerBound,
    /// I = +½ log det Σ, the opposite sign.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmiConfig {
    pub radius: usize,
    pub stride: usize,
    pub epsilon: f64,
    pub batch: usize,
    pub sign: RmiSign,
}

impl Default for RmiConfig {
    fn default() -> Self {
        RmiConfig {
            radius: 1,
            stride: 2,
            epsilon: 1e-6,
            batch: 4,
            sign: RmiSign::LowerBound,
        }
    }
}

impl RmiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 || self.stride < 1 || self.batch < 1 {
            return Err(Error::InvalidParameter(
                "rmi radius, stride and batch must be >= 1".into(),
            ));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("rmi epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Breakdown of the joint loss: total = dist + reg + gamma · seg.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub dist: f64,
    pub reg: f64,
    pub seg: f64,
    pub gamma: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistKind {
    #[default]
    Rmi,
    Ssd,
}

impl std::str::FromStr for DistKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmi" => Ok(DistKind::Rmi),
            "ssd" => Ok(DistKind::Ssd),
            other => Err(Error::InvalidParameter(format!("unknown dist '{other}'"))),
        }
    }
}

/// Where the appearance mask is applied to the source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFrame {
    /// warp(S ⊙ (1 − U), ψ) against T ⊙ (1 − U).
    #[default]
    Source,
    /// warp(S, ψ) ⊙ (1 − U) against T ⊙ (1 − U): the hole stays put.
    Target,
}

impl std::str::FromStr for MaskFrame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(MaskFrame::Source),
            "target" => Ok(MaskFrame::Target),
            other => Err(Error::InvalidParameter(format!("unknown mask frame '{other}'"))),
        }
    }
}

/// Data term of the registration energy: `weight · Dist(deformed, target)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub dist: DistKind,
    pub weight: f64,
    pub rmi: RmiConfig,
    #[serde(default)]
    pub mask_frame: MaskFrame,
}

impl Objective {
    pub fn ssd(weight: f64) -> Self {
        Objective {
            dist: DistKind::Ssd,
            weight,
            rmi: RmiConfig::default(),
            mask_frame: MaskFrame::Source,
        }
    }

    pub fn rmi(weight: f64, rmi: RmiConfig) -> Self {
        Objective {
            dist: DistKind::Rmi,
            weight,
            rmi,
            mask_frame: MaskFrame::Source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(Error::InvalidParameter("dist weight must be > 0".into()));
        }
        self.rmi.validate()
    }

    /// Weighted value and its gradient with respect to the deformed image.
    pub(crate) fn value_and_grad(&self, deformed: &[f64], target: &ScalarImage) -> Result<(f64, Vec<f64>)> {
        let (v, mut g) = match self.dist {
            DistKind::Ssd => ssd_grad(target.grid(), deformed, target.data()),
            DistKind::Rmi => rmi_value_grad(target.grid(), deformed, target.data(), &self.rmi, true)?,
        };
        g.iter_mut().for_each(|x| *x *= self.weight);
        Ok((self.weight * v, g))
    }

    pub(crate) fn value(&self, deformed: &[f64], target: &ScalarImage) -> Result<f64> {
        let v = match self.dist {
            DistKind::Ssd => ssd_raw(target.grid(), deformed, target.data()),
            DistKind::Rmi => rmi_value_grad(target.grid(), deformed, target.data(), &self.rmi, false)?.0,
        };
        Ok(self.weight * v)
    }
}

fn ssd_raw(grid: &GridDesc, a: &[f64], b: &[f64]) -> f64 {
    grid.voxel_volume() * par::sum_index(a.len(), |i| (a[i] - b[i]) * (a[i] - b[i]))
}

fn ssd_grad(grid: &GridDesc, a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let vol = grid.voxel_volume();
    let g = par::map_index(a.len(), |i| 2.0 * vol * (a[i] - b[i]));
    (ssd_raw(grid, a, b), g)
}

/// Σ (a − b)² · voxel volume.
pub fn ssd(a: &ScalarImage, b: &ScalarImage) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    Ok(ssd_raw(a.grid(), a.data(), b.data()))
}

/// Sørensen–Dice overlap of the two masks binarized at `threshold`;
/// 1 when both are empty.
pub fn dice(y: &MaskImage, yhat: &MaskImage, threshold: f64) -> Result<f64> {
    y.grid().ensure_same(yhat.grid())?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &q) in y.data().iter().zip(yhat.data()) {
        let (p, q) = (p >= threshold, q >= threshold);
        a += p as usize;
        b += q as usize;
        both += (p && q) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// 1 − Dice at the default 0.5 threshold.
pub fn dice_loss(y: &MaskImage, yhat: &MaskImage) -> Result<f64> {
    Ok(1.0 - dice(y, yhat, 0.5)?)
}

#[inline]
fn clamp_ce(x: f64) -> f64 {
    x.clamp(CE_EPS, 1.0 - CE_EPS)
}

fn ce_raw(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    -par::sum_index(a.len(), |i| {
        let (p, q) = (clamp_ce(a[i]), clamp_ce(b[i]));
        q * p.ln() + (1.0 - q) * (1.0 - p).ln()
    }) / n
}

/// −(1/N) Σ [b log a + (1 − b) log(1 − a)] on clamped intensities.
pub fn cross_entropy(a: &ScalarImage, b: &ScalarImage) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    Ok(ce_raw(a.data(), b.data()))
}

/// Flat voxel indices of every (2r+1)^d neighborhood whose center lies on
/// the stride lattice; offsets enumerate row-major, wrapping periodically.
fn neighborhoods(grid: &GridDesc, radius: usize, stride: usize) -> (usize, usize, Vec<usize>) {
    let d = grid.dim();
    let side = 2 * radius + 1;
    let k = side.pow(d as u32);
    let centers_per_axis: Vec<usize> = grid.sizes().iter().map(|n| n.div_ceil(stride)).collect();
    let m: usize = centers_per_axis.iter().product();
    let offsets: Vec<Vec<isize>> = (0..k)
        .map(|o| {
            let mut rem = o;
            let mut off = vec![0isize; d];
            for j in (0..d).rev() {
                off[j] = (rem % side) as isize - radius as isize;
                rem /= side;
            }
            off
        })
        .collect();
    let mut idx = Vec::with_capacity(m * k);
    for s in 0..m {
        let mut rem = s;
        let mut center = vec![0usize; d];
        for j in (0..d).rev() {
            center[j] = (rem % centers_per_axis[j]) * stride;
            rem /= centers_per_axis[j];
        }
        let base = grid.index(&center);
        for off in &offsets {
            let mut v = base;
            for (j, &o) in off.iter().enumerate() {
                v = grid.shifted(v, j, o);
            }
            idx.push(v);
        }
    }
    (m, k, idx)
}

fn centered(values: &[f64], idx: &[usize], m: usize, k: usize) -> DMatrix<f64> {
    let mut x = DMatrix::from_fn(m, k, |s, j| values[idx[s * k + j]]);
    for j in 0..k {
        let mean = x.column(j).sum() / m as f64;
        x.column_mut(j).add_scalar_mut(-mean);
    }
    x
}

fn spd_inverse_logdet(p: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if let Some(ch) = p.clone().cholesky() {
        let logdet = 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        return Ok((ch.inverse(), logdet));
    }
    let n = p.nrows();
    Err(Error::DegenerateStatistics {
        samples: 0,
        dimension: n,
    })
}

/// RMI value `ce(a, b) − I(b; a)` and optionally its gradient in `a`.
pub(crate) fn rmi_value_grad(
    grid: &GridDesc,
    a: &[f64],
    b: &[f64],
    cfg: &RmiConfig,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let (m, k, idx) = neighborhoods(grid, cfg.radius, cfg.stride);
    if m < k {
        return Err(Error::DegenerateStatistics {
            samples: m,
            dimension: k,
        });
    }
    let xc = centered(a, &idx, m, k);
    let yc = centered(b, &idx, m, k);
    let inv_m = 1.0 / m as f64;
    let eye = DMatrix::<f64>::identity(k, k);
    let a_reg = xc.transpose() * &xc * inv_m + &eye * cfg.epsilon;
    let sigma_b = yc.transpose() * &yc * inv_m;
    let cross = yc.transpose() * &xc * inv_m;
    let a_inv = a_reg
        .clone()
        .cholesky()
        .ok_or(Error::DegenerateStatistics {
            samples: m,
            dimension: k,
        })?
        .inverse();
    let cai = &cross * &a_inv;
    let mut post = &sigma_b - &cai * cross.transpose() + &eye * cfg.epsilon;
    post = (&post + post.transpose()) * 0.5;
    let (q, logdet) = spd_inverse_logdet(&post).map_err(|_| Error::DegenerateStatistics {
        samples: m,
        dimension: k,
    })?;
    // value = ce − I with I = −s/2 logdet, i.e. ce + s/2 logdet
    let s = match cfg.sign {
        RmiSign::LowerBound => 1.0,
        RmiSign::Literal => -1.0,
    };
    let value = ce_raw(a, b) + 0.5 * s * logdet;
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    let n = a.len() as f64;
    let mut grad = par::map_index(a.len(), |i| {
        let p = a[i];
        if p <= CE_EPS || p >= 1.0 - CE_EPS {
            return 0.0;
        }
        let t = clamp_ce(b[i]);
        -(t / p - (1.0 - t) / (1.0 - p)) / n
    });
    // ∂logdet/∂C = −2 Q C A⁻¹, ∂logdet/∂A = A⁻¹ Cᵀ Q C A⁻¹
    let g_cross = -2.0 * &q * &cai;
    let g_a = cai.transpose() * &q * &cai;
    let gx = (&yc * &g_cross + 2.0 * &xc * &g_a) * (0.5 * s * inv_m);
    for sample in 0..m {
        for j in 0..k {
            grad[idx[sample * k + j]] += gx[(sample, j)];
        }
    }
    Ok((value, grad))
}

/// Region mutual-information dissimilarity between `a` (deformed) and `b`
/// (target), both expected in [0, 1].
pub fn rmi(a: &ScalarImage, b: &ScalarImage, cfg: &RmiConfig) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    Ok(rmi_value_grad(a.grid(), a.data(), b.data(), cfg, false)?.0)
}

/// Mean RMI over a batch of (deformed, target) pairs.
pub fn rmi_batch(pairs: &[(&ScalarImage, &ScalarImage)], cfg: &RmiConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("empty rmi batch".into()));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        total += rmi(a, b, cfg)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean periodic L2 distance, in voxels, between two landmark sets.
pub fn mean_landmark_distance(grid: &GridDesc, a: &LandmarkSet, b: &LandmarkSet) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidParameter(format!("{} vs {} landmarks", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidParameter("no landmarks".into()));
    }
    let total: f64 = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(p, q)| grid.wrapped_delta(p, q).iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum();
    Ok(total / a.len() as f64)
}

/// Registration error: source landmarks carried along the estimated
/// geodesic versus their target positions.
pub fn landmark_error(path: &GeodesicPath, shoot_cfg: ShootingConfig, source: &LandmarkSet, target: &LandmarkSet) -> Result<f64> {
    let moved = propagate_landmarks(source, path.velocities(), shoot_cfg)?;
    mean_landmark_distance(path.psi().grid(), &moved, target)
}

/// ⟨L v, v⟩ · voxel volume.
pub fn reg_energy(kernel: &FluidKernel, v: &VectorField) -> Result<f64> {
    let m = kernel.apply_l(v)?;
    Ok(m.dot(v)?.max(0.0) * kernel.grid().voxel_volume())
}

/// Metric energy of the masked velocity v ⊙ (1 − U).
pub fn reg_masked(kernel: &FluidKernel, v0: &VectorField, mask: &MaskImage) -> Result<f64> {
    reg_energy(kernel, &mask_velocity(v0, mask)?)
}

/// Forward evaluation shared by the energy and the optimizer.
pub(crate) struct Evaluation {
    pub report: EnergyReport,
    /// Image that is warped: Ŝ, or S itself in the target frame.
    pub warped_source: ScalarImage,
    /// 1 − U when the mask is applied after warping.
    pub post_mask: Option<Vec<f64>>,
    pub masked_target: ScalarImage,
    pub masked_v0: Vec<Vec<f64>>,
    pub momentum0: Vec<Vec<f64>>,
    pub trajectory: Trajectory,
    pub deformed: Vec<f64>,
}

pub(crate) fn warp_raw(grid: &GridDesc, img: &[f64], u: &[Vec<f64>]) -> Vec<f64> {
    let d = grid.dim();
    par::map_index(grid.len(), |x| {
        let (mut base, mut off) = ([0; 3], [0.0; 3]);
        voxel_and_offset(grid, u, x, &mut base, &mut off);
        sample_displaced(grid, img, &base[..d], &off[..d])
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn evaluate(
    source: &ScalarImage,
    target: &ScalarImage,
    mask: &MaskImage,
    v0: &VectorField,
    kernel: &FluidKernel,
    shoot_cfg: ShootingConfig,
    objective: &Objective,
) -> Result<Evaluation> {
    let grid = source.grid();
    grid.ensure_same(target.grid())?;
    grid.ensure_same(mask.grid())?;
    grid.ensure_same(v0.grid())?;
    grid.ensure_same(kernel.grid())?;
    let masked_v0 = mask_velocity(v0, mask)?.into_components();
    let (warped_source, post_mask) = match objective.mask_frame {
        MaskFrame::Source => (mask_image(source, mask)?, None),
        MaskFrame::Target => (source.clone(), Some(mask.data().iter().map(|u| 1.0 - u).collect::<Vec<_>>())),
    };
    let masked_target = mask_image(target, mask)?;
    let trajectory = shoot_trajectory(kernel, &masked_v0, shoot_cfg)?;
    let u = trajectory.displacements.last().expect("steps >= 1");
    let mut deformed = warp_raw(grid, warped_source.data(), u);
    if let Some(keep) = &post_mask {
        deformed.iter_mut().zip(keep).for_each(|(w, k)| *w *= k);
    }
    let dist = objective.value(&deformed, &masked_target)?;
    let momentum0 = trajectory.momenta[0].clone();
    let reg = grid.voxel_volume()
        * (0..grid.dim())
            .map(|j| crate::grid::dot(&momentum0[j], &masked_v0[j]))
            .sum::<f64>()
            .max(0.0);
    Ok(Evaluation {
        report: EnergyReport {
            dist,
            reg,
            seg: 0.0,
            gamma: 0.0,
            total: dist + reg,
        },
        warped_source,
        post_mask,
        masked_target,
        masked_v0,
        momentum0,
        trajectory,
        deformed,
    })
}

/// Metamorphic registration energy: data term between the warped masked
/// source and the masked target plus the masked metric energy.
pub fn energy_metamorphic(
    source: &ScalarImage,
    target: &ScalarImage,
    mask: &MaskImage,
    v0: &VectorField,
    kernel: &FluidKernel,
    shoot_cfg: ShootingConfig,
    objective: &Objective,
) -> Result<EnergyReport> {
    objective.validate()?;
    Ok(evaluate(source, target, mask, v0, kernel, shoot_cfg, objective)?.report)
}

/// Adds the segmentation term: total = dist + reg + gamma · seg.
pub fn loss_joint(dist: f64, reg: f64, seg: f64, gamma: f64) -> Result<EnergyReport> {
    if !(dist.is_finite() && reg.is_finite() && seg.is_finite()) {
        return Err(Error::InvalidParameter("non-finite loss term".into()));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(EnergyReport {
        dist,
        reg,
        seg,
        gamma,
        total: dist + reg + gamma * seg,
    })
}
