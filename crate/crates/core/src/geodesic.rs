//! Geodesic shooting: forward-Euler EPDiff for the velocity, forward-Euler
//! transport of the pullback map, warping and label/landmark propagation.
//!
//! All flow quantities are in voxel units: derivatives are taken per voxel
//! index and displacements are voxel offsets. Grid spacing only enters the
//! metric through the kernel's Laplacian eigenvalues.

use crate::error::{Error, Result};
use crate::grid::{
    add_central_diff, central_diff, interp_scalar, sample, sample_displaced, voxel_and_offset, DeformationField,
    GridDesc, LandmarkSet, MaskImage, ScalarImage, VectorField,
};
use crate::operators::FluidKernel;
use crate::par;

/// Default number of Euler steps over t ∈ [0, 1].
pub const DEFAULT_STEPS: usize = 10;

/// Blow-up factor relative to the initial speed that aborts shooting.
pub const INSTABILITY_FACTOR: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ShootingConfig {
    steps: usize,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        ShootingConfig {
            steps: DEFAULT_STEPS,
        }
    }
}

impl ShootingConfig {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("steps must be >= 1".into()));
        }
        Ok(ShootingConfig { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

/// Velocities v_0 … v_steps along a geodesic and the end-point map ψ₁.
#[derive(Clone, Debug)]
pub struct GeodesicPath {
    velocities: Vec<VectorField>,
    psi: DeformationField,
}

impl GeodesicPath {
    pub fn velocities(&self) -> &[VectorField] {
        &self.velocities
    }

    pub fn initial_velocity(&self) -> &VectorField {
        &self.velocities[0]
    }

    pub fn psi(&self) -> &DeformationField {
        &self.psi
    }

    /// Identity path of `steps` zero velocities.
    pub fn identity(grid: &GridDesc, cfg: ShootingConfig) -> GeodesicPath {
        GeodesicPath {
            velocities: vec![VectorField::zeros(grid); cfg.steps + 1],
            psi: DeformationField::identity(grid),
        }
    }

    /// ⟨L v_t, v_t⟩ at every stored time point (voxel sum).
    pub fn metric_energies(&self, kernel: &FluidKernel) -> Result<Vec<f64>> {
        self.velocities
            .iter()
            .map(|v| kernel.apply_l(v)?.dot(v))
            .collect()
    }
}

/// Everything the forward pass produces, kept for the reverse sweep.
pub(crate) struct Trajectory {
    /// v_0 … v_steps
    pub velocities: Vec<Vec<Vec<f64>>>,
    /// m_n = L v_n for n < steps
    pub momenta: Vec<Vec<Vec<f64>>>,
    /// u_0 … u_steps
    pub displacements: Vec<Vec<Vec<f64>>>,
}

/// EPDiff force G = (Dv)ᵀ m + div(m ⊗ v), before applying −K.
///
/// The last two terms of (Dv)ᵀ m + (Dm) v + m div v are taken together in
/// flux form. Both are equal in the continuum; with central differences
/// only the flux form keeps ⟨v, G⟩ = 0 exactly, so the metric energy is
/// conserved by the semi-discrete flow and Euler drift is purely temporal.
pub(crate) fn epdiff_force(unit: &GridDesc, v: &[Vec<f64>], m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = unit.dim();
    let n = unit.len();
    // dv[j][i] = D_i v_j
    let dv: Vec<Vec<Vec<f64>>> = v
        .iter()
        .map(|c| (0..d).map(|i| central_diff(unit, c, i)).collect())
        .collect();
    (0..d)
        .map(|i| {
            let mut g = par::map_index(n, |x| (0..d).map(|j| dv[j][i][x] * m[j][x]).sum::<f64>());
            for j in 0..d {
                let flux = par::map_index(n, |x| m[i][x] * v[j][x]);
                add_central_diff(unit, &flux, j, 1.0, &mut g);
            }
            g
        })
        .collect()
}

fn max_speed(v: &[Vec<f64>]) -> f64 {
    let n = v[0].len();
    par::map_index(n, |x| v.iter().map(|c| c[x] * c[x]).sum::<f64>().sqrt())
        .into_iter()
        .fold(0.0, f64::max)
}

fn check_finite_field(v: &[Vec<f64>]) -> Result<()> {
    for c in v {
        if let Some(index) = c.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "velocity",
                index,
            });
        }
    }
    Ok(())
}

/// ∂v/∂t = −K[(Dv)ᵀ m + (Dm) v + m div v] with m = L v.
pub fn epdiff_rhs(kernel: &FluidKernel, v: &VectorField) -> Result<VectorField> {
    kernel.grid().ensure_same(v.grid())?;
    check_finite_field(v.components())?;
    let m = kernel.apply_l_raw(v.components());
    let force = epdiff_force(&v.grid().unit(), v.components(), &m);
    let mut out = kernel.apply_k_raw(&force);
    out.iter_mut().flatten().for_each(|x| *x = -*x);
    Ok(VectorField::from_raw(v.grid().clone(), out))
}

/// One forward-Euler update of the pullback displacement:
/// u ← u − dt (I + Du) v.
pub(crate) fn psi_step(unit: &GridDesc, u: &[Vec<f64>], v: &[Vec<f64>], dt: f64) -> Vec<Vec<f64>> {
    let d = unit.dim();
    u.iter()
        .enumerate()
        .map(|(i, ui)| {
            let du: Vec<Vec<f64>> = (0..d).map(|j| central_diff(unit, ui, j)).collect();
            par::map_index(unit.len(), |x| {
                let mut adv = v[i][x];
                for j in 0..d {
                    adv += du[j][x] * v[j][x];
                }
                ui[x] - dt * adv
            })
        })
        .collect()
}

pub(crate) fn shoot_trajectory(
    kernel: &FluidKernel,
    v0: &[Vec<f64>],
    cfg: ShootingConfig,
) -> Result<Trajectory> {
    check_finite_field(v0)?;
    let grid = kernel.grid();
    let unit = grid.unit();
    let dt = cfg.dt();
    let limit = INSTABILITY_FACTOR * max_speed(v0) + 1.0;
    let mut velocities = Vec::with_capacity(cfg.steps + 1);
    let mut momenta = Vec::with_capacity(cfg.steps);
    let mut displacements = Vec::with_capacity(cfg.steps + 1);
    velocities.push(v0.to_vec());
    displacements.push(vec![vec![0.0; grid.len()]; grid.dim()]);
    for step in 0..cfg.steps {
        let v = &velocities[step];
        let m = kernel.apply_l_raw(v);
        let force = epdiff_force(&unit, v, &m);
        let kf = kernel.apply_k_raw(&force);
        let next: Vec<Vec<f64>> = v
            .iter()
            .zip(&kf)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - dt * y).collect())
            .collect();
        let u_next = psi_step(&unit, &displacements[step], v, dt);
        let speed = max_speed(&next);
        if !speed.is_finite() || speed > limit {
            return Err(Error::Instability {
                step: step + 1,
                max_speed: speed,
                limit,
            });
        }
        momenta.push(m);
        velocities.push(next);
        displacements.push(u_next);
    }
    Ok(Trajectory {
        velocities,
        momenta,
        displacements,
    })
}

/// Integrates EPDiff from `v0` and the map ψ along the resulting velocities.
pub fn shoot(kernel: &FluidKernel, v0: &VectorField, cfg: ShootingConfig) -> Result<GeodesicPath> {
    kernel.grid().ensure_same(v0.grid())?;
    let grid = v0.grid();
    let traj = shoot_trajectory(kernel, v0.components(), cfg)?;
    let u = traj.displacements.into_iter().next_back().expect("steps >= 1");
    Ok(GeodesicPath {
        velocities: traj
            .velocities
            .into_iter()
            .map(|c| VectorField::from_raw(grid.clone(), c))
            .collect(),
        psi: DeformationField::from_displacement(VectorField::from_raw(grid.clone(), u)),
    })
}

/// Euler transport of ψ: u_{t+dt} = u_t − dt (I + Du_t) v_t, u_0 = 0.
pub fn integrate_psi(velocities: &[VectorField], cfg: ShootingConfig) -> Result<DeformationField> {
    let first = velocities
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty velocity sequence".into()))?;
    if velocities.len() < cfg.steps {
        return Err(Error::InvalidParameter(format!(
            "{} velocities for {} steps",
            velocities.len(),
            cfg.steps
        )));
    }
    let grid = first.grid();
    let unit = grid.unit();
    let mut u = vec![vec![0.0; grid.len()]; grid.dim()];
    for v in &velocities[..cfg.steps] {
        grid.ensure_same(v.grid())?;
        u = psi_step(&unit, &u, v.components(), cfg.dt());
    }
    let u = VectorField::new(grid.clone(), u)?;
    Ok(DeformationField::from_displacement(u))
}

/// Deformed image S ∘ ψ.
pub fn warp(img: &ScalarImage, psi: &DeformationField) -> Result<ScalarImage> {
    interp_scalar(img, psi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelInterp {
    Linear,
    Nearest,
}

/// Pulls a label map back through ψ.
pub fn propagate_label(y: &MaskImage, psi: &DeformationField, mode: LabelInterp) -> Result<MaskImage> {
    let g = y.grid();
    g.ensure_same(psi.grid())?;
    let u = psi.displacement().components();
    let d = g.dim();
    let data = par::map_index(g.len(), |x| {
        let (mut base, mut off) = ([0; 3], [0.0; 3]);
        voxel_and_offset(g, u, x, &mut base, &mut off);
        match mode {
            LabelInterp::Linear => {
                sample_displaced(g, y.data(), &base[..d], &off[..d]).clamp(0.0, 1.0)
            }
            LabelInterp::Nearest => {
                let mut idx = 0;
                for j in 0..d {
                    let n = g.sizes()[j] as i64;
                    let c = (base[j] as i64 + off[j].round() as i64).rem_euclid(n) as usize;
                    idx += c * g.strides()[j];
                }
                y.data()[idx]
            }
        }
    });
    Ok(MaskImage::from_raw(g.clone(), data))
}

fn wrap_point(grid: &GridDesc, p: &mut [f64]) {
    for (x, &n) in p.iter_mut().zip(grid.sizes()) {
        *x = x.rem_euclid(n as f64);
    }
}

/// Moves points along the forward flow ẋ = v_t(x), so landmarks placed on
/// the source land in target coordinates.
pub fn propagate_landmarks(
    points: &LandmarkSet,
    velocities: &[VectorField],
    cfg: ShootingConfig,
) -> Result<LandmarkSet> {
    if velocities.len() < cfg.steps {
        return Err(Error::InvalidParameter(format!(
            "{} velocities for {} steps",
            velocities.len(),
            cfg.steps
        )));
    }
    let Some(first) = velocities.first() else {
        return Ok(points.clone());
    };
    let grid = first.grid();
    let dt = cfg.dt();
    let mut out = points.clone();
    for p in &mut out.points {
        if p.len() != grid.dim() {
            return Err(Error::GridMismatch(format!(
                "{}-D landmark on a {}-D grid",
                p.len(),
                grid.dim()
            )));
        }
        for v in &velocities[..cfg.steps] {
            let step: Vec<f64> = v.components().iter().map(|c| sample(grid, c, p)).collect();
            for (x, s) in p.iter_mut().zip(step) {
                *x += dt * s;
            }
            wrap_point(grid, p);
        }
    }
    Ok(out)
}
