//! Reverse-mode gradient of the discretized metamorphic energy and the
//! gradient-descent registration driver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{shoot, GeodesicPath, ShootingConfig, DEFAULT_STEPS};
use crate::grid::{
    add_central_diff, central_diff, sample_displaced_with_grad, voxel_and_offset, GridDesc,
    MaskImage, ScalarImage, VectorField,
};
use crate::metrics::{evaluate, DistKind, EnergyReport, Evaluation, MaskFrame, Objective, RmiConfig};
use crate::operators::{FluidKernel, DEFAULT_ALPHA, DEFAULT_POWER};
use crate::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Trial steps are halved at most this many times per iteration.
pub const MAX_HALVINGS: usize = 30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Plain,
    #[default]
    Metamorph,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Mode::Plain),
            "metamorph" => Ok(Mode::Metamorph),
            other => Err(Error::InvalidParameter(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineSearch {
    #[default]
    Backtracking,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub mode: Mode,
    pub dist: DistKind,
    pub alpha: f64,
    pub power: u32,
    pub steps: usize,
    pub max_iters: usize,
    pub step_init: f64,
    pub tol_rel: f64,
    pub line_search: LineSearch,
    /// Multiplies the dissimilarity term; `None` picks a per-dist default.
    pub dist_weight: Option<f64>,
    pub rmi: RmiConfig,
    pub mask_frame: MaskFrame,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            mode: Mode::Metamorph,
            dist: DistKind::Rmi,
            alpha: DEFAULT_ALPHA,
            power: DEFAULT_POWER,
            steps: DEFAULT_STEPS,
            max_iters: 200,
            step_init: 5e-4,
            tol_rel: 1e-6,
            line_search: LineSearch::Backtracking,
            dist_weight: None,
            rmi: RmiConfig::default(),
            mask_frame: MaskFrame::Source,
        }
    }
}

pub const DEFAULT_SSD_WEIGHT: f64 = 1e5;
pub const DEFAULT_RMI_WEIGHT: f64 = 1e4;

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.tol_rel.is_finite() && self.tol_rel > 0.0) {
            return Err(Error::InvalidParameter("tol_rel must be > 0".into()));
        }
        if !(self.step_init.is_finite() && self.step_init > 0.0) {
            return Err(Error::InvalidParameter("step_init must be > 0".into()));
        }
        ShootingConfig::new(self.steps)?;
        self.objective().validate()
    }

    pub fn shooting(&self) -> Result<ShootingConfig> {
        ShootingConfig::new(self.steps)
    }

    pub fn objective(&self) -> Objective {
        let weight = self.dist_weight.unwrap_or(match self.dist {
            DistKind::Ssd => DEFAULT_SSD_WEIGHT,
            DistKind::Rmi => DEFAULT_RMI_WEIGHT,
        });
        Objective {
            dist: self.dist,
            weight,
            rmi: self.rmi,
            mask_frame: self.mask_frame,
        }
    }

    pub fn kernel(&self, grid: &GridDesc) -> Result<FluidKernel> {
        FluidKernel::new(grid, self.alpha, self.power)
    }
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub v0: VectorField,
    pub path: GeodesicPath,
    pub deformed: ScalarImage,
    pub report: EnergyReport,
    /// Total energy at the starting v0 followed by every accepted iterate.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// (G_vᵀ z, G_mᵀ z) for the flux-form force G(v, m).
fn force_vjp(unit: &GridDesc, v: &[Vec<f64>], m: &[Vec<f64>], z: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = unit.dim();
    let n = unit.len();
    // dz[i][j] = D_j z_i, dv[j][i] = D_i v_j
    let dz: Vec<Vec<Vec<f64>>> = z
        .iter()
        .map(|c| (0..d).map(|j| central_diff(unit, c, j)).collect())
        .collect();
    let dv: Vec<Vec<Vec<f64>>> = v
        .iter()
        .map(|c| (0..d).map(|i| central_diff(unit, c, i)).collect())
        .collect();
    let gv = (0..d)
        .map(|j| {
            let mut out = par::map_index(n, |x| -(0..d).map(|i| m[i][x] * dz[i][j][x]).sum::<f64>());
            for i in 0..d {
                let prod = par::map_index(n, |x| z[i][x] * m[j][x]);
                add_central_diff(unit, &prod, i, -1.0, &mut out);
            }
            out
        })
        .collect();
    let gm = (0..d)
        .map(|j| {
            par::map_index(n, |x| {
                (0..d)
                    .map(|i| z[i][x] * dv[j][i][x] - v[i][x] * dz[j][i][x])
                    .sum::<f64>()
            })
        })
        .collect();
    (gv, gm)
}

/// Pulls λ back through u' = u − dt (I + Du) v. Returns (λ_u, λ_v).
fn psi_step_vjp(
    unit: &GridDesc,
    u: &[Vec<f64>],
    v: &[Vec<f64>],
    lambda: &[Vec<f64>],
    dt: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = unit.dim();
    let n = unit.len();
    let lu = (0..d)
        .map(|i| {
            let mut out = lambda[i].clone();
            for j in 0..d {
                let flux = par::map_index(n, |x| lambda[i][x] * v[j][x]);
                add_central_diff(unit, &flux, j, dt, &mut out);
            }
            out
        })
        .collect();
    let du: Vec<Vec<Vec<f64>>> = u
        .iter()
        .map(|c| (0..d).map(|j| central_diff(unit, c, j)).collect())
        .collect();
    let lv = (0..d)
        .map(|j| {
            par::map_index(n, |x| {
                let mut acc = lambda[j][x];
                for i in 0..d {
                    acc += lambda[i][x] * du[i][j][x];
                }
                -dt * acc
            })
        })
        .collect();
    (lu, lv)
}

/// Gradient with respect to the masked initial velocity, before projection.
fn adjoint(ev: &Evaluation, kernel: &FluidKernel, shoot_cfg: ShootingConfig, objective: &Objective) -> Result<Vec<Vec<f64>>> {
    let grid = kernel.grid();
    let unit = grid.unit();
    let d = grid.dim();
    let n = grid.len();
    let dt = shoot_cfg.dt();
    let steps = shoot_cfg.steps();
    let traj = &ev.trajectory;

    let (_, mut gw) = objective.value_and_grad(&ev.deformed, &ev.masked_target)?;
    if let Some(keep) = &ev.post_mask {
        gw.iter_mut().zip(keep).for_each(|(g, k)| *g *= k);
    }
    let src = ev.warped_source.data();
    let u_end = &traj.displacements[steps];
    let per_voxel: Vec<[f64; 3]> = par::map_index(n, |x| {
        let (mut base, mut off, mut g) = ([0; 3], [0.0; 3], [0.0; 3]);
        voxel_and_offset(grid, u_end, x, &mut base, &mut off);
        sample_displaced_with_grad(grid, src, &base[..d], &off[..d], &mut g);
        g
    });
    let mut lambda: Vec<Vec<f64>> = (0..d)
        .map(|i| par::map_index(n, |x| gw[x] * per_voxel[x][i]))
        .collect();

    let mut mu: Option<Vec<Vec<f64>>> = None;
    for step in (0..steps).rev() {
        let v = &traj.velocities[step];
        let (lu, lv) = psi_step_vjp(&unit, &traj.displacements[step], v, &lambda, dt);
        lambda = lu;
        let mut next = lv;
        if let Some(mu) = &mu {
            let z = kernel.apply_k_raw(mu);
            let (gv, gm) = force_vjp(&unit, v, &traj.momenta[step], &z);
            let lgm = kernel.apply_l_raw(&gm);
            for j in 0..d {
                let (out, mu_j, gv_j, lgm_j) = (&mut next[j], &mu[j], &gv[j], &lgm[j]);
                par::fill_index_add(out, |x| mu_j[x] - dt * (gv_j[x] + lgm_j[x]));
            }
        }
        mu = Some(next);
    }
    let mut g = mu.expect("steps >= 1");
    let scale = 2.0 * grid.voxel_volume();
    for (gj, mj) in g.iter_mut().zip(&ev.momentum0) {
        let mj = &mj[..];
        par::fill_index_add(gj, |x| scale * mj[x]);
    }
    Ok(g)
}

fn projected(mut g: Vec<Vec<f64>>, mask: &MaskImage) -> Vec<Vec<f64>> {
    let u = mask.data();
    for c in g.iter_mut() {
        c.iter_mut().zip(u).for_each(|(x, w)| *x *= 1.0 - w);
    }
    g
}

#[allow(clippy::too_many_arguments)]
fn energy_and_grad(
    source: &ScalarImage,
    target: &ScalarImage,
    mask: &MaskImage,
    v0: &VectorField,
    kernel: &FluidKernel,
    shoot_cfg: ShootingConfig,
    objective: &Objective,
) -> Result<(Evaluation, Vec<Vec<f64>>)> {
    let ev = evaluate(source, target, mask, v0, kernel, shoot_cfg, objective)?;
    let g = adjoint(&ev, kernel, shoot_cfg, objective)?;
    Ok((ev, projected(g, mask)))
}

/// Exact gradient of the discretized metamorphic energy with respect to v0.
pub fn grad_v0(
    source: &ScalarImage,
    target: &ScalarImage,
    mask: &MaskImage,
    v0: &VectorField,
    kernel: &FluidKernel,
    shoot_cfg: ShootingConfig,
    objective: &Objective,
) -> Result<VectorField> {
    objective.validate()?;
    let (_, g) = energy_and_grad(source, target, mask, v0, kernel, shoot_cfg, objective)?;
    Ok(VectorField::from_raw(v0.grid().clone(), g))
}

/// Central differences of the energy for each sampled `(component, voxel)`.
#[allow(clippy::too_many_arguments)]
pub fn fd_grad(
    source: &ScalarImage,
    target: &ScalarImage,
    mask: &MaskImage,
    v0: &VectorField,
    kernel: &FluidKernel,
    shoot_cfg: ShootingConfig,
    objective: &Objective,
    h: f64,
    sample: &[(usize, usize)],
) -> Result<Vec<f64>> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidParameter(format!("fd step must be > 0, got {h}")));
    }
    objective.validate()?;
    let grid = v0.grid();
    for &(c, x) in sample {
        if c >= grid.dim() || x >= grid.len() {
            return Err(Error::InvalidParameter(format!("sample ({c}, {x}) out of range")));
        }
    }
    let energy = |c: usize, x: usize, delta: f64| -> Result<f64> {
        let mut comps = v0.components().to_vec();
        comps[c][x] += delta;
        let v = VectorField::from_raw(grid.clone(), comps);
        Ok(evaluate(source, target, mask, &v, kernel, shoot_cfg, objective)?.report.total)
    };
    sample
        .iter()
        .map(|&(c, x)| Ok((energy(c, x, h)? - energy(c, x, -h)?) / (2.0 * h)))
        .collect()
}

/// Sobolev descent direction −(1−U) K (1−U) g.
fn descent_direction(kernel: &FluidKernel, g: &[Vec<f64>], mask: &MaskImage) -> Vec<Vec<f64>> {
    let mut d = kernel.apply_k_raw(g);
    let u = mask.data();
    for c in d.iter_mut() {
        c.iter_mut().zip(u).for_each(|(x, w)| *x *= -(1.0 - w));
    }
    d
}

fn stepped(v: &VectorField, d: &[Vec<f64>], step: f64) -> VectorField {
    let comps = v
        .components()
        .iter()
        .zip(d)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + step * y).collect())
        .collect();
    VectorField::from_raw(v.grid().clone(), comps)
}

/// Minimizes the (masked) registration energy from v0 = 0.
pub fn register(
    source: &ScalarImage,
    target: &ScalarImage,
    mask: &MaskImage,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let grid = source.grid();
    grid.ensure_same(target.grid())?;
    grid.ensure_same(mask.grid())?;
    let kernel = cfg.kernel(grid)?;
    register_with_kernel(source, target, mask, &kernel, cfg)
}

pub fn register_with_kernel(
    source: &ScalarImage,
    target: &ScalarImage,
    mask: &MaskImage,
    kernel: &FluidKernel,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    register_from(source, target, mask, kernel, cfg, &VectorField::zeros(source.grid()))
}

/// Same descent started from `init` instead of zero.
pub fn register_from(
    source: &ScalarImage,
    target: &ScalarImage,
    mask: &MaskImage,
    kernel: &FluidKernel,
    cfg: &RegistrationConfig,
    init: &VectorField,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let grid = source.grid();
    grid.ensure_same(init.grid())?;
    let shoot_cfg = cfg.shooting()?;
    let objective = cfg.objective();
    let plain;
    let mask = match cfg.mode {
        Mode::Metamorph => mask,
        Mode::Plain => {
            plain = MaskImage::zeros(grid);
            &plain
        }
    };

    let mut v = init.clone();
    let (mut ev, mut g) = energy_and_grad(source, target, mask, &v, kernel, shoot_cfg, &objective)?;
    let mut trace = vec![ev.report.total];
    let mut step = cfg.step_init;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        let d = descent_direction(kernel, &g, mask);
        if d.iter().flatten().all(|&x| x == 0.0) || ev.report.total == 0.0 {
            converged = true;
            break;
        }
        let current = ev.report.total;
        let mut accepted = None;
        match cfg.line_search {
            LineSearch::Fixed => {
                let trial = stepped(&v, &d, step);
                let (e, gr) = energy_and_grad(source, target, mask, &trial, kernel, shoot_cfg, &objective)?;
                accepted = Some((trial, e, gr));
            }
            LineSearch::Backtracking => {
                for _ in 0..=MAX_HALVINGS {
                    let trial = stepped(&v, &d, step);
                    match evaluate(source, target, mask, &trial, kernel, shoot_cfg, &objective) {
                        Ok(e) if e.report.total < current => {
                            let gr = projected(adjoint(&e, kernel, shoot_cfg, &objective)?, mask);
                            accepted = Some((trial, e, gr));
                            break;
                        }
                        Ok(_) => {}
                        Err(err) if err.is_numerical() => {}
                        Err(err) => return Err(err),
                    }
                    step *= 0.5;
                }
            }
        }
        let Some((trial, e, gr)) = accepted else {
            break;
        };
        iterations += 1;
        let decrease = current - e.report.total;
        v = trial;
        ev = e;
        g = gr;
        trace.push(ev.report.total);
        if cfg.line_search == LineSearch::Backtracking {
            step *= 2.0;
            if decrease <= cfg.tol_rel * current.abs() {
                converged = true;
                break;
            }
        }
    }

    let masked_v0 = VectorField::from_raw(grid.clone(), ev.masked_v0.clone());
    let path = shoot(kernel, &masked_v0, shoot_cfg)?;
    let deformed = crate::geodesic::warp(source, path.psi())?;
    Ok(RegistrationResult {
        v0: v,
        path,
        deformed,
        report: ev.report,
        trace,
        iterations,
        converged,
    })
}

fn smooth_image(g: &GridDesc, seed: u64) -> Result<ScalarImage> {
    let k = FluidKernel::new(g, 1.0, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..g.len()).map(|_| rng.random()).collect();
    let s = k.apply_k_raw(&[noise]).remove(0);
    let (lo, hi) = s.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    ScalarImage::new(g.clone(), s.iter().map(|v| 0.1 + 0.8 * (v - lo) / (hi - lo)).collect())
}

fn smooth_field(k: &FluidKernel, seed: u64, amp: f64) -> Result<VectorField> {
    let g = k.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Vec<f64>> = (0..g.dim())
        .map(|_| (0..g.len()).map(|_| rng.random::<f64>() - 0.5).collect())
        .collect();
    let v = VectorField::new(g.clone(), k.apply_k_raw(&noise))?;
    let m = v.max_norm();
    Ok(v.scaled(amp / m))
}

/// Random binary mask made of 4×4 blocks.
fn random_mask(g: &GridDesc, seed: u64) -> Result<MaskImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: Vec<bool> = (0..g.len() / 16).map(|_| rng.random::<f64>() < 0.3).collect();
    let per_row = g.sizes()[1] / 4;
    MaskImage::from_fn(g, |c| if blocks[(c[0] / 4) * per_row + c[1] / 4] { 1.0 } else { 0.0 })
}

fn max_rel_error(g: &VectorField, fd: &[f64], sample: &[(usize, usize)]) -> f64 {
    let scale = g.max_abs();
    sample
        .iter()
        .zip(fd)
        .map(|(&(c, x), &f)| {
            let a = g.component(c)[x];
            (a - f).abs() / a.abs().max(f.abs()).max(1e-6 * scale).max(1e-300)
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub size: usize,
    pub samples: usize,
    pub h: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            size: 16,
            samples: 50,
            h: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub dist: DistKind,
    pub masked: bool,
    pub seed: u64,
}

/// Max relative error between `grad_v0` and `fd_grad` on a seeded smooth problem.
pub fn gradcheck(case: &GradcheckCase, cfg: &GradcheckConfig) -> Result<f64> {
    if cfg.size < 4 || !cfg.size.is_multiple_of(4) || cfg.samples == 0 {
        return Err(Error::InvalidParameter(
            "gradcheck size must be a positive multiple of 4 and samples > 0".into(),
        ));
    }
    let seed = case.seed;
    let g = GridDesc::with_sizes(&[cfg.size, cfg.size])?;
    let k = FluidKernel::new(&g, DEFAULT_ALPHA, DEFAULT_POWER)?;
    let shoot_cfg = ShootingConfig::default();
    let s = smooth_image(&g, seed)?;
    let t = smooth_image(&g, seed + 100)?;
    let mask = if case.masked { random_mask(&g, seed + 200)? } else { MaskImage::zeros(&g) };
    let v0 = smooth_field(&k, seed + 300, 1.0)?;
    let obj = Objective {
        dist: case.dist,
        weight: 1.0,
        rmi: RmiConfig::default(),
        mask_frame: if seed.is_multiple_of(2) { MaskFrame::Target } else { MaskFrame::Source },
    };
    let grad = grad_v0(&s, &t, &mask, &v0, &k, shoot_cfg, &obj)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 400);
    let mut sample = Vec::with_capacity(cfg.samples);
    while sample.len() < cfg.samples {
        let (c, x) = (rng.random_range(0..2), rng.random_range(0..g.len()));
        if mask.data()[x] == 0.0 {
            sample.push((c, x));
        }
    }
    let fd = fd_grad(&s, &t, &mask, &v0, &k, shoot_cfg, &obj, cfg.h, &sample)?;
    Ok(max_rel_error(&grad, &fd, &sample))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{energy_metamorphic, ssd, RmiSign};

    fn grid2(n: usize) -> GridDesc {
        GridDesc::with_sizes(&[n, n]).unwrap()
    }

    fn check(dist: DistKind, masked: bool, seed: u64) -> f64 {
        let cfg = GradcheckConfig { samples: 20, ..Default::default() };
        gradcheck(&GradcheckCase { dist, masked, seed }, &cfg).unwrap()
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        for dist in [DistKind::Ssd, DistKind::Rmi] {
            for masked in [false, true] {
                for seed in [3, 4] {
                    let err = check(dist, masked, seed);
                    assert!(err <= 1e-4, "{dist:?} masked={masked} seed={seed}: {err}");
                }
            }
        }
    }

    #[test]
    fn gradient_vanishes_on_mask_and_at_optimum() {
        let g = grid2(16);
        let k = FluidKernel::new(&g, 3.0, 3).unwrap();
        let cfg = ShootingConfig::default();
        let s = smooth_image(&g, 1).unwrap();
        let t = smooth_image(&g, 2).unwrap();
        let v0 = smooth_field(&k, 3, 1.0).unwrap();
        let obj = Objective::ssd(1.0);
        let mask = random_mask(&g, 4).unwrap();
        let grad = grad_v0(&s, &t, &mask, &v0, &k, cfg, &obj).unwrap();
        for c in grad.components() {
            for (x, u) in c.iter().zip(mask.data()) {
                assert!(*u == 0.0 || *x == 0.0);
            }
        }
        let full = grad_v0(&s, &t, &MaskImage::ones(&g), &v0, &k, cfg, &obj).unwrap();
        assert_eq!(full.max_abs(), 0.0);
        let zero = grad_v0(&s, &s, &MaskImage::zeros(&g), &VectorField::zeros(&g), &k, cfg, &obj).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        // v0 = 0 sits on lattice points where multilinear sampling has a
        // kink; a gently varying image keeps the one-sided slopes close
        let gentle = ScalarImage::from_fn(&g, |c| 0.5 + 0.05 * (std::f64::consts::TAU * c[0] as f64 / 16.0).cos()).unwrap();
        let sample: Vec<(usize, usize)> = (0..10).map(|i| (i % 2, i * 17)).collect();
        let fd = fd_grad(&gentle, &gentle, &MaskImage::zeros(&g), &VectorField::zeros(&g), &k, cfg, &obj, 1e-5, &sample).unwrap();
        assert!(fd.iter().all(|x| x.abs() < 1e-8), "{fd:?}");
    }

    #[test]
    fn quadratic_term_fd_matches_two_l_v() {
        let g = grid2(16);
        let k = FluidKernel::new(&g, 3.0, 3).unwrap();
        let cfg = ShootingConfig::default();
        let s = ScalarImage::new(g.clone(), vec![0.5; g.len()]).unwrap();
        let v0 = smooth_field(&k, 8, 0.5).unwrap();
        let obj = Objective::ssd(1.0);
        let sample: Vec<(usize, usize)> = (0..10).map(|i| (i % 2, i * 23 + 1)).collect();
        let fd = fd_grad(&s, &s, &MaskImage::zeros(&g), &v0, &k, cfg, &obj, 1e-5, &sample).unwrap();
        let lv = k.apply_l(&v0).unwrap();
        for (&(c, x), f) in sample.iter().zip(&fd) {
            let want = 2.0 * lv.component(c)[x];
            assert!((f - want).abs() <= 1e-6 * want.abs().max(1.0), "{f} vs {want}");
        }
    }

    #[test]
    fn fd_error_shrinks_with_h() {
        let g = grid2(16);
        let k = FluidKernel::new(&g, 3.0, 3).unwrap();
        let cfg = ShootingConfig::default();
        let s = smooth_image(&g, 11).unwrap();
        let t = smooth_image(&g, 12).unwrap();
        let v0 = smooth_field(&k, 13, 1.0).unwrap();
        let obj = Objective::ssd(1.0);
        let mask = MaskImage::zeros(&g);
        let grad = grad_v0(&s, &t, &mask, &v0, &k, cfg, &obj).unwrap();
        let sample = vec![(0, 37), (1, 130)];
        let err = |h: f64| {
            let fd = fd_grad(&s, &t, &mask, &v0, &k, cfg, &obj, h, &sample).unwrap();
            sample.iter().zip(&fd).map(|(&(c, x), f)| (grad.component(c)[x] - f).abs()).fold(0.0, f64::max)
        };
        let (coarse, fine) = (err(1e-1), err(5e-2));
        assert!(fine < 0.4 * coarse, "{coarse} {fine}");
        assert!(fd_grad(&s, &t, &mask, &v0, &k, cfg, &obj, 0.0, &sample).is_err());
    }

    #[test]
    fn identical_images_converge_immediately() {
        let g = grid2(16);
        let s = smooth_image(&g, 1).unwrap();
        let cfg = RegistrationConfig { dist: DistKind::Ssd, ..Default::default() };
        let r = register(&s, &s, &MaskImage::zeros(&g), &cfg).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.v0.max_abs(), 0.0);
    }

    #[test]
    fn translation_pair_is_recovered() {
        let g = grid2(32);
        let s = {
            let k = FluidKernel::new(&g, 2.0, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let noise: Vec<f64> = (0..g.len()).map(|_| rng.random()).collect();
            let raw = k.apply_k_raw(&[noise]).remove(0);
            let (lo, hi) = raw.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            ScalarImage::new(g.clone(), raw.iter().map(|v| (v - lo) / (hi - lo)).collect()).unwrap()
        };
        let t = s.circular_shift(&[1, 0]);
        let cfg = RegistrationConfig { dist: DistKind::Ssd, ..Default::default() };
        let r = register(&s, &t, &MaskImage::zeros(&g), &cfg).unwrap();
        let before = ssd(&s, &t).unwrap();
        let after = ssd(&r.deformed, &t).unwrap();
        assert!(after <= 0.05 * before, "{after} vs {before}");
        let mean: Vec<f64> = r.v0.components().iter().map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        assert!((mean[0] - 1.0).abs() <= 0.1 && mean[1].abs() <= 0.1, "{mean:?}");
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        let k = cfg.kernel(&g).unwrap();
        let e = energy_metamorphic(&s, &t, &MaskImage::zeros(&g), &r.v0, &k, cfg.shooting().unwrap(), &cfg.objective()).unwrap();
        assert!((e.total - r.trace.last().unwrap()).abs() <= 1e-10 * e.total.abs().max(1.0));
        assert_eq!(e.total, r.report.total);
    }

    #[test]
    fn empty_mask_metamorph_equals_plain() {
        let g = grid2(16);
        let s = smooth_image(&g, 21).unwrap();
        let t = smooth_image(&g, 22).unwrap();
        for dist in [DistKind::Ssd, DistKind::Rmi] {
            let base = RegistrationConfig { dist, max_iters: 15, ..Default::default() };
            let meta = register(&s, &t, &MaskImage::zeros(&g), &base).unwrap();
            let plain = register(&s, &t, &random_mask(&g, 1).unwrap(), &RegistrationConfig { mode: Mode::Plain, ..base.clone() }).unwrap();
            assert_eq!(meta.trace.len(), plain.trace.len());
            for (a, b) in meta.trace.iter().zip(&plain.trace) {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(RegistrationConfig { max_iters: 0, ..Default::default() }.validate().is_err());
        assert!(RegistrationConfig { tol_rel: 0.0, ..Default::default() }.validate().is_err());
        assert!(RegistrationConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert_eq!("plain".parse::<Mode>().unwrap(), Mode::Plain);
        assert!("other".parse::<Mode>().is_err());
        let cfg: RegistrationConfig = serde_json::from_str(r#"{"dist":"ssd","max_iters":7}"#).unwrap();
        assert_eq!((cfg.dist, cfg.max_iters, cfg.mode), (DistKind::Ssd, 7, Mode::Metamorph));
        let lit = RegistrationConfig { rmi: RmiConfig { sign: RmiSign::Literal, ..Default::default() }, ..Default::default() };
        assert!(lit.validate().is_ok());
    }
}
