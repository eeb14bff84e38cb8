//! Synthetic ground truth: textured images, smooth random initial
//! velocities, deformed pairs with lattice landmarks, inserted tumors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{propagate_landmarks, shoot, warp, ShootingConfig, DEFAULT_STEPS};
use crate::grid::{DeformationField, GridDesc, LandmarkSet, MaskImage, ScalarImage, VectorField};
use crate::operators::{FluidKernel, DEFAULT_ALPHA, DEFAULT_POWER};
use crate::par;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Bullseye,
    #[default]
    Blobs,
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bullseye" => Ok(Shape::Bullseye),
            "blobs" => Ok(Shape::Blobs),
            other => Err(Error::InvalidParameter(format!("unknown shape '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Source,
    #[default]
    Target,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TumorSpec {
    /// Voxel coordinates; drawn from the seed when absent.
    pub center: Option<Vec<f64>>,
    pub radius: f64,
    pub delta: f64,
    pub placed_in: Placement,
}

impl Default for TumorSpec {
    fn default() -> Self {
        TumorSpec {
            center: None,
            radius: 8.0,
            delta: 1.0,
            placed_in: Placement::Target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub grid: GridDesc,
    pub shape: Shape,
    pub v0_amplitude: f64,
    pub tumor: Option<TumorSpec>,
    pub landmark_spacing: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub alpha: f64,
    pub power: u32,
    pub steps: usize,
}

impl SynthSpec {
    pub fn new(grid: GridDesc, seed: u64) -> Self {
        SynthSpec {
            grid,
            shape: Shape::Blobs,
            v0_amplitude: 1.0,
            tumor: None,
            landmark_spacing: 8,
            noise_sigma: 0.0,
            seed,
            alpha: DEFAULT_ALPHA,
            power: DEFAULT_POWER,
            steps: DEFAULT_STEPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v0_amplitude.is_finite() && self.v0_amplitude >= 0.0) {
            return Err(Error::InvalidParameter("amplitude must be >= 0".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter("noise sigma must be >= 0".into()));
        }
        if self.landmark_spacing == 0 {
            return Err(Error::InvalidParameter("landmark spacing must be >= 1".into()));
        }
        if let Some(t) = &self.tumor {
            let min = *self.grid.sizes().iter().min().expect("dim >= 2") as f64;
            if !(t.radius > 0.0 && t.radius < min / 4.0) {
                return Err(Error::InvalidParameter(format!(
                    "tumor radius {} must lie in (0, {})",
                    t.radius,
                    min / 4.0
                )));
            }
            if !t.delta.is_finite() {
                return Err(Error::InvalidParameter("tumor delta must be finite".into()));
            }
        }
        ShootingConfig::new(self.steps)?;
        Ok(())
    }

    /// Independent streams for image, velocity, tumor and noise.
    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub source: ScalarImage,
    pub target: ScalarImage,
    pub v0_true: VectorField,
    pub psi_true: DeformationField,
    pub landmarks_source: LandmarkSet,
    pub landmarks_target: LandmarkSet,
    pub mask_source: MaskImage,
    pub mask_target: MaskImage,
}

fn rescale_unit(grid: &GridDesc, raw: Vec<f64>) -> Result<ScalarImage> {
    let (lo, hi) = raw.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let data = if span > 0.0 {
        raw.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; raw.len()]
    };
    ScalarImage::new(grid.clone(), data)
}

fn blobs(grid: &GridDesc, rng: &mut ChaCha8Rng) -> Result<ScalarImage> {
    let d = grid.dim();
    let min = *grid.sizes().iter().min().expect("dim >= 2") as f64;
    // roughly one blob per 32 voxels keeps texture everywhere
    let count = (grid.len() / 32).clamp(8, 2048);
    let blobs: Vec<(Vec<f64>, f64, f64)> = (0..count)
        .map(|_| {
            let c = grid.sizes().iter().map(|&n| rng.random::<f64>() * n as f64).collect();
            let sigma = min * rng.random_range(1.0 / 32.0..1.0 / 10.0);
            let amp = rng.random_range(0.3..1.0) * if rng.random::<f64>() < 0.25 { -1.0 } else { 1.0 };
            (c, sigma, amp)
        })
        .collect();
    let raw = par::map_index(grid.len(), |i| {
        let p: Vec<f64> = (0..d).map(|j| grid.coord(i, j) as f64).collect();
        blobs
            .iter()
            .map(|(c, sigma, amp)| {
                let r2: f64 = grid.wrapped_delta(&p, c).iter().map(|x| x * x).sum();
                amp * (-0.5 * r2 / (sigma * sigma)).exp()
            })
            .sum()
    });
    rescale_unit(grid, raw)
}

/// Rings about the grid center; symmetric under x ↦ −x about N/2.
fn bullseye(grid: &GridDesc, rng: &mut ChaCha8Rng) -> Result<ScalarImage> {
    let d = grid.dim();
    let min = *grid.sizes().iter().min().expect("dim >= 2") as f64;
    let period = min / rng.random_range(6.0..10.0);
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let reach = 0.38 * min;
    let half: Vec<f64> = grid.sizes().iter().map(|&n| (n / 2) as f64).collect();
    let data = par::map_index(grid.len(), |i| {
        let r2: f64 = (0..d)
            .map(|j| {
                let x = grid.coord(i, j) as f64 - half[j];
                x * x
            })
            .sum();
        let r = r2.sqrt();
        let envelope = (-(r / reach).powi(4)).exp();
        envelope * 0.5 * (1.0 + (std::f64::consts::TAU * r / period + phase).cos())
    });
    ScalarImage::new(grid.clone(), data)
}

/// Deterministic smooth image in [0, 1].
pub fn make_image(spec: &SynthSpec) -> Result<ScalarImage> {
    spec.validate()?;
    let mut rng = spec.rng(0);
    match spec.shape {
        Shape::Blobs => blobs(&spec.grid, &mut rng),
        Shape::Bullseye => bullseye(&spec.grid, &mut rng),
    }
}

/// K² applied to white noise, rescaled to a maximum magnitude of `amplitude`.
pub fn sample_v0(kernel: &FluidKernel, amplitude: f64, seed: u64) -> Result<VectorField> {
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return Err(Error::InvalidParameter("amplitude must be >= 0".into()));
    }
    let grid = kernel.grid();
    if amplitude == 0.0 {
        return Ok(VectorField::zeros(grid));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise: Vec<Vec<f64>> = (0..grid.dim())
        .map(|_| (0..grid.len()).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let smooth = kernel.apply_k_raw(&kernel.apply_k_raw(&noise));
    let v = VectorField::new(grid.clone(), smooth)?;
    let peak = v.max_norm();
    if peak == 0.0 {
        return Ok(VectorField::zeros(grid));
    }
    Ok(v.scaled(amplitude / peak))
}

/// Flat core with a raised-cosine rim over the outer quarter of the radius.
fn taper(r: f64, radius: f64) -> f64 {
    let core = TAPER_CORE * radius;
    if r <= core {
        1.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (r - core) / (radius - core)).cos())
    }
}

const TAPER_CORE: f64 = 0.75;

/// Adds a cosine-tapered disk of height `delta` (result clamped to [0, 1])
/// and returns it with the binary support mask.
pub fn insert_tumor(
    img: &ScalarImage,
    center: &[f64],
    radius: f64,
    delta: f64,
) -> Result<(ScalarImage, MaskImage)> {
    let grid = img.grid();
    let inside = center.len() == grid.dim()
        && radius > 0.0
        && center
            .iter()
            .zip(grid.sizes())
            .all(|(&c, &n)| c - radius >= 0.0 && c + radius <= (n - 1) as f64);
    if !inside {
        return Err(Error::TumorOutOfBounds {
            center: center.to_vec(),
            radius,
        });
    }
    let d = grid.dim();
    let rho = |i: usize| {
        (0..d)
            .map(|j| {
                let x = grid.coord(i, j) as f64 - center[j];
                x * x
            })
            .sum::<f64>()
            .sqrt()
    };
    let src = img.data();
    let data = par::map_index(grid.len(), |i| {
        let r = rho(i);
        if r < radius {
            let bump = taper(r, radius);
            (src[i] + delta * bump).clamp(0.0, 1.0)
        } else {
            src[i]
        }
    });
    let mask = par::map_index(grid.len(), |i| if rho(i) <= radius { 1.0 } else { 0.0 });
    Ok((ScalarImage::new(grid.clone(), data)?, MaskImage::new(grid.clone(), mask)?))
}

fn lattice(grid: &GridDesc, spacing: usize) -> Vec<Vec<f64>> {
    let d = grid.dim();
    let per_axis: Vec<usize> = grid.sizes().iter().map(|n| n.div_ceil(spacing)).collect();
    let total: usize = per_axis.iter().product();
    (0..total)
        .map(|mut k| {
            let mut p = vec![0.0; d];
            for j in (0..d).rev() {
                p[j] = ((k % per_axis[j]) * spacing + spacing / 2) as f64;
                k /= per_axis[j];
            }
            p
        })
        .collect()
}

fn tumor_center(spec: &SynthSpec, tumor: &TumorSpec) -> Vec<f64> {
    if let Some(c) = &tumor.center {
        return c.clone();
    }
    let mut rng = spec.rng(2);
    spec.grid
        .sizes()
        .iter()
        .map(|&n| {
            let lo = tumor.radius.ceil() + 1.0;
            let hi = (n - 1) as f64 - lo;
            rng.random_range(lo..=hi).round()
        })
        .collect()
}

/// Source image, its geodesic deformation and the pushed-forward landmarks,
/// with the optional tumor inserted after the warp.
pub fn make_pair(spec: &SynthSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let grid = &spec.grid;
    let kernel = FluidKernel::new(grid, spec.alpha, spec.power)?;
    let cfg = ShootingConfig::new(spec.steps)?;
    let mut source = make_image(spec)?;
    let v0_true = sample_v0(&kernel, spec.v0_amplitude, spec.seed)?;
    let path = shoot(&kernel, &v0_true, cfg)?;
    let mut target = warp(&source, path.psi())?;
    if spec.noise_sigma > 0.0 {
        let mut rng = spec.rng(3);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("positive sigma");
        let noisy = target.data().iter().map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0)).collect();
        target = ScalarImage::new(grid.clone(), noisy)?;
    }

    let mut points = lattice(grid, spec.landmark_spacing);
    let mut mask_source = MaskImage::zeros(grid);
    let mut mask_target = MaskImage::zeros(grid);
    if let Some(tumor) = &spec.tumor {
        let center = tumor_center(spec, tumor);
        if matches!(tumor.placed_in, Placement::Source | Placement::Both) {
            (source, mask_source) = insert_tumor(&source, &center, tumor.radius, tumor.delta)?;
        }
        if matches!(tumor.placed_in, Placement::Target | Placement::Both) {
            (target, mask_target) = insert_tumor(&target, &center, tumor.radius, tumor.delta)?;
        }
        // keep landmarks whose source and target positions avoid the disk
        let pushed = propagate_landmarks(&LandmarkSet::new(points.clone())?, path.velocities(), cfg)?;
        let outside = |p: &[f64]| {
            let r2: f64 = grid.wrapped_delta(p, &center).iter().map(|x| x * x).sum();
            r2.sqrt() > tumor.radius
        };
        points = points
            .into_iter()
            .zip(&pushed.points)
            .filter(|(p, q)| outside(p) && outside(q))
            .map(|(p, _)| p)
            .collect();
    }
    let landmarks_source = LandmarkSet::new(points)?;
    let landmarks_target = propagate_landmarks(&landmarks_source, path.velocities(), cfg)?;
    Ok(SyntheticPair {
        source,
        target,
        v0_true,
        psi_true: path.psi().clone(),
        landmarks_source,
        landmarks_target,
        mask_source,
        mask_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ssd;

    fn grid2(n: usize) -> GridDesc {
        GridDesc::with_sizes(&[n, n]).unwrap()
    }

    #[test]
    fn images_are_deterministic_and_in_range() {
        for shape in [Shape::Blobs, Shape::Bullseye] {
            for seed in 0..50 {
                let spec = SynthSpec { shape, ..SynthSpec::new(grid2(32), seed) };
                let a = make_image(&spec).unwrap();
                assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
                if seed < 3 {
                    assert_eq!(a.data(), make_image(&spec).unwrap().data());
                }
            }
        }
        let a = make_image(&SynthSpec::new(grid2(32), 1)).unwrap();
        let b = make_image(&SynthSpec::new(grid2(32), 2)).unwrap();
        assert_ne!(a.data(), b.data());
        let g3 = GridDesc::with_sizes(&[12, 12, 12]).unwrap();
        let c = make_image(&SynthSpec::new(g3, 4)).unwrap();
        assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bullseye_is_centrally_symmetric() {
        let g = grid2(32);
        let img = make_image(&SynthSpec { shape: Shape::Bullseye, ..SynthSpec::new(g.clone(), 9) }).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                let rot = img.at(&[(32 - i) % 32, (32 - j) % 32]);
                assert!((img.at(&[i, j]) - rot).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sampled_velocity_amplitude_and_spectrum() {
        let g = grid2(64);
        let k = FluidKernel::new(&g, 3.0, 3).unwrap();
        assert_eq!(sample_v0(&k, 0.0, 1).unwrap().max_abs(), 0.0);
        let v = sample_v0(&k, 1.5, 2).unwrap();
        assert!((v.max_norm() - 1.5).abs() <= 1e-12);
        assert_eq!(v.components(), sample_v0(&k, 1.5, 2).unwrap().components());
        assert!(sample_v0(&k, -1.0, 2).is_err());

        // energy below half the Nyquist frequency
        use num_complex::Complex;
        let mut planner = rustfft::FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(64);
        let (mut low, mut total) = (0.0, 0.0);
        for c in v.components() {
            let mut buf: Vec<Complex<f64>> = c.iter().map(|&x| Complex::new(x, 0.0)).collect();
            for row in buf.chunks_mut(64) {
                fft.process(row);
            }
            for col in 0..64 {
                let mut line: Vec<Complex<f64>> = (0..64).map(|r| buf[r * 64 + col]).collect();
                fft.process(&mut line);
                for (r, z) in line.iter().enumerate() {
                    let f = |k: usize| k.min(64 - k);
                    let e = z.norm_sqr();
                    total += e;
                    if f(r) < 16 && f(col) < 16 {
                        low += e;
                    }
                }
            }
        }
        assert!(low >= 0.9 * total, "{}", low / total);
    }

    #[test]
    fn tumor_insertion() {
        let g = grid2(64);
        let img = ScalarImage::new(g.clone(), vec![0.3; g.len()]).unwrap();
        let (same, mask) = insert_tumor(&img, &[32.0, 32.0], 6.0, 0.0).unwrap();
        assert_eq!(same.data(), img.data());
        assert!(mask.count(0.5) > 0);
        let (bumped, _) = insert_tumor(&img, &[32.0, 32.0], 6.0, 0.5).unwrap();
        assert!((bumped.at(&[32, 32]) - 0.8).abs() < 1e-15);
        let (capped, _) = insert_tumor(&img, &[32.0, 32.0], 6.0, 0.9).unwrap();
        assert_eq!(capped.at(&[32, 32]), 1.0);
        for r in [4.0, 6.0, 8.0, 12.0] {
            let (_, m) = insert_tumor(&img, &[32.0, 32.0], r, 0.5).unwrap();
            let area = std::f64::consts::PI * r * r;
            assert!((m.count(0.5) as f64 - area).abs() <= 0.1 * area);
        }
        assert!(matches!(insert_tumor(&img, &[3.0, 32.0], 6.0, 0.5), Err(Error::TumorOutOfBounds { .. })));
        assert!(insert_tumor(&img, &[32.0], 6.0, 0.5).is_err());
    }

    #[test]
    fn pair_without_tumor_is_self_consistent() {
        let g = grid2(32);
        let still = make_pair(&SynthSpec { v0_amplitude: 0.0, ..SynthSpec::new(g.clone(), 3) }).unwrap();
        assert_eq!(still.source.data(), still.target.data());
        assert_eq!(still.landmarks_source.points, still.landmarks_target.points);
        assert_eq!(still.landmarks_source.len(), 16);

        let pair = make_pair(&SynthSpec::new(g.clone(), 3)).unwrap();
        assert_eq!(ssd(&warp(&pair.source, &pair.psi_true).unwrap(), &pair.target).unwrap(), 0.0);
        assert!(pair.mask_source.is_empty_mask() && pair.mask_target.is_empty_mask());
        assert!(pair.psi_true.jacobian_determinant().data().iter().all(|&d| d > 0.0));
        let again = make_pair(&SynthSpec::new(g, 3)).unwrap();
        assert_eq!(pair.target.data(), again.target.data());
        assert_eq!(pair.landmarks_target.points, again.landmarks_target.points);
    }

    #[test]
    fn pair_with_target_tumor() {
        let g = grid2(64);
        let tumor = TumorSpec { center: Some(vec![30.0, 34.0]), ..TumorSpec::default() };
        let spec = SynthSpec { tumor: Some(tumor), ..SynthSpec::new(g.clone(), 5) };
        let pair = make_pair(&spec).unwrap();
        let clean = make_pair(&SynthSpec { tumor: None, ..spec.clone() }).unwrap();
        assert_eq!(pair.source.data(), clean.source.data());
        assert!(pair.mask_source.is_empty_mask());
        for i in 0..g.len() {
            let c = g.coords(i);
            let r = ((c[0] as f64 - 30.0).powi(2) + (c[1] as f64 - 34.0).powi(2)).sqrt();
            assert_eq!(pair.mask_target.data()[i], if r <= 8.0 { 1.0 } else { 0.0 });
            if r > 8.0 {
                assert_eq!(pair.target.data()[i], clean.target.data()[i]);
            }
        }
        assert!(pair.landmarks_source.len() < clean.landmarks_source.len());
        for p in &pair.landmarks_source.points {
            assert!(((p[0] - 30.0).powi(2) + (p[1] - 34.0).powi(2)).sqrt() > 8.0);
        }

        let both = make_pair(&SynthSpec { tumor: Some(TumorSpec { placed_in: Placement::Both, ..TumorSpec::default() }), ..SynthSpec::new(g.clone(), 6) }).unwrap();
        assert_eq!(both.mask_source.data(), both.mask_target.data());
        assert!(!both.mask_source.is_empty_mask());

        let edge = TumorSpec { center: Some(vec![2.0, 30.0]), ..TumorSpec::default() };
        assert!(make_pair(&SynthSpec { tumor: Some(edge), ..SynthSpec::new(g.clone(), 1) }).is_err());
        let huge = TumorSpec { radius: 16.0, ..TumorSpec::default() };
        assert!(make_pair(&SynthSpec { tumor: Some(huge), ..SynthSpec::new(g, 1) }).is_err());
    }
}
