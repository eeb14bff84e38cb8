//! Appearance-change masks: estimators, the union mask, label
//! augmentation and the alternating segmentation/registration loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{propagate_label, warp, GeodesicPath, LabelInterp};
use crate::grid::{GridDesc, LandmarkSet, MaskImage, ScalarImage};
use crate::metrics::{dice, energy_metamorphic, loss_joint, EnergyReport, DEFAULT_GAMMA};
use crate::operators::FluidKernel;
use crate::optimize::{register_from, register_with_kernel, Mode, RegistrationConfig, RegistrationResult};
use crate::par;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Oracle,
    #[default]
    Residual,
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(EstimatorKind::Oracle),
            "residual" => Ok(EstimatorKind::Residual),
            other => Err(Error::InvalidParameter(format!("unknown estimator '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskEstimator {
    pub kind: EstimatorKind,
    pub smooth_sigma: f64,
    /// Fixed residual threshold; Otsu when absent.
    pub threshold: Option<f64>,
    pub min_area: usize,
}

impl Default for MaskEstimator {
    fn default() -> Self {
        MaskEstimator {
            kind: EstimatorKind::Residual,
            smooth_sigma: 2.0,
            threshold: None,
            min_area: 9,
        }
    }
}

impl MaskEstimator {
    pub fn oracle() -> Self {
        MaskEstimator {
            kind: EstimatorKind::Oracle,
            ..Default::default()
        }
    }

    pub fn residual() -> Self {
        MaskEstimator::default()
    }
}

/// One image pair with whatever ground truth is available.
#[derive(Clone, Debug)]
pub struct PairData {
    pub name: String,
    pub source: ScalarImage,
    pub target: ScalarImage,
    pub truth_source: Option<MaskImage>,
    pub truth_target: Option<MaskImage>,
    pub landmarks: Option<(LandmarkSet, LandmarkSet)>,
}

impl PairData {
    pub fn new(name: impl Into<String>, source: ScalarImage, target: ScalarImage) -> Self {
        PairData {
            name: name.into(),
            source,
            target,
            truth_source: None,
            truth_target: None,
            landmarks: None,
        }
    }

    pub fn truth_union(&self) -> Option<Result<MaskImage>> {
        match (&self.truth_source, &self.truth_target) {
            (Some(a), Some(b)) => Some(union_mask(a, b)),
            (Some(a), None) | (None, Some(a)) => Some(Ok(a.clone())),
            (None, None) => None,
        }
    }
}

/// Periodic separable Gaussian blur, truncated at 3σ.
pub fn gaussian_smooth(img: &ScalarImage, sigma: f64) -> Result<ScalarImage> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let grid = img.grid();
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= norm);
    let mut data = img.data().to_vec();
    for axis in 0..grid.dim() {
        let src = data;
        data = par::map_index(grid.len(), |i| {
            taps.iter()
                .enumerate()
                .map(|(k, w)| w * src[grid.shifted(i, axis, k as isize - radius)])
                .sum()
        });
    }
    ScalarImage::new(grid.clone(), data)
}

/// Otsu threshold over a 256-bin histogram of `values` on [0, max].
pub fn otsu_threshold(values: &[f64]) -> f64 {
    const BINS: usize = 256;
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0.0;
    }
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = ((v.max(0.0) / max) * (BINS - 1) as f64).round() as usize;
        hist[b.min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(b, &c)| b as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0);
    for (b, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += b as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = b;
        }
    }
    // voxels strictly above the bin edge form the foreground
    (best_bin as f64 + 0.5) / (BINS - 1) as f64 * max
}

/// Face-connected components of `on`, wrapping periodically.
pub fn connected_components(grid: &GridDesc, on: &[bool]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; on.len()];
    let mut comps = Vec::new();
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            for axis in 0..grid.dim() {
                for j in [grid.next(i, axis), grid.prev(i, axis)] {
                    if on[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Smoothed signed residual `target − moving`.
fn residual_field(est: &MaskEstimator, moving: &ScalarImage, target: &ScalarImage) -> Result<ScalarImage> {
    let signed = ScalarImage::new(
        target.grid().clone(),
        target.data().iter().zip(moving.data()).map(|(t, s)| t - s).collect(),
    )?;
    gaussian_smooth(&signed, est.smooth_sigma)
}

fn threshold_masks(est: &MaskEstimator, smooth: &ScalarImage, threshold: Option<f64>) -> Result<(MaskImage, MaskImage)> {
    let grid = smooth.grid();
    let magnitude: Vec<f64> = smooth.data().iter().map(|v| v.abs()).collect();
    let mut source = vec![0.0; grid.len()];
    let mut tgt = vec![0.0; grid.len()];
    if magnitude.iter().all(|&v| v == 0.0) {
        return Ok((MaskImage::new(grid.clone(), source)?, MaskImage::new(grid.clone(), tgt)?));
    }
    let threshold = threshold
        .or(est.threshold)
        .unwrap_or_else(|| otsu_threshold(&magnitude));
    let on: Vec<bool> = magnitude.iter().map(|&v| v > threshold).collect();
    for comp in connected_components(grid, &on) {
        if comp.len() < est.min_area {
            continue;
        }
        // the brighter side owns the change
        let balance: f64 = comp.iter().map(|&i| smooth.data()[i]).sum();
        let dest = if balance > 0.0 { &mut tgt } else { &mut source };
        for i in comp {
            dest[i] = 1.0;
        }
    }
    Ok((MaskImage::new(grid.clone(), source)?, MaskImage::new(grid.clone(), tgt)?))
}

fn residual_masks(est: &MaskEstimator, moving: &ScalarImage, target: &ScalarImage) -> Result<(MaskImage, MaskImage)> {
    threshold_masks(est, &residual_field(est, moving, target)?, None)
}

const THRESHOLD_GRID: usize = 64;

/// Residual threshold with the best mean Dice against the labels, searched
/// on a uniform grid below the largest residual.
fn fit_threshold(est: &MaskEstimator, labeled: &[(&ScalarImage, &MaskImage)]) -> Result<Option<f64>> {
    let top = labeled
        .iter()
        .flat_map(|(f, _)| f.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    if labeled.is_empty() || top == 0.0 {
        return Ok(None);
    }
    let candidates: Vec<f64> = (1..THRESHOLD_GRID)
        .map(|j| top * j as f64 / THRESHOLD_GRID as f64)
        .collect();
    let scores = par::map_items(&candidates, |&t| -> Result<f64> {
        let mut score = 0.0;
        for (field, truth) in labeled {
            let (a, b) = threshold_masks(est, field, Some(t))?;
            score += dice(truth, &union_mask(&a, &b)?, 0.5)?;
        }
        Ok(score)
    });
    let mut best = (f64::NEG_INFINITY, None);
    for (t, score) in candidates.iter().zip(scores) {
        let score = score?;
        if score > best.0 {
            best = (score, Some(*t));
        }
    }
    Ok(best.1)
}

/// Masks (U_S, U_T) of appearance-changing areas for one pair. The
/// residual estimator compares `context` (a deformed source) instead of
/// the source when given.
pub fn estimate_masks(
    est: &MaskEstimator,
    pair: &PairData,
    context: Option<&ScalarImage>,
) -> Result<(MaskImage, MaskImage)> {
    let grid = pair.source.grid();
    grid.ensure_same(pair.target.grid())?;
    match est.kind {
        EstimatorKind::Oracle => match (&pair.truth_source, &pair.truth_target) {
            (None, None) => Err(Error::MissingLabels),
            (s, t) => Ok((
                s.clone().unwrap_or_else(|| MaskImage::zeros(grid)),
                t.clone().unwrap_or_else(|| MaskImage::zeros(grid)),
            )),
        },
        EstimatorKind::Residual => {
            let moving = context.unwrap_or(&pair.source);
            grid.ensure_same(moving.grid())?;
            residual_masks(est, moving, &pair.target)
        }
    }
}

/// Pointwise maximum.
pub fn union_mask(a: &MaskImage, b: &MaskImage) -> Result<MaskImage> {
    a.grid().ensure_same(b.grid())?;
    MaskImage::new(
        a.grid().clone(),
        a.data().iter().zip(b.data()).map(|(x, y)| x.max(*y)).collect(),
    )
}

/// Deformed source with its label carried along (nearest neighbor).
pub fn augment(source: &ScalarImage, label: &MaskImage, path: &GeodesicPath) -> Result<(ScalarImage, MaskImage)> {
    Ok((
        warp(source, path.psi())?,
        propagate_label(label, path.psi(), LabelInterp::Nearest)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    pub q: usize,
    pub gamma: f64,
    pub registration: RegistrationConfig,
    pub augment: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            q: 5,
            gamma: DEFAULT_GAMMA,
            registration: RegistrationConfig::default(),
            augment: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AugmentedSample {
    pub pair: String,
    pub iteration: usize,
    pub image: ScalarImage,
    pub label: MaskImage,
}

#[derive(Debug)]
pub struct PairOutcome {
    pub name: String,
    pub result: Option<RegistrationResult>,
    pub error: Option<String>,
    pub mask_source: MaskImage,
    pub mask_target: MaskImage,
    /// 1 − Dice of the estimated union against the true union, when known.
    pub seg_loss: Option<f64>,
}

#[derive(Debug)]
pub struct JointResult {
    pub pairs: Vec<PairOutcome>,
    /// Pair-averaged loss per outer iteration.
    pub history: Vec<EnergyReport>,
    pub augmented: Vec<AugmentedSample>,
}

impl JointResult {
    pub fn failures(&self) -> usize {
        self.pairs.iter().filter(|p| p.result.is_none()).count()
    }
}

#[derive(Clone)]
struct PairState {
    us: MaskImage,
    ut: MaskImage,
    seg: Option<f64>,
    result: RegistrationResult,
}

impl PairState {
    fn loss(&self, gamma: f64) -> f64 {
        self.result.report.total + gamma * self.seg.unwrap_or(0.0)
    }
}

struct Fit<'a> {
    dataset: &'a [PairData],
    truths: Vec<Option<MaskImage>>,
    kernel: FluidKernel,
    reg: RegistrationConfig,
    gamma: f64,
}

impl Fit<'_> {
    fn seg(&self, k: usize, union: &MaskImage) -> Result<Option<f64>> {
        self.truths[k]
            .as_ref()
            .map(|t| dice(t, union, 0.5).map(|d| 1.0 - d))
            .transpose()
    }

    fn start(&self, est: &MaskEstimator, k: usize) -> Result<PairState> {
        let pair = &self.dataset[k];
        let (us, ut) = estimate_masks(est, pair, None)?;
        let union = union_mask(&us, &ut)?;
        let seg = self.seg(k, &union)?;
        let result = register_with_kernel(&pair.source, &pair.target, &union, &self.kernel, &self.reg)?;
        Ok(PairState { us, ut, seg, result })
    }

    /// Takes the proposed masks only if neither the joint loss at the
    /// current v0 nor the segmentation loss gets worse, then continues the
    /// registration from the current v0.
    fn refine(&self, k: usize, state: &PairState, proposal: Option<(MaskImage, MaskImage)>) -> Result<PairState> {
        let pair = &self.dataset[k];
        let mut next = state.clone();
        if let Some((us, ut)) = proposal {
            let union = union_mask(&us, &ut)?;
            let seg = self.seg(k, &union)?;
            let seg_ok = match (seg, state.seg) {
                (Some(new), Some(old)) => new <= old,
                _ => true,
            };
            if seg_ok {
                let shoot_cfg = self.reg.shooting()?;
                let objective = self.reg.objective();
                match energy_metamorphic(&pair.source, &pair.target, &union, &state.result.v0, &self.kernel, shoot_cfg, &objective) {
                    Ok(e) if e.total + self.gamma * seg.unwrap_or(0.0) <= state.loss(self.gamma) => {
                        next.us = us;
                        next.ut = ut;
                        next.seg = seg;
                    }
                    Ok(_) => {}
                    Err(err) if err.is_numerical() => {}
                    Err(err) => return Err(err),
                }
            }
        }
        let union = union_mask(&next.us, &next.ut)?;
        next.result = register_from(&pair.source, &pair.target, &union, &self.kernel, &self.reg, &state.result.v0)?;
        Ok(next)
    }
}

/// Alternates mask estimation and metamorphic registration `q` times as a
/// block descent on the joint loss: each pass may only lower it.
pub fn joint_fit(dataset: &[PairData], est: &MaskEstimator, cfg: &JointConfig) -> Result<JointResult> {
    if cfg.q < 1 {
        return Err(Error::InvalidParameter("q must be >= 1".into()));
    }
    if !(cfg.gamma.is_finite() && cfg.gamma >= 0.0) {
        return Err(Error::InvalidParameter("gamma must be >= 0".into()));
    }
    cfg.registration.validate()?;
    let Some(first) = dataset.first() else {
        return Err(Error::InvalidParameter("empty dataset".into()));
    };
    let grid = first.source.grid();
    for pair in dataset {
        grid.ensure_same(pair.source.grid())?;
        grid.ensure_same(pair.target.grid())?;
    }
    let fit = Fit {
        dataset,
        truths: dataset
            .iter()
            .map(|p| p.truth_union().transpose())
            .collect::<Result<_>>()?,
        kernel: cfg.registration.kernel(grid)?,
        reg: RegistrationConfig {
            mode: Mode::Metamorph,
            ..cfg.registration.clone()
        },
        gamma: cfg.gamma,
    };
    let indices: Vec<usize> = (0..dataset.len()).collect();

    let mut states: Vec<std::result::Result<PairState, String>> =
        par::map_items(&indices, |&k| fit.start(est, k).map_err(|e| e.to_string()));
    let mut history = Vec::with_capacity(cfg.q);
    let mut augmented = Vec::new();
    for iteration in 0..cfg.q {
        if iteration > 0 {
            let proposals = propose(est, &fit, &states)?;
            states = par::map_items(&indices, |&k| match &states[k] {
                Ok(state) => fit.refine(k, state, proposals[k].clone()).map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            });
        }
        let (mut dist, mut reg, mut seg, mut ok, mut seg_count) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for (pair, state) in dataset.iter().zip(&states) {
            let Ok(state) = state else { continue };
            dist += state.result.report.dist;
            reg += state.result.report.reg;
            ok += 1;
            if let Some(s) = state.seg {
                seg += s;
                seg_count += 1;
            }
            if cfg.augment {
                let label = pair.truth_source.clone().unwrap_or_else(|| state.us.clone());
                let (image, label) = augment(&pair.source, &label, &state.result.path)?;
                augmented.push(AugmentedSample {
                    pair: pair.name.clone(),
                    iteration,
                    image,
                    label,
                });
            }
        }
        let n = ok.max(1) as f64;
        let seg_mean = if seg_count > 0 { seg / seg_count as f64 } else { 0.0 };
        history.push(loss_joint(dist / n, reg / n, seg_mean, cfg.gamma)?);
    }

    let pairs = dataset
        .iter()
        .zip(states)
        .map(|(pair, state)| match state {
            Ok(s) => PairOutcome {
                name: pair.name.clone(),
                result: Some(s.result),
                error: None,
                mask_source: s.us,
                mask_target: s.ut,
                seg_loss: s.seg,
            },
            Err(err) => PairOutcome {
                name: pair.name.clone(),
                result: None,
                error: Some(err),
                mask_source: MaskImage::zeros(grid),
                mask_target: MaskImage::zeros(grid),
                seg_loss: None,
            },
        })
        .collect();
    Ok(JointResult {
        pairs,
        history,
        augmented,
    })
}

/// Mask proposals from the residual against each pair's deformed source,
/// with the threshold refit on the labeled pairs. Oracle masks never change.
fn propose(
    est: &MaskEstimator,
    fit: &Fit<'_>,
    states: &[std::result::Result<PairState, String>],
) -> Result<Vec<Option<(MaskImage, MaskImage)>>> {
    if est.kind == EstimatorKind::Oracle {
        return Ok(vec![None; states.len()]);
    }
    let fields: Vec<Option<ScalarImage>> = states
        .iter()
        .zip(fit.dataset)
        .map(|(state, pair)| match state {
            Ok(s) => residual_field(est, &s.result.deformed, &pair.target).map(Some),
            Err(_) => Ok(None),
        })
        .collect::<Result<_>>()?;
    let labeled: Vec<(&ScalarImage, &MaskImage)> = fields
        .iter()
        .zip(&fit.truths)
        .filter_map(|(f, t)| Some((f.as_ref()?, t.as_ref()?)))
        .collect();
    let threshold = fit_threshold(est, &labeled)?;
    fields
        .iter()
        .map(|f| f.as_ref().map(|f| threshold_masks(est, f, threshold)).transpose())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesic::{shoot, ShootingConfig};
    use crate::grid::VectorField;
    use crate::metrics::DistKind;
    use crate::operators::FluidKernel;
    use crate::optimize::register;
    use crate::synth::{make_pair, SynthSpec, TumorSpec};

    fn grid2(n: usize) -> GridDesc {
        GridDesc::with_sizes(&[n, n]).unwrap()
    }

    fn mask(g: &GridDesc, vals: Vec<f64>) -> MaskImage {
        MaskImage::new(g.clone(), vals).unwrap()
    }

    fn tumor_pair(seed: u64, n: usize) -> PairData {
        let spec = SynthSpec {
            tumor: Some(TumorSpec { radius: (n / 8) as f64, ..TumorSpec::default() }),
            ..SynthSpec::new(grid2(n), seed)
        };
        let p = make_pair(&spec).unwrap();
        PairData {
            name: format!("pair{seed}"),
            source: p.source,
            target: p.target,
            truth_source: Some(p.mask_source),
            truth_target: Some(p.mask_target),
            landmarks: Some((p.landmarks_source, p.landmarks_target)),
        }
    }

    #[test]
    fn union_properties() {
        let g = grid2(4);
        let pad = |v: [f64; 4]| mask(&g, v.iter().cycle().take(16).cloned().collect());
        let a = pad([0.0, 0.3, 1.0, 0.2]);
        let b = pad([0.5, 0.6, 0.0, 0.2]);
        let c = pad([0.1, 0.9, 0.4, 0.0]);
        assert_eq!(union_mask(&a, &b).unwrap().data()[..4], [0.5, 0.6, 1.0, 0.2]);
        assert_eq!(union_mask(&a, &b).unwrap(), union_mask(&b, &a).unwrap());
        assert_eq!(union_mask(&a, &a).unwrap(), a);
        assert_eq!(union_mask(&MaskImage::zeros(&g), &b).unwrap(), b);
        let left = union_mask(&union_mask(&a, &b).unwrap(), &c).unwrap();
        let right = union_mask(&a, &union_mask(&b, &c).unwrap()).unwrap();
        assert_eq!(left, right);
        assert!(union_mask(&a, &MaskImage::zeros(&grid2(8))).is_err());
    }

    #[test]
    fn smoothing_and_otsu() {
        let g = grid2(16);
        let flat = ScalarImage::new(g.clone(), vec![0.4; 256]).unwrap();
        let s = gaussian_smooth(&flat, 2.0).unwrap();
        assert!(s.data().iter().all(|v| (v - 0.4).abs() < 1e-14));
        let spike = ScalarImage::from_fn(&g, |c| if c == [0, 0] { 1.0 } else { 0.0 }).unwrap();
        let s = gaussian_smooth(&spike, 1.5).unwrap();
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((s.at(&[1, 0]) - s.at(&[15, 0])).abs() < 1e-15);

        let mut vals = vec![0.1; 90];
        vals.extend(vec![0.9; 10]);
        let t = otsu_threshold(&vals);
        assert!(t > 0.1 && t < 0.9);
        assert_eq!(otsu_threshold(&[0.0; 10]), 0.0);
    }

    #[test]
    fn components_wrap_around() {
        let g = grid2(8);
        let mut on = vec![false; 64];
        on[g.index(&[0, 0])] = true;
        on[g.index(&[7, 0])] = true;
        on[g.index(&[0, 7])] = true;
        on[g.index(&[4, 4])] = true;
        let comps = connected_components(&g, &on);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].len(), 3);
    }

    #[test]
    fn residual_on_identical_images_is_empty() {
        let p = tumor_pair(1, 32);
        let same = PairData::new("same", p.source.clone(), p.source.clone());
        let (us, ut) = estimate_masks(&MaskEstimator::residual(), &same, None).unwrap();
        assert!(us.is_empty_mask() && ut.is_empty_mask());
    }

    #[test]
    fn oracle_passthrough_and_missing_labels() {
        let p = tumor_pair(2, 32);
        let (us, ut) = estimate_masks(&MaskEstimator::oracle(), &p, None).unwrap();
        assert_eq!(Some(&us), p.truth_source.as_ref());
        assert_eq!(dice(&ut, p.truth_target.as_ref().unwrap(), 0.5).unwrap(), 1.0);
        let bare = PairData::new("bare", p.source.clone(), p.target.clone());
        assert!(matches!(estimate_masks(&MaskEstimator::oracle(), &bare, None), Err(Error::MissingLabels)));
    }

    #[test]
    fn residual_finds_bright_target_tumor() {
        let mut total = 0.0;
        for seed in 0..4 {
            let p = tumor_pair(seed, 64);
            let (us, ut) = estimate_masks(&MaskEstimator::residual(), &p, None).unwrap();
            let d = dice(&union_mask(&us, &ut).unwrap(), p.truth_target.as_ref().unwrap(), 0.5).unwrap();
            assert!(ut.count(0.5) > 0);
            assert!(us.data().iter().chain(ut.data()).all(|v| *v == 0.0 || *v == 1.0));
            total += d;
        }
        assert!(total / 4.0 >= 0.7, "{}", total / 4.0);
        let fixed = MaskEstimator { threshold: Some(10.0), ..MaskEstimator::residual() };
        let (us, ut) = estimate_masks(&fixed, &tumor_pair(0, 64), None).unwrap();
        assert!(us.is_empty_mask() && ut.is_empty_mask());
    }

    #[test]
    fn augment_identity_and_translation() {
        let g = grid2(16);
        let k = FluidKernel::new(&g, 3.0, 3).unwrap();
        let cfg = ShootingConfig::default();
        let img = ScalarImage::from_fn(&g, |c| (c[0] * 16 + c[1]) as f64 / 256.0).unwrap();
        let lbl = MaskImage::from_fn(&g, |c| if c[0] < 5 && c[1] < 7 { 1.0 } else { 0.0 }).unwrap();
        let id = GeodesicPath::identity(&g, cfg);
        let (a, b) = augment(&img, &lbl, &id).unwrap();
        assert_eq!((&a, &b), (&img, &lbl));
        let path = shoot(&k, &VectorField::constant(&g, &[2.0, 1.0]).unwrap(), cfg).unwrap();
        let (a, b) = augment(&img, &lbl, &path).unwrap();
        let shifted = img.circular_shift(&[2, 1]);
        assert!(a.data().iter().zip(shifted.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(b.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert_eq!(b.count(0.5), lbl.count(0.5));
    }

    fn quick_cfg(q: usize) -> JointConfig {
        JointConfig {
            q,
            registration: RegistrationConfig { dist: DistKind::Ssd, max_iters: 20, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn single_oracle_iteration_matches_register() {
        let p = tumor_pair(3, 32);
        let cfg = quick_cfg(1);
        let out = joint_fit(std::slice::from_ref(&p), &MaskEstimator::oracle(), &cfg).unwrap();
        let union = p.truth_union().unwrap().unwrap();
        let direct = register(&p.source, &p.target, &union, &cfg.registration).unwrap();
        let got = out.pairs[0].result.as_ref().unwrap();
        assert_eq!(got.trace, direct.trace);
        assert_eq!(got.v0, direct.v0);
        assert_eq!(out.pairs[0].seg_loss, Some(0.0));
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.augmented.len(), 1);
    }

    #[test]
    fn tumor_free_dataset_matches_plain() {
        let spec = SynthSpec::new(grid2(32), 4);
        let p = make_pair(&spec).unwrap();
        let pair = PairData::new("clean", p.source.clone(), p.target.clone());
        let same = PairData::new("same", p.source.clone(), p.source.clone());
        let cfg = quick_cfg(2);
        let out = joint_fit(&[same.clone(), pair.clone()], &MaskEstimator::residual(), &cfg).unwrap();
        assert!(out.pairs[0].mask_source.is_empty_mask() && out.pairs[0].mask_target.is_empty_mask());
        let plain = register(&same.source, &same.target, &MaskImage::zeros(same.source.grid()), &RegistrationConfig { mode: Mode::Plain, ..cfg.registration.clone() }).unwrap();
        assert_eq!(out.pairs[0].result.as_ref().unwrap().trace, plain.trace);
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.augmented.len(), 4);
        assert!(joint_fit(&[], &MaskEstimator::residual(), &cfg).is_err());
        assert!(joint_fit(&[pair], &MaskEstimator::residual(), &JointConfig { q: 0, ..cfg }).is_err());
    }

    #[test]
    fn failed_pairs_are_reported_not_fatal() {
        let p = tumor_pair(5, 32);
        let bare = PairData::new("bare", p.source.clone(), p.target.clone());
        let out = joint_fit(&[p, bare], &MaskEstimator::oracle(), &quick_cfg(1)).unwrap();
        assert_eq!(out.failures(), 1);
        assert!(out.pairs[1].error.as_deref().unwrap().contains("label"));
    }

    #[test]
    fn joint_loss_never_increases_and_dice_never_drops() {
        let data = vec![tumor_pair(41, 32), tumor_pair(42, 32)];
        let out = joint_fit(&data, &MaskEstimator::residual(), &quick_cfg(3)).unwrap();
        let h = &out.history;
        assert_eq!(h.len(), 3);
        for w in h.windows(2) {
            assert!(w[1].total <= w[0].total, "{:?}", h);
            assert!(w[1].seg <= w[0].seg, "{:?}", h);
        }
        assert_eq!(out.augmented.len(), 6);
    }
}
