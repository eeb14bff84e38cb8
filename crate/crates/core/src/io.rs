//! Grid files, landmark CSV and run reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{warp, ShootingConfig};
use crate::grid::{GridDesc, LandmarkSet, MaskImage, ScalarImage, VectorField};
use crate::metrics::{dice, landmark_error, mean_landmark_distance, rmi, ssd, RmiConfig};
use crate::optimize::RegistrationResult;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::InvalidParameter(format!("unknown dtype '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Scalar,
    Vector,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    pub dim: usize,
    pub sizes: Vec<usize>,
    pub spacing: Vec<f64>,
    pub dtype: Dtype,
    pub kind: GridKind,
}

/// Typed contents of a grid file.
#[derive(Clone, Debug)]
pub enum GridData {
    Scalar(ScalarImage),
    Vector(VectorField),
    Mask(MaskImage),
}

impl GridData {
    pub fn kind(&self) -> GridKind {
        match self {
            GridData::Scalar(_) => GridKind::Scalar,
            GridData::Vector(_) => GridKind::Vector,
            GridData::Mask(_) => GridKind::Mask,
        }
    }

    pub fn grid(&self) -> &GridDesc {
        match self {
            GridData::Scalar(s) => s.grid(),
            GridData::Vector(v) => v.grid(),
            GridData::Mask(m) => m.grid(),
        }
    }

    fn values(&self) -> std::borrow::Cow<'_, [f64]> {
        match self {
            GridData::Scalar(s) => s.data().into(),
            GridData::Vector(v) => v.to_interleaved().into(),
            GridData::Mask(m) => m.data().into(),
        }
    }
}

impl From<ScalarImage> for GridData {
    fn from(s: ScalarImage) -> Self {
        GridData::Scalar(s)
    }
}

impl From<VectorField> for GridData {
    fn from(v: VectorField) -> Self {
        GridData::Vector(v)
    }
}

impl From<MaskImage> for GridData {
    fn from(m: MaskImage) -> Self {
        GridData::Mask(m)
    }
}

fn kind_error(path: &Path, want: GridKind, got: GridKind) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: format!("expected kind {want:?}, found {got:?}"),
    }
}

pub fn save_grid(path: impl AsRef<Path>, obj: &GridData, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let grid = obj.grid();
    let header = GridHeader {
        dim: grid.dim(),
        sizes: grid.sizes().to_vec(),
        spacing: grid.spacing().to_vec(),
        dtype,
        kind: obj.kind(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    let values = obj.values();
    bytes.reserve(values.len() * dtype.size());
    for &v in values.iter() {
        match dtype {
            Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<GridHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(path, &bytes).map(|(h, _)| h)
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(GridHeader, usize)> {
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed("no header line".into()))?;
    let header: GridHeader =
        serde_json::from_slice(&bytes[..end]).map_err(|e| malformed(e.to_string()))?;
    if header.sizes.len() != header.dim || header.spacing.len() != header.dim {
        return Err(malformed(format!(
            "dim {} does not match sizes/spacing lengths",
            header.dim
        )));
    }
    Ok((header, end + 1))
}

/// Loads any grid file; f32 payloads are widened to f64.
pub fn load_grid(path: impl AsRef<Path>) -> Result<GridData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, offset) = parse_header(path, &bytes)?;
    let grid = GridDesc::new(header.sizes.clone(), header.spacing.clone()).map_err(|e| {
        Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })?;
    let comps = match header.kind {
        GridKind::Vector => grid.dim(),
        _ => 1,
    };
    let payload = &bytes[offset..];
    let expected = header.dtype.size() * comps * grid.len();
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let values: Vec<f64> = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(match header.kind {
        GridKind::Scalar => GridData::Scalar(ScalarImage::new(grid, values)?),
        GridKind::Vector => GridData::Vector(VectorField::from_interleaved(grid, &values)?),
        GridKind::Mask => GridData::Mask(MaskImage::new(grid, values)?),
    })
}

pub fn load_scalar(path: impl AsRef<Path>) -> Result<ScalarImage> {
    let path = path.as_ref();
    match load_grid(path)? {
        GridData::Scalar(s) => Ok(s),
        other => Err(kind_error(path, GridKind::Scalar, other.kind())),
    }
}

pub fn load_vector(path: impl AsRef<Path>) -> Result<VectorField> {
    let path = path.as_ref();
    match load_grid(path)? {
        GridData::Vector(v) => Ok(v),
        other => Err(kind_error(path, GridKind::Vector, other.kind())),
    }
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskImage> {
    let path = path.as_ref();
    match load_grid(path)? {
        GridData::Mask(m) => Ok(m),
        other => Err(kind_error(path, GridKind::Mask, other.kind())),
    }
}

/// Reads `id,x0,...,x{d-1}` rows; `dim` checks the column count when given.
pub fn load_landmarks(path: impl AsRef<Path>, dim: Option<usize>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let bad = |reason: String| Error::Landmarks {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let d = headers.len().saturating_sub(1);
    if headers.get(0) != Some("id") || d == 0 {
        return Err(bad("header must be id,x0,...".into()));
    }
    for (j, h) in headers.iter().skip(1).enumerate() {
        if h != format!("x{j}") {
            return Err(bad(format!("unexpected column '{h}'")));
        }
    }
    if let Some(want) = dim {
        if want != d {
            return Err(bad(format!("{d} coordinate columns for a {want}-d grid")));
        }
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let mut p = Vec::with_capacity(d);
        for field in rec.iter().skip(1) {
            p.push(
                field
                    .parse::<f64>()
                    .map_err(|e| bad(format!("row {row}: {e}")))?,
            );
        }
        labels.push(rec[0].to_string());
        points.push(p);
    }
    LandmarkSet::with_labels(points, labels)
}

pub fn save_landmarks(path: impl AsRef<Path>, set: &LandmarkSet) -> Result<()> {
    let path = path.as_ref();
    let d = set.points.first().map_or(0, Vec::len);
    let mut out = String::from("id");
    for j in 0..d {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for (label, p) in set.labels.iter().zip(&set.points) {
        out.push_str(label);
        for v in p {
            // {:?} is the shortest exact round-trip form
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub name: String,
    pub ssd_before: f64,
    pub ssd_after: f64,
    pub rmi_before: f64,
    pub rmi_after: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub landmark_l2_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub landmark_l2_after: Option<f64>,
    pub jac_det_min: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub timestamp: u64,
    pub config: serde_json::Value,
    pub pairs: Vec<PairReport>,
    pub aggregate: BTreeMap<String, Summary>,
}

/// Inputs to one pair's report besides the registration itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct PairExtras<'a> {
    pub landmarks: Option<(&'a LandmarkSet, &'a LandmarkSet)>,
    /// (estimated mask, true mask)
    pub labels: Option<(&'a MaskImage, &'a MaskImage)>,
}

pub fn pair_report(
    name: &str,
    source: &ScalarImage,
    target: &ScalarImage,
    result: &RegistrationResult,
    rmi_cfg: &RmiConfig,
    shoot_cfg: ShootingConfig,
    extras: PairExtras<'_>,
) -> Result<PairReport> {
    let warped = warp(source, result.path.psi())?;
    let (landmark_l2_before, landmark_l2_after) = match extras.landmarks {
        Some((a, b)) => (
            Some(mean_landmark_distance(source.grid(), a, b)?),
            Some(landmark_error(&result.path, shoot_cfg, a, b)?),
        ),
        None => (None, None),
    };
    let dice = match extras.labels {
        Some((est, truth)) => Some(dice(truth, est, 0.5)?),
        None => None,
    };
    let jac_det_min = result
        .path
        .psi()
        .jacobian_determinant()
        .data()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(PairReport {
        name: name.to_string(),
        ssd_before: ssd(source, target)?,
        ssd_after: ssd(&warped, target)?,
        rmi_before: rmi(source, target, rmi_cfg)?,
        rmi_after: rmi(&warped, target, rmi_cfg)?,
        dice,
        landmark_l2_before,
        landmark_l2_after,
        jac_det_min,
        iterations: result.iterations,
        converged: result.converged,
    })
}

fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Some(Summary {
        mean: values.iter().sum::<f64>() / n as f64,
        median,
    })
}

impl RunReport {
    /// Sorts pairs by name and fills the aggregate table.
    pub fn new(config: serde_json::Value, mut pairs: Vec<PairReport>) -> Result<Self> {
        pairs.sort_by(|a, b| a.name.cmp(&b.name));
        let mut aggregate = BTreeMap::new();
        type Field = (&'static str, fn(&PairReport) -> Option<f64>);
        let fields: [Field; 9] = [
            ("ssd_before", |p| Some(p.ssd_before)),
            ("ssd_after", |p| Some(p.ssd_after)),
            ("rmi_before", |p| Some(p.rmi_before)),
            ("rmi_after", |p| Some(p.rmi_after)),
            ("dice", |p| p.dice),
            ("landmark_l2_before", |p| p.landmark_l2_before),
            ("landmark_l2_after", |p| p.landmark_l2_after),
            ("jac_det_min", |p| Some(p.jac_det_min)),
            ("iterations", |p| Some(p.iterations as f64)),
        ];
        for (key, get) in fields {
            let vals: Vec<f64> = pairs.iter().filter_map(get).collect();
            if let Some(s) = summarize(&vals) {
                aggregate.insert(key.to_string(), s);
            }
        }
        let report = RunReport {
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            config,
            pairs,
            aggregate,
        };
        report.check_finite()?;
        Ok(report)
    }

    fn check_finite(&self) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            let vals = [
                Some(p.ssd_before),
                Some(p.ssd_after),
                Some(p.rmi_before),
                Some(p.rmi_after),
                p.dice,
                p.landmark_l2_before,
                p.landmark_l2_after,
                Some(p.jac_det_min),
            ];
            if vals.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "report",
                    index: i,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn save_report(path: impl AsRef<Path>, report: &RunReport) -> Result<()> {
    let path = path.as_ref();
    let mut text = report.to_json()?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// 8-bit min-max scaled PGM of a 2-D image or the middle slice along axis 0 of a 3-D one.
pub fn export_pgm(path: impl AsRef<Path>, img: &ScalarImage) -> Result<()> {
    let path = path.as_ref();
    let grid = img.grid();
    let sizes = grid.sizes();
    let (rows, cols, offset) = match sizes.len() {
        2 => (sizes[0], sizes[1], 0),
        _ => (sizes[1], sizes[2], (sizes[0] / 2) * sizes[1] * sizes[2]),
    };
    let slice = &img.data()[offset..offset + rows * cols];
    let (lo, hi) = slice
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(slice.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scalar(grid: &GridDesc, seed: u64) -> ScalarImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarImage::new(grid.clone(), (0..grid.len()).map(|_| rng.random::<f64>() * 7.0 - 3.0).collect()).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact_for_all_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridDesc::new(vec![5, 6, 4], vec![1.0, 0.5, 2.0]).unwrap();
        let s = random_scalar(&grid, 1);
        let v = VectorField::new(
            grid.clone(),
            (0..3).map(|j| random_scalar(&grid, 10 + j).into_data()).collect(),
        )
        .unwrap();
        let m = MaskImage::from_fn(&grid, |c| ((c[0] + c[1]) % 3) as f64 / 2.0).unwrap();

        let p = dir.path().join("s.grid");
        save_grid(&p, &s.clone().into(), Dtype::F64).unwrap();
        let back = load_scalar(&p).unwrap();
        assert_eq!(back.grid(), s.grid());
        assert!(back.data().iter().zip(s.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        save_grid(&p, &v.clone().into(), Dtype::F64).unwrap();
        let back = load_vector(&p).unwrap();
        assert_eq!(back.components(), v.components());

        save_grid(&p, &m.clone().into(), Dtype::F64).unwrap();
        assert_eq!(load_mask(&p).unwrap().data(), m.data());

        assert!(matches!(load_scalar(&p), Err(Error::MalformedHeader { .. })));
    }

    #[test]
    fn f32_rounding_is_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridDesc::with_sizes(&[8, 8]).unwrap();
        let s = random_scalar(&grid, 2);
        let p = dir.path().join("s.grid");
        save_grid(&p, &s.clone().into(), Dtype::F32).unwrap();
        let back = load_scalar(&p).unwrap();
        for (a, b) in back.data().iter().zip(s.data()) {
            assert!((a - b).abs() <= b.abs() * 2f64.powi(-24));
        }
        // f32 values survive a second trip unchanged
        save_grid(&p, &back.clone().into(), Dtype::F32).unwrap();
        assert_eq!(load_scalar(&p).unwrap().data(), back.data());
    }

    #[test]
    fn truncated_payload_is_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridDesc::with_sizes(&[4, 4]).unwrap();
        let p = dir.path().join("s.grid");
        save_grid(&p, &random_scalar(&grid, 3).into(), Dtype::F64).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        match load_grid(&p) {
            Err(Error::LengthMismatch { expected, found, .. }) => {
                assert_eq!(expected, 128);
                assert_eq!(found, 125);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_header_and_mask_range_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.grid");
        fs::write(&p, b"{\"dim\": 2, \"sizes\": [4]}\n").unwrap();
        assert!(matches!(load_grid(&p), Err(Error::MalformedHeader { .. })));
        fs::write(&p, b"no newline").unwrap();
        assert!(matches!(load_grid(&p), Err(Error::MalformedHeader { .. })));

        let grid = GridDesc::with_sizes(&[4, 4]).unwrap();
        let mut vals = vec![0.0; 16];
        vals[5] = 1.5;
        vals[9] = 2.0;
        let header = GridHeader {
            dim: 2,
            sizes: vec![4, 4],
            spacing: grid.spacing().to_vec(),
            dtype: Dtype::F64,
            kind: GridKind::Mask,
        };
        let mut bytes = serde_json::to_vec(&header).unwrap();
        bytes.push(b'\n');
        for v in vals {
            bytes.extend_from_slice(&f64::to_le_bytes(v));
        }
        fs::write(&p, bytes).unwrap();
        match load_grid(&p) {
            Err(Error::MaskRange { index, value }) => {
                assert_eq!(index, 5);
                assert_eq!(value, 1.5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn landmarks_roundtrip_and_column_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        let set = LandmarkSet::new(vec![vec![1.25, 3.0], vec![0.1, 62.7]]).unwrap();
        save_landmarks(&p, &set).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "id,x0,x1\n0,1.25,3.0\n1,0.1,62.7\n");
        assert_eq!(load_landmarks(&p, Some(2)).unwrap(), set);
        assert!(load_landmarks(&p, Some(3)).is_err());
        fs::write(&p, "id,x0,x1\n0,1.0\n").unwrap();
        assert!(matches!(load_landmarks(&p, None), Err(Error::Landmarks { .. })));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let grid = GridDesc::with_sizes(&[4, 4]).unwrap();
        let r = save_grid("/nonexistent/dir/x.grid", &ScalarImage::zeros(&grid).into(), Dtype::F64);
        assert!(matches!(r, Err(Error::Io { .. })));
    }

    fn dummy_result(grid: &GridDesc) -> RegistrationResult {
        let cfg = ShootingConfig::default();
        let path = crate::geodesic::GeodesicPath::identity(grid, cfg);
        RegistrationResult {
            v0: VectorField::zeros(grid),
            deformed: ScalarImage::zeros(grid),
            path,
            report: crate::metrics::loss_joint(0.0, 0.0, 0.0, 0.5).unwrap(),
            trace: vec![0.0],
            iterations: 0,
            converged: true,
        }
    }

    #[test]
    fn report_omits_landmarks_and_is_deterministic() {
        let grid = GridDesc::with_sizes(&[8, 8]).unwrap();
        let a = random_scalar(&grid, 4);
        let b = random_scalar(&grid, 5);
        let res = dummy_result(&grid);
        let pr = pair_report("p", &a, &b, &res, &RmiConfig::default(), ShootingConfig::default(), PairExtras::default()).unwrap();
        let rep = RunReport::new(serde_json::json!({"seed": 1}), vec![pr.clone()]).unwrap();
        let text = rep.to_json().unwrap();
        assert!(!text.contains("landmark_l2"));
        assert!(!text.contains("\"dice\""));
        assert_eq!(pr.ssd_before, pr.ssd_after);
        assert_eq!(pr.jac_det_min, 1.0);

        let lm = LandmarkSet::new(vec![vec![1.0, 1.0]]).unwrap();
        let extras = PairExtras {
            landmarks: Some((&lm, &lm)),
            labels: None,
        };
        let pr2 = pair_report("q", &a, &b, &res, &RmiConfig::default(), ShootingConfig::default(), extras).unwrap();
        assert_eq!(pr2.landmark_l2_before, Some(0.0));

        let mut r1 = RunReport::new(serde_json::json!({}), vec![pr2.clone(), pr.clone()]).unwrap();
        let mut r2 = RunReport::new(serde_json::json!({}), vec![pr, pr2]).unwrap();
        r1.timestamp = 0;
        r2.timestamp = 0;
        assert_eq!(r1.to_json().unwrap(), r2.to_json().unwrap());
        assert_eq!(r1.pairs[0].name, "p");
        assert!(r1.aggregate.contains_key("landmark_l2_after"));
    }

    #[test]
    fn median_of_even_count() {
        let s = summarize(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.median, 2.5);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn scalar_roundtrip_any_shape(n0 in 4usize..10, n1 in 4usize..10, seed in 0u64..1000) {
            let dir = tempfile::tempdir().unwrap();
            let grid = GridDesc::new(vec![n0, n1], vec![1.0, 1.0]).unwrap();
            let s = random_scalar(&grid, seed);
            let p = dir.path().join("s.grid");
            save_grid(&p, &s.clone().into(), Dtype::F64).unwrap();
            let back = load_scalar(&p).unwrap();
            proptest::prop_assert_eq!(back.grid(), s.grid());
            let same = back.data().iter().zip(s.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            proptest::prop_assert!(same);
        }
    }
}
