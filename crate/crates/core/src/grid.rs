//! Periodic grids, field containers and the finite-difference and
//! interpolation primitives everything else is built on.
//!
//! Voxels are stored row-major with axis 0 slowest. Every stencil and every
//! interpolation wraps around the grid edges, so the domain is a torus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Geometry of a 2-D or 3-D periodic voxel grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct GridDesc {
    sizes: Vec<usize>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    sizes: Vec<usize>,
    spacing: Vec<f64>,
}

impl TryFrom<GridRepr> for GridDesc {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        GridDesc::new(r.sizes, r.spacing)
    }
}

impl From<GridDesc> for GridRepr {
    fn from(g: GridDesc) -> Self {
        GridRepr {
            sizes: g.sizes,
            spacing: g.spacing,
        }
    }
}

impl GridDesc {
    pub fn new(sizes: Vec<usize>, spacing: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&sizes.len()) {
            return Err(Error::InvalidGrid(format!(
                "dimension must be 2 or 3, got {}",
                sizes.len()
            )));
        }
        if spacing.len() != sizes.len() {
            return Err(Error::InvalidGrid(format!(
                "{} spacing entries for {} axes",
                spacing.len(),
                sizes.len()
            )));
        }
        if let Some(n) = sizes.iter().find(|&&n| n < 4) {
            return Err(Error::InvalidGrid(format!("axis size {n} is below 4")));
        }
        if let Some(h) = spacing.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return Err(Error::InvalidGrid(format!("spacing {h} must be positive")));
        }
        let mut strides = vec![1; sizes.len()];
        for j in (0..sizes.len() - 1).rev() {
            strides[j] = strides[j + 1] * sizes[j + 1];
        }
        Ok(GridDesc {
            sizes,
            spacing,
            strides,
        })
    }

    /// Grid with unit spacing.
    pub fn with_sizes(sizes: &[usize]) -> Result<Self> {
        GridDesc::new(sizes.to_vec(), vec![1.0; sizes.len()])
    }

    pub fn dim(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.sizes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Index coordinate of `idx` along `axis`.
    #[inline]
    pub fn coord(&self, idx: usize, axis: usize) -> usize {
        (idx / self.strides[axis]) % self.sizes[axis]
    }

    pub fn coords(&self, idx: usize) -> Vec<usize> {
        (0..self.dim()).map(|j| self.coord(idx, j)).collect()
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.strides)
            .map(|(c, s)| c * s)
            .sum()
    }

    /// Flat index of the neighbor one voxel forward along `axis`, wrapping.
    #[inline]
    pub fn next(&self, idx: usize, axis: usize) -> usize {
        let c = self.coord(idx, axis);
        if c + 1 == self.sizes[axis] {
            idx - c * self.strides[axis]
        } else {
            idx + self.strides[axis]
        }
    }

    /// Flat index of the neighbor one voxel back along `axis`, wrapping.
    #[inline]
    pub fn prev(&self, idx: usize, axis: usize) -> usize {
        let c = self.coord(idx, axis);
        if c == 0 {
            idx + (self.sizes[axis] - 1) * self.strides[axis]
        } else {
            idx - self.strides[axis]
        }
    }

    /// Flat index of `idx` translated by `shift` voxels along `axis`, wrapping.
    pub fn shifted(&self, idx: usize, axis: usize, shift: isize) -> usize {
        let n = self.sizes[axis] as isize;
        let c = self.coord(idx, axis) as isize;
        let c2 = (c + shift).rem_euclid(n);
        (idx as isize + (c2 - c) * self.strides[axis] as isize) as usize
    }

    pub fn ensure_same(&self, other: &GridDesc) -> Result<()> {
        if self.sizes != other.sizes || self.spacing != other.spacing {
            return Err(Error::GridMismatch(format!(
                "{:?}/{:?} vs {:?}/{:?}",
                self.sizes, self.spacing, other.sizes, other.spacing
            )));
        }
        Ok(())
    }

    /// Same sizes with unit spacing; flow computations run in voxel units.
    pub(crate) fn unit(&self) -> GridDesc {
        GridDesc {
            sizes: self.sizes.clone(),
            spacing: vec![1.0; self.dim()],
            strides: self.strides.clone(),
        }
    }

    /// Shortest periodic separation between two points, per axis, in voxels.
    pub fn wrapped_delta(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(b)
            .zip(&self.sizes)
            .map(|((x, y), &n)| {
                let n = n as f64;
                let d = (x - y).rem_euclid(n);
                if d > n / 2.0 {
                    d - n
                } else {
                    d
                }
            })
            .collect()
    }
}

fn check_finite(what: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

fn check_len(grid: &GridDesc, len: usize) -> Result<()> {
    if len != grid.len() {
        return Err(Error::GridMismatch(format!(
            "{} values for a grid of {} voxels",
            len,
            grid.len()
        )));
    }
    Ok(())
}

/// Scalar intensity field.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarImage {
    grid: GridDesc,
    data: Vec<f64>,
}

impl ScalarImage {
    pub fn new(grid: GridDesc, data: Vec<f64>) -> Result<Self> {
        check_len(&grid, data.len())?;
        check_finite("scalar image", &data)?;
        Ok(ScalarImage { grid, data })
    }

    pub(crate) fn from_raw(grid: GridDesc, data: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        ScalarImage { grid, data }
    }

    pub fn zeros(grid: &GridDesc) -> Self {
        ScalarImage {
            data: vec![0.0; grid.len()],
            grid: grid.clone(),
        }
    }

    /// Image whose value at each voxel is `f(coords)`.
    pub fn from_fn(grid: &GridDesc, f: impl Fn(&[usize]) -> f64 + Sync + Send) -> Result<Self> {
        let data = par::map_index(grid.len(), |i| f(&grid.coords(i)));
        ScalarImage::new(grid.clone(), data)
    }

    pub fn grid(&self) -> &GridDesc {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, coords: &[usize]) -> f64 {
        self.data[self.grid.index(coords)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Circular shift: output(x) = self(x - shift).
    pub fn circular_shift(&self, shift: &[isize]) -> ScalarImage {
        let g = &self.grid;
        let data = par::map_index(g.len(), |i| {
            let mut src = i;
            for (axis, &s) in shift.iter().enumerate() {
                src = g.shifted(src, axis, -s);
            }
            self.data[src]
        });
        ScalarImage::from_raw(g.clone(), data)
    }
}

/// Field of d-vectors, stored one array per component.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: GridDesc,
    comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn new(grid: GridDesc, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != grid.dim() {
            return Err(Error::GridMismatch(format!(
                "{} components for a {}-D grid",
                comps.len(),
                grid.dim()
            )));
        }
        for c in &comps {
            check_len(&grid, c.len())?;
            check_finite("vector field", c)?;
        }
        Ok(VectorField { grid, comps })
    }

    pub(crate) fn from_raw(grid: GridDesc, comps: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(comps.len(), grid.dim());
        VectorField { grid, comps }
    }

    pub fn zeros(grid: &GridDesc) -> Self {
        VectorField {
            comps: vec![vec![0.0; grid.len()]; grid.dim()],
            grid: grid.clone(),
        }
    }

    pub fn constant(grid: &GridDesc, value: &[f64]) -> Result<Self> {
        if value.len() != grid.dim() {
            return Err(Error::GridMismatch(format!(
                "constant of length {} on a {}-D grid",
                value.len(),
                grid.dim()
            )));
        }
        VectorField::new(
            grid.clone(),
            value.iter().map(|&c| vec![c; grid.len()]).collect(),
        )
    }

    /// Builds a field from voxel-interleaved data `[v0_x, v0_y, v1_x, ...]`.
    pub fn from_interleaved(grid: GridDesc, data: &[f64]) -> Result<Self> {
        let d = grid.dim();
        if data.len() != d * grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} voxels x {} components",
                data.len(),
                grid.len(),
                d
            )));
        }
        let comps = (0..d)
            .map(|j| data.iter().skip(j).step_by(d).copied().collect())
            .collect();
        VectorField::new(grid, comps)
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        let d = self.grid.dim();
        let mut out = vec![0.0; d * self.grid.len()];
        for (j, c) in self.comps.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                out[i * d + j] = v;
            }
        }
        out
    }

    pub fn grid(&self) -> &GridDesc {
        &self.grid
    }

    pub fn component(&self, j: usize) -> &[f64] {
        &self.comps[j]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.comps
    }

    pub fn into_components(self) -> Vec<Vec<f64>> {
        self.comps
    }

    /// Vector stored at voxel `idx`.
    pub fn at(&self, idx: usize) -> Vec<f64> {
        self.comps.iter().map(|c| c[idx]).collect()
    }

    /// Largest Euclidean vector length over all voxels.
    pub fn max_norm(&self) -> f64 {
        (0..self.grid.len())
            .map(|i| self.comps.iter().map(|c| c[i] * c[i]).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Largest absolute component value.
    pub fn max_abs(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        VectorField::from_raw(
            self.grid.clone(),
            self.comps
                .iter()
                .map(|c| c.iter().map(|v| v * s).collect())
                .collect(),
        )
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, s: f64, other: &VectorField) -> Result<VectorField> {
        self.grid.ensure_same(&other.grid)?;
        Ok(VectorField::from_raw(
            self.grid.clone(),
            self.comps
                .iter()
                .zip(&other.comps)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + s * y).collect())
                .collect(),
        ))
    }

    /// Voxel-sum inner product over all components.
    pub fn dot(&self, other: &VectorField) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        Ok(self
            .comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| dot(a, b))
            .sum())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    par::sum_index(a.len(), |i| a[i] * b[i])
}

/// Soft mask with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct MaskImage {
    grid: GridDesc,
    data: Vec<f64>,
}

impl MaskImage {
    pub fn new(grid: GridDesc, data: Vec<f64>) -> Result<Self> {
        check_len(&grid, data.len())?;
        if let Some(index) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::MaskRange {
                index,
                value: data[index],
            });
        }
        Ok(MaskImage { grid, data })
    }

    pub(crate) fn from_raw(grid: GridDesc, data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        MaskImage { grid, data }
    }

    pub fn zeros(grid: &GridDesc) -> Self {
        MaskImage {
            data: vec![0.0; grid.len()],
            grid: grid.clone(),
        }
    }

    pub fn ones(grid: &GridDesc) -> Self {
        MaskImage {
            data: vec![1.0; grid.len()],
            grid: grid.clone(),
        }
    }

    pub fn from_fn(grid: &GridDesc, f: impl Fn(&[usize]) -> f64 + Sync + Send) -> Result<Self> {
        let data = par::map_index(grid.len(), |i| f(&grid.coords(i)));
        MaskImage::new(grid.clone(), data)
    }

    pub fn grid(&self) -> &GridDesc {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Number of voxels at or above `threshold`.
    pub fn count(&self, threshold: f64) -> usize {
        self.data.iter().filter(|&&v| v >= threshold).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// 0/1 copy, set where the value is at or above `threshold`.
    pub fn binarized(&self, threshold: f64) -> MaskImage {
        MaskImage::from_raw(
            self.grid.clone(),
            self.data
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    /// Pointwise `1 - self`.
    pub fn complement(&self) -> MaskImage {
        MaskImage::from_raw(self.grid.clone(), self.data.iter().map(|v| 1.0 - v).collect())
    }
}

/// Pullback map ψ(x) = x + u(x), displacement in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    u: VectorField,
}

impl DeformationField {
    pub fn identity(grid: &GridDesc) -> Self {
        DeformationField {
            u: VectorField::zeros(grid),
        }
    }

    pub fn from_displacement(u: VectorField) -> Self {
        DeformationField { u }
    }

    pub fn grid(&self) -> &GridDesc {
        self.u.grid()
    }

    pub fn displacement(&self) -> &VectorField {
        &self.u
    }

    pub fn into_displacement(self) -> VectorField {
        self.u
    }

    pub fn is_identity(&self) -> bool {
        self.u.components().iter().all(|c| c.iter().all(|&v| v == 0.0))
    }

    /// ψ at an arbitrary point, by interpolating the displacement.
    pub fn map_point(&self, p: &[f64]) -> Vec<f64> {
        let g = self.grid();
        p.iter()
            .enumerate()
            .map(|(j, &x)| x + sample(g, self.u.component(j), p))
            .collect()
    }

    /// det(I + Du) per voxel, derivatives in voxel units.
    pub fn jacobian_determinant(&self) -> ScalarImage {
        let g = self.grid().unit();
        let d = g.dim();
        let du: Vec<Vec<f64>> = (0..d)
            .flat_map(|i| {
                let g = &g;
                let comp = self.u.component(i);
                (0..d).map(move |j| central_diff(g, comp, j))
            })
            .collect();
        let data = par::map_index(g.len(), |x| {
            let e = |i: usize, j: usize| du[i * d + j][x] + if i == j { 1.0 } else { 0.0 };
            if d == 2 {
                e(0, 0) * e(1, 1) - e(0, 1) * e(1, 0)
            } else {
                e(0, 0) * (e(1, 1) * e(2, 2) - e(1, 2) * e(2, 1))
                    - e(0, 1) * (e(1, 0) * e(2, 2) - e(1, 2) * e(2, 0))
                    + e(0, 2) * (e(1, 0) * e(2, 1) - e(1, 1) * e(2, 0))
            }
        });
        ScalarImage::from_raw(self.grid().clone(), data)
    }
}

/// Points in voxel coordinates, interpreted modulo the grid sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let labels = (0..points.len()).map(|i| i.to_string()).collect();
        LandmarkSet::with_labels(points, labels)
    }

    pub fn with_labels(points: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        if labels.len() != points.len() {
            return Err(Error::InvalidParameter(format!(
                "{} labels for {} landmarks",
                labels.len(),
                points.len()
            )));
        }
        if let Some(dim) = points.first().map(Vec::len) {
            if points.iter().any(|p| p.len() != dim) {
                return Err(Error::InvalidParameter(
                    "landmarks of mixed dimension".into(),
                ));
            }
        }
        for (i, p) in points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "landmark",
                    index: i,
                });
            }
        }
        Ok(LandmarkSet { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points for which `keep(i)` holds.
    pub fn filtered(&self, keep: impl Fn(usize) -> bool) -> LandmarkSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        LandmarkSet {
            points: idx.iter().map(|&i| self.points[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

/// Per-voxel d×d Jacobian; `entry(i, j)` holds ∂ component i / ∂ axis j.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianField {
    grid: GridDesc,
    entries: Vec<Vec<f64>>,
}

impl JacobianField {
    pub fn grid(&self) -> &GridDesc {
        &self.grid
    }

    pub fn entry(&self, i: usize, j: usize) -> &[f64] {
        &self.entries[i * self.grid.dim() + j]
    }

    /// Matrix at one voxel, row-major.
    pub fn matrix_at(&self, idx: usize) -> Vec<f64> {
        self.entries.iter().map(|e| e[idx]).collect()
    }
}

// ---------------------------------------------------------------------------
// raw-slice kernels

/// Central difference of `f` along `axis`, scaled by the grid spacing.
pub(crate) fn central_diff(grid: &GridDesc, f: &[f64], axis: usize) -> Vec<f64> {
    let scale = 0.5 / grid.spacing()[axis];
    par::map_index(grid.len(), |i| {
        (f[grid.next(i, axis)] - f[grid.prev(i, axis)]) * scale
    })
}

/// Adds `s * D_axis f` into `out`.
pub(crate) fn add_central_diff(grid: &GridDesc, f: &[f64], axis: usize, s: f64, out: &mut [f64]) {
    let scale = 0.5 * s / grid.spacing()[axis];
    par::fill_index_add(out, |i| {
        (f[grid.next(i, axis)] - f[grid.prev(i, axis)]) * scale
    });
}

/// Corner indices and weight factors for multilinear sampling at `p`.
struct Cell {
    lo: [usize; 3],
    hi: [usize; 3],
    t: [f64; 3],
}

#[inline]
fn cell(grid: &GridDesc, base: Option<&[usize]>, p: &[f64]) -> Cell {
    let mut c = Cell {
        lo: [0; 3],
        hi: [0; 3],
        t: [0.0; 3],
    };
    for (j, &x) in p.iter().enumerate() {
        let n = grid.sizes()[j] as i64;
        let fl = x.floor();
        let t = x - fl;
        let offset = base.map_or(0, |b| b[j] as i64);
        let lo = (fl as i64 + offset).rem_euclid(n) as usize;
        c.lo[j] = lo * grid.strides()[j];
        c.hi[j] = ((lo + 1) % n as usize) * grid.strides()[j];
        c.t[j] = t;
    }
    c
}

/// Multilinear periodic sample of `f` at voxel coordinates `p`.
#[inline]
pub(crate) fn sample(grid: &GridDesc, f: &[f64], p: &[f64]) -> f64 {
    sample_cell(grid, f, cell(grid, None, p))
}

/// Sample at voxel `base` displaced by `offset`. Splitting the integer
/// base from the offset keeps the weights independent of the voxel, so
/// results commute exactly with integer translations.
#[inline]
pub(crate) fn sample_displaced(grid: &GridDesc, f: &[f64], base: &[usize], offset: &[f64]) -> f64 {
    sample_cell(grid, f, cell(grid, Some(base), offset))
}

#[inline]
fn sample_cell(grid: &GridDesc, f: &[f64], c: Cell) -> f64 {
    let d = grid.dim();
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut idx = 0;
        for j in 0..d {
            if corner & (1 << j) != 0 {
                w *= c.t[j];
                idx += c.hi[j];
            } else {
                w *= 1.0 - c.t[j];
                idx += c.lo[j];
            }
        }
        acc += w * f[idx];
    }
    acc
}

/// [`sample_displaced`] plus the gradient with respect to the offset.
#[inline]
pub(crate) fn sample_displaced_with_grad(
    grid: &GridDesc,
    f: &[f64],
    base: &[usize],
    offset: &[f64],
    grad: &mut [f64],
) -> f64 {
    let d = grid.dim();
    let c = cell(grid, Some(base), offset);
    let mut acc = 0.0;
    grad[..d].iter_mut().for_each(|g| *g = 0.0);
    for corner in 0..(1usize << d) {
        let mut idx = 0;
        let mut w = [0.0; 3];
        let mut dw = [0.0; 3];
        for j in 0..d {
            if corner & (1 << j) != 0 {
                w[j] = c.t[j];
                dw[j] = 1.0;
                idx += c.hi[j];
            } else {
                w[j] = 1.0 - c.t[j];
                dw[j] = -1.0;
                idx += c.lo[j];
            }
        }
        let v = f[idx];
        acc += w[..d].iter().product::<f64>() * v;
        for k in 0..d {
            let mut prod = dw[k];
            for j in 0..d {
                if j != k {
                    prod *= w[j];
                }
            }
            grad[k] += prod * v;
        }
    }
    acc
}

/// Integer coordinates of `idx` and the displacement stored there.
#[inline]
pub(crate) fn voxel_and_offset(
    grid: &GridDesc,
    u: &[Vec<f64>],
    idx: usize,
    base: &mut [usize; 3],
    offset: &mut [f64; 3],
) {
    for j in 0..grid.dim() {
        base[j] = grid.coord(idx, j);
        offset[j] = u[j][idx];
    }
}

// ---------------------------------------------------------------------------
// public operations

/// Periodic central-difference gradient.
pub fn gradient_central(img: &ScalarImage) -> VectorField {
    let g = img.grid();
    VectorField::from_raw(
        g.clone(),
        (0..g.dim()).map(|j| central_diff(g, img.data(), j)).collect(),
    )
}

/// Periodic central-difference Jacobian of a vector field.
pub fn jacobian(vf: &VectorField) -> JacobianField {
    let g = vf.grid();
    let d = g.dim();
    let entries = (0..d * d)
        .map(|e| central_diff(g, vf.component(e / d), e % d))
        .collect();
    JacobianField {
        grid: g.clone(),
        entries,
    }
}

/// Periodic central-difference divergence.
pub fn divergence(vf: &VectorField) -> ScalarImage {
    let g = vf.grid();
    let mut out = vec![0.0; g.len()];
    for j in 0..g.dim() {
        add_central_diff(g, vf.component(j), j, 1.0, &mut out);
    }
    ScalarImage::from_raw(g.clone(), out)
}

/// Samples `img` at ψ(x) for every voxel x.
pub fn interp_scalar(img: &ScalarImage, psi: &DeformationField) -> Result<ScalarImage> {
    let g = img.grid();
    g.ensure_same(psi.grid())?;
    let u = psi.displacement().components();
    let data = par::map_index(g.len(), |i| {
        let (mut base, mut off) = ([0; 3], [0.0; 3]);
        voxel_and_offset(g, u, i, &mut base, &mut off);
        let d = g.dim();
        sample_displaced(g, img.data(), &base[..d], &off[..d])
    });
    Ok(ScalarImage::from_raw(g.clone(), data))
}

/// Samples every component of `vf` at each landmark.
pub fn interp_vector(vf: &VectorField, points: &LandmarkSet) -> Result<Vec<Vec<f64>>> {
    let g = vf.grid();
    points
        .points
        .iter()
        .map(|p| {
            if p.len() != g.dim() {
                return Err(Error::GridMismatch(format!(
                    "{}-D landmark on a {}-D grid",
                    p.len(),
                    g.dim()
                )));
            }
            Ok(vf.components().iter().map(|c| sample(g, c, p)).collect())
        })
        .collect()
}

/// img ⊙ (1 − U).
pub fn mask_image(img: &ScalarImage, mask: &MaskImage) -> Result<ScalarImage> {
    img.grid().ensure_same(mask.grid())?;
    let data = img
        .data()
        .iter()
        .zip(mask.data())
        .map(|(v, m)| v * (1.0 - m))
        .collect();
    Ok(ScalarImage::from_raw(img.grid().clone(), data))
}

/// v ⊙ (1 − U), component by component.
pub fn mask_velocity(v: &VectorField, mask: &MaskImage) -> Result<VectorField> {
    v.grid().ensure_same(mask.grid())?;
    let comps = v
        .components()
        .iter()
        .map(|c| c.iter().zip(mask.data()).map(|(x, m)| x * (1.0 - m)).collect())
        .collect();
    Ok(VectorField::from_raw(v.grid().clone(), comps))
}
