//! Vector-matrix (VM) decomposed geometry and appearance grids.
//!
//! A geometry component is `v^X ∘ M^YZ + v^Y ∘ M^XZ + v^Z ∘ M^XY`. An
//! appearance component has the same three vector-matrix pairs, each
//! additionally routed through its own column of the basis matrix `B`, so an
//! appearance component yields a feature vector instead of a scalar.
//!
//! A field of total rank `R` holds `R` geometry components, `3R`
//! appearance components and `9R` basis columns (three per appearance
//! component). Components are stored in rank order, so truncating to rank
//! `r` keeps a prefix of every list.
//!
//! Node `i` of an axis with `n` nodes sits at `min + i * (max - min) / (n - 1)`.
//! Sampling between nodes is trilinear; because every pair is a product of a
//! line and a plane, trilinear interpolation of the dense component equals the
//! product of a linear line lookup and a bilinear plane lookup.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, Vec3};

/// Axis pairing `a`: the line runs along axis `a`, the plane spans these two axes.
pub const PLANE_AXES: [[usize; 2]; 3] = [[1, 2], [0, 2], [0, 1]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|a| !(min[a] < max[a])) {
            return Err(Error::InvalidArgument(format!(
                "bbox min {min:?} must be below max {max:?} on every axis"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn extent(&self) -> Vec3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> Vec3 {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn contains(&self, x: Vec3) -> bool {
        (0..3).all(|a| x[a] >= self.min[a] && x[a] <= self.max[a])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|a| other.min[a] >= self.min[a] && other.max[a] <= self.max[a])
    }

    /// Parametric interval `[t0, t1]` (clamped to `t >= 0`) where the ray is inside.
    pub fn intersect_ray(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-300 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut near, mut far) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// Dynamic-rank bookkeeping for rank incrementation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankState {
    pub r_d: usize,
    pub total: usize,
    pub epsilon: f64,
    pub last_inc_iter: usize,
}

impl RankState {
    pub fn new(r_d: usize, total: usize, epsilon: f64) -> Result<Self> {
        if total == 0 || r_d == 0 || r_d > total {
            return Err(Error::InvalidArgument(format!(
                "dynamic rank {r_d} must lie in 1..={total}"
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("mask epsilon {epsilon} must be > 0")));
        }
        Ok(Self {
            r_d,
            total,
            epsilon,
            last_inc_iter: 0,
        })
    }

    pub fn full(total: usize, epsilon: f64) -> Result<Self> {
        Self::new(total, total, epsilon)
    }
}

/// Per-component factor multipliers. Both the vector and the matrix of a
/// pair carry the multiplier, so a component's value scales by its square.
#[derive(Debug, Clone, PartialEq)]
pub struct Masks {
    pub geo: Vec<f64>,
    pub app: Vec<f64>,
}

impl Masks {
    pub fn ones(rank: usize) -> Self {
        Self {
            geo: vec![1.0; rank],
            app: vec![1.0; 3 * rank],
        }
    }

    pub fn from_state(state: &RankState) -> Self {
        let live = |n_live: usize, n: usize| -> Vec<f64> {
            (0..n).map(|i| if i < n_live { 1.0 } else { state.epsilon }).collect()
        };
        Self {
            geo: live(state.r_d, state.total),
            app: live(3 * state.r_d, 3 * state.total),
        }
    }

    pub fn rank(&self) -> usize {
        self.geo.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Geometry,
    Appearance,
}

/// Continuous grid location of a world point: lower cell corner and fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCoord {
    pub cell: [usize; 3],
    pub frac: [f64; 3],
}

impl GridCoord {
    /// The 8 surrounding nodes with their trilinear weights.
    pub fn corners(&self) -> [([usize; 3], f64); 8] {
        let mut out = [([0usize; 3], 0.0); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let mut idx = self.cell;
            let mut w = 1.0;
            for a in 0..3 {
                if (c >> a) & 1 == 1 {
                    idx[a] += 1;
                    w *= self.frac[a];
                } else {
                    w *= 1.0 - self.frac[a];
                }
            }
            *slot = (idx, w);
        }
        out
    }

    /// Trilinear weight of `node`, zero if it is not one of the 8 corners.
    pub fn weight_of(&self, node: [usize; 3]) -> f64 {
        let mut w = 1.0;
        for a in 0..3 {
            if node[a] == self.cell[a] {
                w *= 1.0 - self.frac[a];
            } else if node[a] == self.cell[a] + 1 {
                w *= self.frac[a];
            } else {
                return 0.0;
            }
        }
        w
    }
}

/// Interpolated line and plane values of one vector-matrix pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSample {
    pub line: f64,
    pub plane: f64,
}

/// Three vector-matrix pairs sharing a rank index.
#[derive(Debug, Clone, PartialEq)]
pub struct VmComponent {
    lines: [Vec<f64>; 3],
    planes: [Matrix; 3],
}

impl VmComponent {
    fn zeros(res: [usize; 3]) -> Self {
        Self {
            lines: [vec![0.0; res[0]], vec![0.0; res[1]], vec![0.0; res[2]]],
            planes: [0, 1, 2].map(|a| {
                let [p, q] = PLANE_AXES[a];
                Matrix::zeros(res[p], res[q])
            }),
        }
    }

    fn random(res: [usize; 3], bound: f64, rng: &mut impl Rng) -> Self {
        let mut c = Self::zeros(res);
        for a in 0..3 {
            c.lines[a].iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
            c.planes[a].data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
        }
        c
    }

    pub fn line(&self, a: usize) -> &[f64] {
        &self.lines[a]
    }

    pub fn line_mut(&mut self, a: usize) -> &mut [f64] {
        &mut self.lines[a]
    }

    pub fn plane(&self, a: usize) -> &Matrix {
        &self.planes[a]
    }

    pub fn plane_mut(&mut self, a: usize) -> &mut [f64] {
        &mut self.planes[a].data
    }

    pub fn fill(&mut self, value: f64) {
        for a in 0..3 {
            self.lines[a].iter_mut().for_each(|v| *v = value);
            self.planes[a].data.iter_mut().for_each(|v| *v = value);
        }
    }

    /// Pair products `v^a[idx_a] * M^a[idx_p, idx_q]` at a grid node.
    pub fn pairs_at_node(&self, idx: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| {
            let [p, q] = PLANE_AXES[a];
            self.lines[a][idx[a]] * self.planes[a].get(idx[p], idx[q])
        })
    }

    /// Linear line lookups and bilinear plane lookups at a continuous location.
    #[inline]
    pub fn sample_pairs(&self, c: &GridCoord) -> [PairSample; 3] {
        [self.sample_pair(0, c), self.sample_pair(1, c), self.sample_pair(2, c)]
    }

    #[inline(always)]
    fn sample_pair(&self, a: usize, c: &GridCoord) -> PairSample {
        let [p, q] = PLANE_AXES[a];
        let l = &self.lines[a];
        let (i, t) = (c.cell[a], c.frac[a]);
        let line = l[i] + t * (l[i + 1] - l[i]);
        let m = &self.planes[a];
        let (j, u) = (c.cell[p], c.frac[p]);
        let (k, w) = (c.cell[q], c.frac[q]);
        let base = j * m.cols + k;
        let r = &m.data[base..base + m.cols + 2];
        let top = r[0] + w * (r[1] - r[0]);
        let bottom = r[m.cols] + w * (r[m.cols + 1] - r[m.cols]);
        PairSample {
            line,
            plane: top + u * (bottom - top),
        }
    }

    /// Accumulate `d(value)/d(params) * upstream` for pair `a`, given the
    /// upstream gradients on the interpolated line and plane values.
    #[inline]
    pub fn scatter_pair_grad(&mut self, a: usize, c: &GridCoord, d_line: f64, d_plane: f64) {
        let [p, q] = PLANE_AXES[a];
        let (i, t) = (c.cell[a], c.frac[a]);
        self.lines[a][i] += d_line * (1.0 - t);
        self.lines[a][i + 1] += d_line * t;
        let (j, u) = (c.cell[p], c.frac[p]);
        let (k, w) = (c.cell[q], c.frac[q]);
        let cols = self.planes[a].cols;
        let data = &mut self.planes[a].data;
        data[j * cols + k] += d_plane * (1.0 - u) * (1.0 - w);
        data[j * cols + k + 1] += d_plane * (1.0 - u) * w;
        data[(j + 1) * cols + k] += d_plane * u * (1.0 - w);
        data[(j + 1) * cols + k + 1] += d_plane * u * w;
    }

    fn resample(&self, positions: &[Vec<f64>; 3]) -> Self {
        Self {
            lines: [0, 1, 2].map(|a| resample_line(&self.lines[a], &positions[a])),
            planes: [0, 1, 2].map(|a| {
                let [p, q] = PLANE_AXES[a];
                resample_plane(&self.planes[a], &positions[p], &positions[q])
            }),
        }
    }

    fn param_count(&self) -> usize {
        self.lines.iter().map(Vec::len).sum::<usize>()
            + self.planes.iter().map(|m| m.data.len()).sum::<usize>()
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.lines
            .iter()
            .map(Vec::as_slice)
            .chain(self.planes.iter().map(|m| m.data.as_slice()))
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.lines
            .iter_mut()
            .map(Vec::as_mut_slice)
            .chain(self.planes.iter_mut().map(|m| m.data.as_mut_slice()))
    }
}

/// Linear interpolation of `old` at continuous indices `pos` (clamped to the ends).
fn interp1(old: &[f64], u: f64) -> f64 {
    let n = old.len();
    let u = u.clamp(0.0, (n - 1) as f64);
    let i = (u.floor() as usize).min(n - 2);
    let t = u - i as f64;
    old[i] * (1.0 - t) + old[i + 1] * t
}

fn resample_line(old: &[f64], pos: &[f64]) -> Vec<f64> {
    pos.iter().map(|&u| interp1(old, u)).collect()
}

fn resample_plane(old: &Matrix, rows: &[f64], cols: &[f64]) -> Matrix {
    // Separable: interpolate along columns first, then rows.
    let tmp: Vec<Vec<f64>> = (0..old.rows).map(|j| resample_line(old.row(j), cols)).collect();
    Matrix::from_fn(rows.len(), cols.len(), |r, c| {
        let u = rows[r].clamp(0.0, (old.rows - 1) as f64);
        let i = (u.floor() as usize).min(old.rows - 2);
        let t = u - i as f64;
        tmp[i][c] * (1.0 - t) + tmp[i + 1][c] * t
    })
}

/// The VM-decomposed geometry and appearance grids.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    resolution: [usize; 3],
    bbox: Aabb,
    geo: Vec<VmComponent>,
    app: Vec<VmComponent>,
    /// `9R × app_feature_dim`; row `3s + a` maps pair `a` of appearance component `s` to the feature channels.
    basis: Matrix,
}

impl TensorField {
    pub fn zeros(resolution: [usize; 3], bbox: Aabb, rank: usize, app_feature_dim: usize) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(Error::InvalidArgument(format!(
                "resolution {resolution:?} needs at least 2 nodes per axis"
            )));
        }
        if rank == 0 || app_feature_dim == 0 {
            return Err(Error::InvalidArgument("rank and feature dim must be positive".into()));
        }
        Aabb::new(bbox.min, bbox.max)?;
        Ok(Self {
            resolution,
            bbox,
            geo: (0..rank).map(|_| VmComponent::zeros(resolution)).collect(),
            app: (0..3 * rank).map(|_| VmComponent::zeros(resolution)).collect(),
            basis: Matrix::zeros(9 * rank, app_feature_dim),
        })
    }

    /// Factors and basis i.i.d. uniform in `[-scale/√R, scale/√R]`.
    pub fn random(
        resolution: [usize; 3],
        bbox: Aabb,
        rank: usize,
        app_feature_dim: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut f = Self::zeros(resolution, bbox, rank, app_feature_dim)?;
        let bound = scale / (rank as f64).sqrt();
        for c in f.geo.iter_mut().chain(f.app.iter_mut()) {
            *c = VmComponent::random(resolution, bound, rng);
        }
        f.basis.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
        Ok(f)
    }

    /// A field with the same shape and all entries zero.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.resolution, self.bbox, self.rank(), self.app_feature_dim())
            .expect("shape of an existing field is valid")
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    /// Total rank `R` (number of geometry components).
    pub fn rank(&self) -> usize {
        self.geo.len()
    }

    pub fn app_rank(&self) -> usize {
        self.app.len()
    }

    pub fn app_feature_dim(&self) -> usize {
        self.basis.cols
    }

    pub fn geo(&self) -> &[VmComponent] {
        &self.geo
    }

    pub fn app(&self) -> &[VmComponent] {
        &self.app
    }

    pub fn geo_mut(&mut self) -> &mut [VmComponent] {
        &mut self.geo
    }

    pub fn app_mut(&mut self) -> &mut [VmComponent] {
        &mut self.app
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn basis_mut(&mut self) -> &mut [f64] {
        &mut self.basis.data
    }

    pub fn node_position(&self, idx: [usize; 3]) -> Vec3 {
        let e = self.bbox.extent();
        [0, 1, 2].map(|a| self.bbox.min[a] + e[a] * idx[a] as f64 / (self.resolution[a] - 1) as f64)
    }

    /// Number of stored factor and basis values.
    pub fn param_count(&self) -> usize {
        self.geo.iter().chain(&self.app).map(VmComponent::param_count).sum::<usize>()
            + self.basis.data.len()
    }

    /// Every parameter array in a fixed order: geometry components, appearance
    /// components, then the basis.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in self.geo.iter().chain(&self.app) {
            out.extend(c.slices());
        }
        out.push(&self.basis.data);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in self.geo.iter_mut().chain(self.app.iter_mut()) {
            out.extend(c.slices_mut());
        }
        out.push(&mut self.basis.data);
        out
    }

    fn check_idx(&self, idx: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if idx[a] >= self.resolution[a] {
                return Err(Error::index("grid index", idx[a], self.resolution[a]));
            }
        }
        Ok(())
    }

    fn check_masks(&self, masks: &Masks) -> Result<()> {
        if masks.geo.len() != self.rank() || masks.app.len() != self.app_rank() {
            return Err(Error::Shape(format!(
                "masks for rank {} applied to a rank-{} field",
                masks.rank(),
                self.rank()
            )));
        }
        Ok(())
    }

    /// Value of geometry component `r` (0-based) at node `idx`.
    pub fn eval_geo_component(&self, r: usize, idx: [usize; 3]) -> Result<f64> {
        let c = self.geo.get(r).ok_or_else(|| Error::index("geometry component", r, self.rank()))?;
        self.check_idx(idx)?;
        Ok(c.pairs_at_node(idx).iter().sum())
    }

    /// Feature vector of appearance component `s` (0-based) at node `idx`.
    pub fn eval_app_component(&self, s: usize, idx: [usize; 3]) -> Result<Vec<f64>> {
        let c = self.app.get(s).ok_or_else(|| Error::index("appearance component", s, self.app_rank()))?;
        self.check_idx(idx)?;
        let pairs = c.pairs_at_node(idx);
        Ok((0..self.app_feature_dim())
            .map(|ch| (0..3).map(|a| self.basis.get(3 * s + a, ch) * pairs[a]).sum())
            .collect())
    }

    /// Mask-weighted geometry sum at a node (raw density before activation).
    pub fn eval_geo_masked(&self, masks: &Masks, idx: [usize; 3]) -> Result<f64> {
        self.check_masks(masks)?;
        self.check_idx(idx)?;
        Ok(self
            .geo
            .iter()
            .zip(&masks.geo)
            .map(|(c, m)| m * m * c.pairs_at_node(idx).iter().sum::<f64>())
            .sum())
    }

    /// Mask-weighted appearance features at a node.
    pub fn eval_app_masked(&self, masks: &Masks, idx: [usize; 3]) -> Result<Vec<f64>> {
        self.check_masks(masks)?;
        self.check_idx(idx)?;
        let mut h = vec![0.0; 3 * self.app_rank()];
        for (s, (c, m)) in self.app.iter().zip(&masks.app).enumerate() {
            let pairs = c.pairs_at_node(idx);
            for a in 0..3 {
                h[3 * s + a] = m * m * pairs[a];
            }
        }
        let mut f = vec![0.0; self.app_feature_dim()];
        self.basis.matvec_t(&h, &mut f);
        Ok(f)
    }

    /// Grid location of a world point, `None` outside the bounding box.
    pub fn coord(&self, x: Vec3) -> Option<GridCoord> {
        if !self.bbox.contains(x) {
            return None;
        }
        let e = self.bbox.extent();
        let mut cell = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let u = ((x[a] - self.bbox.min[a]) / e[a] * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n - 2);
            cell[a] = i;
            frac[a] = u - i as f64;
        }
        Some(GridCoord { cell, frac })
    }

    /// Raw (pre-activation) masked geometry value at a grid location.
    #[inline]
    pub fn sample_geo_at(&self, masks: &Masks, c: &GridCoord) -> f64 {
        let mut sum = 0.0;
        for (comp, m) in self.geo.iter().zip(&masks.geo) {
            let p = comp.sample_pairs(c);
            sum += m * m * (p[0].line * p[0].plane + p[1].line * p[1].plane + p[2].line * p[2].plane);
        }
        sum
    }

    /// Masked pair products `h[3s + a]` feeding the basis.
    #[inline]
    pub fn sample_app_pairs_at(&self, masks: &Masks, c: &GridCoord, h: &mut [f64]) {
        for (s, (comp, m)) in self.app.iter().zip(&masks.app).enumerate() {
            let p = comp.sample_pairs(c);
            let m2 = m * m;
            for a in 0..3 {
                h[3 * s + a] = m2 * p[a].line * p[a].plane;
            }
        }
    }

    /// Trilinearly interpolated masked values at world point `x`: one value
    /// for geometry, `app_feature_dim` values for appearance. Points outside
    /// the bounding box read as zeros.
    pub fn sample_trilinear(&self, masks: &Masks, x: Vec3, kind: GridKind) -> Result<Vec<f64>> {
        self.check_masks(masks)?;
        let c = self.coord(x);
        Ok(match kind {
            GridKind::Geometry => vec![c.map_or(0.0, |c| self.sample_geo_at(masks, &c))],
            GridKind::Appearance => {
                let mut f = vec![0.0; self.app_feature_dim()];
                if let Some(c) = c {
                    let mut h = vec![0.0; 3 * self.app_rank()];
                    self.sample_app_pairs_at(masks, &c, &mut h);
                    self.basis.matvec_t(&h, &mut f);
                }
                f
            }
        })
    }

    /// Keep the first `r` geometry components, first `3r` appearance
    /// components and their `9r` basis columns.
    pub fn truncate_rank(&self, r: usize) -> Result<TensorField> {
        if r == 0 || r > self.rank() {
            return Err(Error::index("retained rank", r, self.rank() + 1));
        }
        Ok(TensorField {
            resolution: self.resolution,
            bbox: self.bbox,
            geo: self.geo[..r].to_vec(),
            app: self.app[..3 * r].to_vec(),
            basis: self.basis.top_rows(9 * r),
        })
    }

    fn resample(&self, resolution: [usize; 3], bbox: Aabb) -> TensorField {
        let old_e = self.bbox.extent();
        let new_e = bbox.extent();
        let positions: [Vec<f64>; 3] = [0, 1, 2].map(|a| {
            let n_new = resolution[a];
            let n_old = self.resolution[a];
            (0..n_new)
                .map(|k| {
                    let world = bbox.min[a] + new_e[a] * k as f64 / (n_new - 1) as f64;
                    (world - self.bbox.min[a]) / old_e[a] * (n_old - 1) as f64
                })
                .collect()
        });
        TensorField {
            resolution,
            bbox,
            geo: self.geo.iter().map(|c| c.resample(&positions)).collect(),
            app: self.app.iter().map(|c| c.resample(&positions)).collect(),
            basis: self.basis.clone(),
        }
    }

    /// Interpolate every vector (linearly) and matrix (bilinearly) onto a finer grid.
    pub fn upsample(&self, new_resolution: [usize; 3]) -> Result<TensorField> {
        if (0..3).any(|a| new_resolution[a] < self.resolution[a]) {
            return Err(Error::InvalidArgument(format!(
                "cannot upsample {:?} to smaller {new_resolution:?}",
                self.resolution
            )));
        }
        if new_resolution == self.resolution {
            return Ok(self.clone());
        }
        Ok(self.resample(new_resolution, self.bbox))
    }

    /// Replace the bounding box with a contained one, resampling factors at the
    /// new node positions (same resolution).
    pub fn shrink_bbox(&self, new_bbox: Aabb) -> Result<TensorField> {
        let new_bbox = Aabb::new(new_bbox.min, new_bbox.max)?;
        if !self.bbox.contains_box(&new_bbox) {
            return Err(Error::InvalidArgument(format!(
                "bbox {new_bbox:?} is not contained in {:?}",
                self.bbox
            )));
        }
        if new_bbox == self.bbox {
            return Ok(self.clone());
        }
        Ok(self.resample(self.resolution, new_bbox))
    }
}
