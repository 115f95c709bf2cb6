//! Best-buddies matching.
//!
//! Pipeline of one matching pass: feature distances `D*`, the SoftBBS matrix
//! `B̃` (product of a column-wise and a row-wise soft-argmin of `D*`), the
//! row-normalized mapping `π̃`, virtual targets `Q̂ = π̃ Q`, and per-point
//! correspondence weights `γ_i = Σ_j B̃_ij exp(-D_ij / T)` where `D` is the
//! spatial distance matrix.
//!
//! All reductions run sequentially in index order so results are bitwise
//! reproducible.

use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::embed::{embed, EmbeddingKind, FeatureRows};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const DEFAULT_XI: f64 = 0.4;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).ok_or(Error::EmptySet)?;
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch("ragged matrix rows".into()));
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row_argmax(&self, i: usize) -> usize {
        argmin_by(self.row(i).iter().map(|v| -v))
    }

    /// Row-major, whitespace-separated, one matrix row per line.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 24);
        for i in 0..self.rows {
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v:.16e}");
            }
            out.push('\n');
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.values[i * self.cols + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    Spatial,
    Feature,
}

/// Pairwise Euclidean distances between the rows of two sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub kind: DistanceKind,
    pub values: DenseMatrix,
}

impl DistanceMatrix {
    pub fn new(kind: DistanceKind, values: DenseMatrix) -> Result<Self> {
        if values.values().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "distances must be finite and non-negative".into(),
            ));
        }
        Ok(Self { kind, values })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }
}

pub fn distance_matrix<A, B>(a: &A, b: &B, kind: DistanceKind) -> Result<DistanceMatrix>
where
    A: FeatureRows + ?Sized,
    B: FeatureRows + ?Sized,
{
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let mut values = Vec::new();
    fill_distances(a, b, &mut values);
    let values = DenseMatrix {
        rows: a.rows(),
        cols: b.rows(),
        values,
    };
    Ok(DistanceMatrix { kind, values })
}

fn fill_distances<A, B>(a: &A, b: &B, values: &mut Vec<f64>)
where
    A: FeatureRows + ?Sized,
    B: FeatureRows + ?Sized,
{
    values.clear();
    values.reserve(a.rows() * b.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        if let [x0, x1, x2] = *ai {
            values.extend((0..b.rows()).map(|j| {
                let bj = b.row(j);
                let (d0, d1, d2) = (x0 - bj[0], x1 - bj[1], x2 - bj[2]);
                (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
            }));
        } else {
            values.extend((0..b.rows()).map(|j| {
                ai.iter()
                    .zip(b.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            }));
        }
    }
}

pub fn spatial_distances(p: &PointCloud, q: &PointCloud) -> DistanceMatrix {
    distance_matrix(p, q, DistanceKind::Spatial).expect("both clouds are 3-D")
}

// first index of the minimum
fn argmin_by(iter: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for (i, v) in iter.enumerate() {
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Hard best-buddies: `B_ij = 1` iff `i` and `j` are each other's nearest
/// neighbours; ties go to the lowest index.
pub fn hard_bbs(d: &DistanceMatrix) -> DenseMatrix {
    let (n, m) = (d.rows(), d.cols());
    let row_best: Vec<usize> = (0..n).map(|i| argmin_by(d.values.row(i).iter().copied())).collect();
    let col_best: Vec<usize> = (0..m)
        .map(|j| argmin_by((0..n).map(|i| d.get(i, j))))
        .collect();
    let mut b = DenseMatrix::zeros(n, m);
    for (i, &j) in row_best.iter().enumerate() {
        if col_best[j] == i {
            b.set(i, j, 1.0);
        }
    }
    b
}

/// `ξ · median_j min_{i≠j} ‖f_j − f_i‖`.
pub fn compute_alpha<F: FeatureRows + ?Sized>(features: &F, xi: f64) -> Result<f64> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::DegenerateCloud(format!(
            "alpha needs at least 2 points, got {n}"
        )));
    }
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::InvalidConfig(format!("xi must be positive, got {xi}")));
    }
    let mut minima: Vec<f64> = (0..n)
        .map(|j| {
            let fj = features.row(j);
            let mut best = f64::INFINITY;
            for i in (0..n).filter(|&i| i != j) {
                let d2: f64 = fj
                    .iter()
                    .zip(features.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                best = best.min(d2);
            }
            best.sqrt()
        })
        .collect();
    let med = median(&mut minima);
    let alpha = xi * med;
    if !(alpha > 0.0) {
        return Err(Error::DegenerateCloud(
            "median nearest-neighbour distance is zero".into(),
        ));
    }
    Ok(alpha)
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// SoftBBS matrix `B̃ = colSoftmin(D*/α) ⊙ rowSoftmin(D*/α)`.
///
/// Both soft-argmins are evaluated with max-shifted exponentials. Entries are
/// floored at `f64::MIN_POSITIVE` so the matrix stays strictly positive when
/// a factor underflows.
pub fn soft_bbs(d_star: &DistanceMatrix, alpha: f64) -> Result<DenseMatrix> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
    }
    let mut values = Vec::new();
    fill_soft_bbs(d_star.values.values(), d_star.rows(), d_star.cols(), alpha, &mut values);
    Ok(DenseMatrix {
        rows: d_star.rows(),
        cols: d_star.cols(),
        values,
    })
}

fn fill_soft_bbs(d: &[f64], n: usize, m: usize, alpha: f64, out: &mut Vec<f64>) {
    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if (hi - lo) / alpha <= GLOBAL_SHIFT_RANGE {
        soft_bbs_global_shift(d, n, m, lo, alpha, out);
    } else {
        *out = soft_bbs_shifted(d.iter().map(|v| -v / alpha).collect(), n, m);
    }
}

// Below this spread of D/α every exp(-(D - min D)/α) stays a normal float, so
// a single shift serves rows and columns alike.
const GLOBAL_SHIFT_RANGE: f64 = 700.0;

fn soft_bbs_global_shift(d: &[f64], n: usize, m: usize, d_min: f64, alpha: f64, e: &mut Vec<f64>) {
    let inv_alpha = 1.0 / alpha;
    e.clear();
    e.extend(d.iter().map(|v| ((d_min - v) * inv_alpha).exp()));
    let mut col_sum = vec![0.0; m];
    let mut row_sum = vec![0.0; n];
    for (i, rs) in row_sum.iter_mut().enumerate() {
        let row = &e[i * m..(i + 1) * m];
        *rs = row.iter().sum();
        for (cs, v) in col_sum.iter_mut().zip(row) {
            *cs += v;
        }
    }
    let inv_col: Vec<f64> = col_sum.iter().map(|c| 1.0 / c).collect();
    for (i, rs) in row_sum.iter().enumerate() {
        let inv_row = 1.0 / rs;
        let row = &mut e[i * m..(i + 1) * m];
        for (v, ic) in row.iter_mut().zip(&inv_col) {
            *v = (*v * inv_row * (*v * ic)).max(f64::MIN_POSITIVE);
        }
    }
}

// Separate log-sum-exp per row and per column, each shifted by its own maximum.
fn soft_bbs_shifted(x: Vec<f64>, n: usize, m: usize) -> Vec<f64> {
    let mut row_lse = vec![0.0; n];
    let mut col_max = vec![f64::NEG_INFINITY; m];
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        row_lse[i] = max + sum.ln();
        for (cm, v) in col_max.iter_mut().zip(row) {
            *cm = cm.max(*v);
        }
    }
    let mut col_sum = vec![0.0; m];
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        for ((cs, cm), v) in col_sum.iter_mut().zip(&col_max).zip(row) {
            *cs += (v - cm).exp();
        }
    }
    let col_lse: Vec<f64> = col_max.iter().zip(&col_sum).map(|(cm, cs)| cm + cs.ln()).collect();
    let mut values = x;
    for i in 0..n {
        let row = &mut values[i * m..(i + 1) * m];
        for (v, cl) in row.iter_mut().zip(&col_lse) {
            *v = (2.0 * *v - row_lse[i] - cl).exp().max(f64::MIN_POSITIVE);
        }
    }
    values
}

/// Row-normalizes `B̃` into the soft mapping `π̃`.
pub fn soft_mapping(b_tilde: &DenseMatrix) -> DenseMatrix {
    let mut out = b_tilde.clone();
    for row in out.values.chunks_exact_mut(out.cols) {
        let inv = 1.0 / row.iter().sum::<f64>();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// `q̂_i = Σ_j π̃_ij q_j`.
pub fn virtual_targets(pi_tilde: &DenseMatrix, q: &PointCloud) -> Result<PointCloud> {
    if pi_tilde.cols() != q.len() {
        return Err(Error::SizeMismatch(format!(
            "mapping has {} columns but target has {} points",
            pi_tilde.cols(),
            q.len()
        )));
    }
    let pts = (0..pi_tilde.rows())
        .map(|i| {
            pi_tilde
                .row(i)
                .iter()
                .zip(q.iter())
                .fold(Vector3::zeros(), |acc, (w, qj)| acc + qj * *w)
        })
        .collect();
    PointCloud::new(pts)
}

/// `γ_i = Σ_j B̃_ij exp(-D_ij / T)`, floored at `f64::MIN_POSITIVE`.
pub fn gamma_weights(b_tilde: &DenseMatrix, d_spatial: &DistanceMatrix, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if b_tilde.rows() != d_spatial.rows() || b_tilde.cols() != d_spatial.cols() {
        return Err(Error::ShapeMismatch(format!(
            "B̃ is {}x{} but D is {}x{}",
            b_tilde.rows(),
            b_tilde.cols(),
            d_spatial.rows(),
            d_spatial.cols()
        )));
    }
    let inv_t = 1.0 / temperature;
    Ok((0..b_tilde.rows())
        .map(|i| {
            let g: f64 = b_tilde
                .row(i)
                .iter()
                .zip(d_spatial.values.row(i))
                .map(|(b, d)| b * (-d * inv_t).exp())
                .sum();
            g.max(f64::MIN_POSITIVE)
        })
        .collect())
}

/// Which terms enter the correspondence weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaMode {
    /// `Σ_j B̃_ij exp(-D_ij/T)`.
    Full,
    /// `Σ_j B̃_ij`, without the spatial kernel.
    SoftBbsOnly,
    /// `γ ≡ 1`.
    Uniform,
}

impl Default for GammaMode {
    fn default() -> Self {
        GammaMode::Full
    }
}

/// Everything produced by one matching pass.
#[derive(Debug, Clone)]
pub struct SoftMatch {
    pub b_tilde: DenseMatrix,
    pub pi_tilde: DenseMatrix,
    pub q_hat: PointCloud,
    pub gamma: Vec<f64>,
    pub alpha: f64,
    pub temperature: f64,
}

impl SoftMatch {
    /// Checks the pass invariants; every matrix and weight must be finite.
    pub fn check(&self) -> Result<()> {
        if self.b_tilde.values().iter().any(|v| !(v.is_finite() && *v > 0.0 && *v <= 1.0)) {
            return Err(Error::DegenerateGeometry("SoftBBS entry outside (0, 1]".into()));
        }
        for i in 0..self.pi_tilde.rows() {
            let s: f64 = self.pi_tilde.row(i).iter().sum();
            if !((s - 1.0).abs() < 1e-9) {
                return Err(Error::DegenerateGeometry(format!("row {i} of π̃ sums to {s}")));
            }
        }
        if self.gamma.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::DegenerateGeometry("non-positive γ".into()));
        }
        Ok(())
    }
}

/// Builds a [`SoftMatch`] from precomputed features.
///
/// `p` and `q` are the spatial clouds used for `γ`; the features may come from
/// any embedding, including ones computed outside this crate.
pub fn match_features<F: FeatureRows + ?Sized>(
    p: &PointCloud,
    q: &PointCloud,
    p_features: &F,
    q_features: &F,
    xi: f64,
    temperature: f64,
    gamma_mode: GammaMode,
) -> Result<SoftMatch> {
    if p.len() < 2 || q.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            available: p.len().min(q.len()),
        });
    }
    if p_features.rows() != p.len() || q_features.rows() != q.len() {
        return Err(Error::SizeMismatch("feature rows must match cloud sizes".into()));
    }
    let alpha = compute_alpha(p_features, xi)?;
    match_with_alpha(p, q, p_features, q_features, alpha, temperature, gamma_mode)
}

fn is_coordinates<F: FeatureRows + ?Sized>(cloud: &PointCloud, features: &F) -> bool {
    features.dim() == 3 && (0..cloud.len()).all(|i| features.row(i) == cloud.row(i))
}

/// Matching pass with a precomputed `α`.
pub(crate) fn match_with_alpha<F: FeatureRows + ?Sized>(
    p: &PointCloud,
    q: &PointCloud,
    p_features: &F,
    q_features: &F,
    alpha: f64,
    temperature: f64,
    gamma_mode: GammaMode,
) -> Result<SoftMatch> {
    let d_spatial = spatial_distances(p, q);
    // raw coordinates as features: D* is D
    let feature_distances;
    let d_star = if is_coordinates(p, p_features) && is_coordinates(q, q_features) {
        &d_spatial
    } else {
        feature_distances = distance_matrix(p_features, q_features, DistanceKind::Feature)?;
        &feature_distances
    };
    let b_tilde = soft_bbs(d_star, alpha)?;
    let pi_tilde = soft_mapping(&b_tilde);
    let q_hat = virtual_targets(&pi_tilde, q)?;
    let gamma = match gamma_mode {
        GammaMode::Full => gamma_weights(&b_tilde, &d_spatial, temperature)?,
        GammaMode::SoftBbsOnly => (0..b_tilde.rows())
            .map(|i| b_tilde.row(i).iter().sum::<f64>())
            .collect(),
        GammaMode::Uniform => vec![1.0; p.len()],
    };
    let m = SoftMatch {
        b_tilde,
        pi_tilde,
        q_hat,
        gamma,
        alpha,
        temperature,
    };
    m.check()?;
    Ok(m)
}

/// Reusable buffers for [`match_targets`].
#[derive(Debug, Default)]
pub(crate) struct MatchScratch {
    spatial: Vec<f64>,
    feature: Vec<f64>,
    b_tilde: Vec<f64>,
}

/// Same pass as [`match_with_alpha`] but only produces `Q̂` and `γ`, reusing
/// `scratch` instead of materializing `π̃`.
pub(crate) fn match_targets<F: FeatureRows + ?Sized>(
    scratch: &mut MatchScratch,
    p: &PointCloud,
    q: &PointCloud,
    p_features: &F,
    q_features: &F,
    alpha: f64,
    temperature: f64,
    gamma_mode: GammaMode,
) -> Result<(PointCloud, Vec<f64>)> {
    if p_features.dim() != q_features.dim() {
        return Err(Error::DimMismatch {
            left: p_features.dim(),
            right: q_features.dim(),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (n, m) = (p.len(), q.len());
    let MatchScratch {
        spatial,
        feature,
        b_tilde,
    } = scratch;
    fill_distances(p, q, spatial);
    let d_star = if is_coordinates(p, p_features) && is_coordinates(q, q_features) {
        &spatial[..]
    } else {
        fill_distances(p_features, q_features, feature);
        &feature[..]
    };
    fill_soft_bbs(d_star, n, m, alpha, b_tilde);
    let inv_t = 1.0 / temperature;
    let mut q_hat = Vec::with_capacity(n);
    let mut gamma = Vec::with_capacity(n);
    for i in 0..n {
        let row = &b_tilde[i * m..(i + 1) * m];
        let mass: f64 = row.iter().sum();
        let target = row
            .iter()
            .zip(q.iter())
            .fold(Vector3::zeros(), |acc, (w, qj)| acc + qj * *w);
        q_hat.push(target / mass);
        gamma.push(match gamma_mode {
            GammaMode::Full => {
                let g: f64 = row
                    .iter()
                    .zip(&spatial[i * m..(i + 1) * m])
                    .map(|(b, d)| b * (-d * inv_t).exp())
                    .sum();
                g.max(f64::MIN_POSITIVE)
            }
            GammaMode::SoftBbsOnly => mass,
            GammaMode::Uniform => 1.0,
        });
    }
    Ok((PointCloud::new(q_hat)?, gamma))
}

/// Embeds both clouds and runs one full matching pass.
pub fn match_pass(
    p: &PointCloud,
    q: &PointCloud,
    embedding: EmbeddingKind,
    xi: f64,
    temperature: f64,
) -> Result<SoftMatch> {
    match_pass_with(p, q, embedding, xi, temperature, GammaMode::Full)
}

pub fn match_pass_with(
    p: &PointCloud,
    q: &PointCloud,
    embedding: EmbeddingKind,
    xi: f64,
    temperature: f64,
    gamma_mode: GammaMode,
) -> Result<SoftMatch> {
    let pf = embed(p, embedding)?;
    let qf = embed(q, embedding)?;
    match_features(p, q, &pf, &qf, xi, temperature, gamma_mode)
}
