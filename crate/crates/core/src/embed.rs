//! Per-point feature embeddings.
//!
//! The matcher only needs some embedding in which true correspondences tend
//! to be mutual nearest neighbours. Two handcrafted embeddings are provided;
//! any externally computed [`FeatureCloud`] can be used instead.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const DEFAULT_NEIGHBORS: usize = 16;
pub const MIN_NEIGHBORS: usize = 4;
pub const LOCAL_GEOMETRY_DIM: usize = 7;

/// Anything that can be viewed as an ordered list of equally sized vectors.
pub trait FeatureRows {
    fn rows(&self) -> usize;
    fn dim(&self) -> usize;
    fn row(&self, i: usize) -> &[f64];
}

impl FeatureRows for PointCloud {
    fn rows(&self) -> usize {
        self.len()
    }

    fn dim(&self) -> usize {
        3
    }

    fn row(&self, i: usize) -> &[f64] {
        self[i].as_slice()
    }
}

/// Row-major table of per-point feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCloud {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureCloud {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim < 3 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot form rows of width {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: pos / dim });
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptySet)?;
        let mut data = Vec::with_capacity(dim * rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} values, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

impl FeatureRows for FeatureCloud {
    fn rows(&self) -> usize {
        self.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    /// Raw coordinates, so feature distances equal spatial distances.
    Identity,
    /// Coordinates plus the normalized k-NN covariance spectrum and the
    /// distance to the neighbourhood centroid.
    LocalGeometry { k: usize },
}

impl Default for EmbeddingKind {
    fn default() -> Self {
        EmbeddingKind::LocalGeometry {
            k: DEFAULT_NEIGHBORS,
        }
    }
}

impl EmbeddingKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EmbeddingKind::Identity => Ok(()),
            EmbeddingKind::LocalGeometry { k } if k >= MIN_NEIGHBORS => Ok(()),
            EmbeddingKind::LocalGeometry { k } => Err(Error::InvalidConfig(format!(
                "local geometry needs k >= {MIN_NEIGHBORS}, got {k}"
            ))),
        }
    }
}

impl std::fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmbeddingKind::Identity => write!(f, "identity"),
            EmbeddingKind::LocalGeometry { k } => write!(f, "local:{k}"),
        }
    }
}

impl std::str::FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("identity") {
            return Ok(EmbeddingKind::Identity);
        }
        let kind = match s.split_once(':') {
            Some(("local", k)) => k
                .parse()
                .map(|k| EmbeddingKind::LocalGeometry { k })
                .map_err(|_| Error::InvalidConfig(format!("bad neighbour count in {s:?}")))?,
            None if s == "local" => EmbeddingKind::default(),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown embedding {s:?} (expected identity or local:k)"
                )))
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

pub fn embed(cloud: &PointCloud, kind: EmbeddingKind) -> Result<FeatureCloud> {
    kind.validate()?;
    match kind {
        EmbeddingKind::Identity => {
            let data = cloud.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
            Ok(FeatureCloud { dim: 3, data })
        }
        EmbeddingKind::LocalGeometry { k } => local_geometry(cloud, k),
    }
}

/// Indices of the `k` nearest points to `cloud[i]`, the point itself included.
/// Ties are broken by index.
pub fn knn_indices(cloud: &PointCloud, i: usize, k: usize) -> Vec<usize> {
    let q = cloud[i];
    let mut order: Vec<(f64, usize)> = cloud
        .iter()
        .enumerate()
        .map(|(j, p)| ((p - q).norm_squared(), j))
        .collect();
    let k = k.min(order.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    order.into_iter().map(|(_, j)| j).collect()
}

/// Normalized covariance eigenvalues (descending) and centroid distance of
/// one neighbourhood.
pub(crate) fn neighbourhood_descriptor(cloud: &PointCloud, i: usize, neighbours: &[usize]) -> [f64; 4] {
    let n = neighbours.len() as f64;
    let centroid = neighbours.iter().map(|&j| cloud[j]).sum::<nalgebra::Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for &j in neighbours {
        let d = cloud[j] - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov).eigenvalues;
    let mut ev = [eig[0].max(0.0), eig[1].max(0.0), eig[2].max(0.0)];
    ev.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = ev.iter().sum();
    let norm = if total > 0.0 {
        [ev[0] / total, ev[1] / total, ev[2] / total]
    } else {
        // coincident neighbourhood: no preferred direction
        [1.0 / 3.0; 3]
    };
    [norm[0], norm[1], norm[2], (cloud[i] - centroid).norm()]
}

/// Replaces the leading coordinate columns of `features` by `cloud`'s points.
/// Both embeddings start with the raw coordinates and the rest is
/// rigid-invariant, so this re-embeds a rigidly moved cloud.
pub(crate) fn with_coordinates(features: &FeatureCloud, cloud: &PointCloud) -> FeatureCloud {
    let mut data = features.data.clone();
    for (row, p) in data.chunks_exact_mut(features.dim).zip(cloud.iter()) {
        row[..3].copy_from_slice(p.as_slice());
    }
    FeatureCloud {
        dim: features.dim,
        data,
    }
}

fn local_geometry(cloud: &PointCloud, k: usize) -> Result<FeatureCloud> {
    if cloud.len() < k {
        return Err(Error::TooFewPoints {
            needed: k,
            available: cloud.len(),
        });
    }
    let mut data = Vec::with_capacity(cloud.len() * LOCAL_GEOMETRY_DIM);
    for (i, p) in cloud.iter().enumerate() {
        let nb = knn_indices(cloud, i, k);
        let desc = neighbourhood_descriptor(cloud, i, &nb);
        data.extend_from_slice(&[p.x, p.y, p.z]);
        data.extend_from_slice(&desc);
    }
    Ok(FeatureCloud {
        dim: LOCAL_GEOMETRY_DIM,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_transform, random_rigid_transform};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.2..0.2),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_is_raw_coordinates() {
        let c = random_cloud(15, 1);
        let f = embed(&c, EmbeddingKind::Identity).unwrap();
        assert_eq!(f.dim(), 3);
        for i in 0..c.len() {
            assert_eq!(f.row(i), c[i].as_slice());
        }
    }

    #[test]
    fn local_geometry_shape_and_errors() {
        let c = random_cloud(30, 2);
        let f = embed(&c, EmbeddingKind::LocalGeometry { k: 8 }).unwrap();
        assert_eq!(f.dim(), LOCAL_GEOMETRY_DIM);
        assert_eq!(f.len(), 30);
        for i in 0..f.len() {
            let r = f.row(i);
            assert!((r[3] + r[4] + r[5] - 1.0).abs() < 1e-12);
            assert!(r[3] >= r[4] && r[4] >= r[5]);
        }
        let small = random_cloud(5, 3);
        assert!(matches!(
            embed(&small, EmbeddingKind::LocalGeometry { k: 8 }),
            Err(Error::TooFewPoints { .. })
        ));
        assert!(embed(&small, EmbeddingKind::LocalGeometry { k: 2 }).is_err());
    }

    #[test]
    fn local_geometry_rigid_invariance() {
        let c = random_cloud(60, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xf = random_rigid_transform(180.0, -3.0, 3.0, &mut rng);
        let moved = apply_transform(&c, &xf);
        let kind = EmbeddingKind::LocalGeometry { k: 10 };
        let a = embed(&c, kind).unwrap();
        let b = embed(&moved, kind).unwrap();
        for i in 0..c.len() {
            for d in 3..7 {
                assert!((a.row(i)[d] - b.row(i)[d]).abs() < 1e-8);
            }
        }
    }

    // Eigenvalues of a symmetric 3x3 via the trigonometric solution of the
    // characteristic polynomial det(A - λI) = 0.
    fn eigen_oracle(a: &Matrix3<f64>) -> [f64; 3] {
        let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
        let q = a.trace() / 3.0;
        let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b = (a - Matrix3::identity() * q) / p;
        let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        let e2 = 3.0 * q - e1 - e3;
        [e1, e2, e3]
    }

    #[test]
    fn eigenvalues_match_characteristic_polynomial() {
        let c = random_cloud(20, 6);
        let k = 6;
        let f = embed(&c, EmbeddingKind::LocalGeometry { k }).unwrap();
        for i in 0..c.len() {
            // neighbourhood by full sort, independent of the selection path
            let mut idx: Vec<usize> = (0..c.len()).collect();
            idx.sort_by(|&a, &b| {
                (c[a] - c[i])
                    .norm()
                    .partial_cmp(&(c[b] - c[i]).norm())
                    .unwrap()
                    .then(a.cmp(&b))
            });
            idx.truncate(k);
            let mut mean = [0.0; 3];
            for &j in &idx {
                for d in 0..3 {
                    mean[d] += c[j][d] / k as f64;
                }
            }
            let mut cov = Matrix3::zeros();
            for &j in &idx {
                for r in 0..3 {
                    for s in 0..3 {
                        cov[(r, s)] += (c[j][r] - mean[r]) * (c[j][s] - mean[s]) / k as f64;
                    }
                }
            }
            let ev = eigen_oracle(&cov);
            let total: f64 = ev.iter().sum();
            let row = f.row(i);
            for d in 0..3 {
                assert!((row[3 + d] - ev[d] / total).abs() < 1e-9, "point {i}");
            }
            let dc = ((c[i][0] - mean[0]).powi(2) + (c[i][1] - mean[1]).powi(2) + (c[i][2] - mean[2]).powi(2)).sqrt();
            assert!((row[6] - dc).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic() {
        let c = random_cloud(40, 7);
        let kind = EmbeddingKind::default();
        assert_eq!(embed(&c, kind).unwrap(), embed(&c, kind).unwrap());
    }

    #[test]
    fn parse_embedding_kind() {
        assert_eq!("identity".parse::<EmbeddingKind>().unwrap(), EmbeddingKind::Identity);
        assert_eq!(
            "local:12".parse::<EmbeddingKind>().unwrap(),
            EmbeddingKind::LocalGeometry { k: 12 }
        );
        assert!("local:3".parse::<EmbeddingKind>().is_err());
        assert!("dgcnn".parse::<EmbeddingKind>().is_err());
    }

    #[test]
    fn feature_cloud_validation() {
        assert!(FeatureCloud::new(3, vec![1.0, 2.0]).is_err());
        assert!(FeatureCloud::new(3, vec![1.0, 2.0, f64::INFINITY]).is_err());
        assert!(FeatureCloud::new(2, vec![1.0, 2.0]).is_err());
        assert!(FeatureCloud::from_rows(&[vec![1.0, 2.0, 0.0], vec![3.0]]).is_err());
        assert_eq!(
            FeatureCloud::from_rows(&[vec![1.0, 2.0, 0.0], vec![3.0, 4.0, 0.0]]).unwrap().len(),
            2
        );
    }
}
