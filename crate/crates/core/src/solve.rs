//! Closed-form weighted rigid alignment.
//!
//! Minimizes `Σ γ_i ‖R p_i + t − q̂_i‖²` over `SO(3) × ℝ³`: weighted centroids,
//! the weighted cross-covariance `H = Σ γ_i (p_i − p̄)(q̂_i − q̄)ᵀ = U S Vᵀ`, then
//! `R = V diag(1, 1, det(V Uᵀ)) Uᵀ` and `t = q̄ − R p̄`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};

/// Relative singular-value floor below which `H` is treated as rank deficient.
pub const RANK_TOL: f64 = 1e-12;

/// Weighted point pairs `(p_i, q̂_i, γ_i)`.
#[derive(Debug, Clone)]
pub struct Correspondences<'a> {
    source: &'a PointCloud,
    target: &'a PointCloud,
    weights: Option<&'a [f64]>,
}

impl<'a> Correspondences<'a> {
    pub fn new(source: &'a PointCloud, target: &'a PointCloud, weights: &'a [f64]) -> Result<Self> {
        if source.len() != target.len() || weights.len() != source.len() {
            return Err(Error::SizeMismatch(format!(
                "{} sources, {} targets, {} weights",
                source.len(),
                target.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("weights must be finite and non-negative".into()));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(Error::DegenerateGeometry("all weights are zero".into()));
        }
        Ok(Self {
            source,
            target,
            weights: Some(weights),
        })
    }

    /// Equal weights.
    pub fn unweighted(source: &'a PointCloud, target: &'a PointCloud) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::SizeMismatch(format!(
                "{} sources, {} targets",
                source.len(),
                target.len()
            )));
        }
        Ok(Self {
            source,
            target,
            weights: None,
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    fn weight(&self, i: usize, scale: f64) -> f64 {
        match self.weights {
            Some(w) => w[i] / scale,
            None => 1.0,
        }
    }
}

pub fn weighted_procrustes(c: &Correspondences<'_>) -> Result<RigidTransform> {
    if c.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least 3 correspondences, got {}",
            c.len()
        )));
    }
    // Normalizing by the largest weight keeps tiny weights from underflowing
    // in the products below; the minimizer is invariant to the scale.
    let scale = c
        .weights
        .map(|w| w.iter().copied().fold(0.0, f64::max))
        .unwrap_or(1.0);

    let mut total = 0.0;
    let mut p_bar = Vector3::zeros();
    let mut q_bar = Vector3::zeros();
    for i in 0..c.len() {
        let w = c.weight(i, scale);
        total += w;
        p_bar += c.source[i] * w;
        q_bar += c.target[i] * w;
    }
    p_bar /= total;
    q_bar /= total;

    let mut h = Matrix3::zeros();
    for i in 0..c.len() {
        let w = c.weight(i, scale);
        if w == 0.0 {
            continue;
        }
        let dp = c.source[i] - p_bar;
        let dq = c.target[i] - q_bar;
        h += (dp * w) * dq.transpose();
    }

    let svd = h.svd(true, true);
    let s = svd.singular_values;
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateGeometry("SVD did not converge".into())),
    };
    if !(s[0] > 0.0) || s[1] <= RANK_TOL * s[0] {
        return Err(Error::DegenerateGeometry(format!(
            "cross-covariance rank < 2 (singular values {:e}, {:e}, {:e})",
            s[0], s[1], s[2]
        )));
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let translation = q_bar - rotation * p_bar;
    Ok(RigidTransform::from_parts_unchecked(rotation, translation))
}

/// `Σ γ_i ‖R p_i + t − q̂_i‖²`.
pub fn weighted_objective(c: &Correspondences<'_>, xf: &RigidTransform) -> f64 {
    (0..c.len())
        .map(|i| c.weight(i, 1.0) * (xf.apply_point(&c.source[i]) - c.target[i]).norm_squared())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{
        apply_transform, check_rotation, random_rigid_transform, rotation_angle_between_deg, rotation_x,
        rotation_y, rotation_z, ROTATION_TOL,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_clouds_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = random_cloud(10, &mut rng);
        let w: Vec<f64> = (0..10).map(|_| rng.random_range(0.1..3.0)).collect();
        let xf = weighted_procrustes(&Correspondences::new(&p, &p, &w).unwrap()).unwrap();
        assert!((xf.rotation() - Matrix3::identity()).norm() < 1e-10);
        assert!(xf.translation().norm() < 1e-10);
    }

    #[test]
    fn recovers_generator_from_four_points() {
        let p = PointCloud::from_rows(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let gt = random_rigid_transform(180.0, -2.0, 2.0, &mut rng);
            let q = apply_transform(&p, &gt);
            let xf = weighted_procrustes(&Correspondences::unweighted(&p, &q).unwrap()).unwrap();
            assert!((xf.rotation() - gt.rotation()).norm() < 1e-9);
            assert!((xf.translation() - gt.translation()).norm() < 1e-9);
        }
    }

    #[test]
    fn heavy_weights_dominate() {
        // five heavily weighted pairs follow a known motion; the light ones are noise
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = random_cloud(12, &mut rng);
        let gt = random_rigid_transform(30.0, -0.5, 0.5, &mut rng);
        let q_pts: Vec<Vector3<f64>> = p
            .iter()
            .enumerate()
            .map(|(i, x)| {
                if i < 5 {
                    gt.apply_point(x)
                } else {
                    Vector3::new(rng.random(), rng.random(), rng.random())
                }
            })
            .collect();
        let q = PointCloud::new(q_pts).unwrap();
        let w: Vec<f64> = (0..12).map(|i| if i < 5 { 1e6 } else { 1e-6 }).collect();
        let xf = weighted_procrustes(&Correspondences::new(&p, &q, &w).unwrap()).unwrap();
        assert!(rotation_angle_between_deg(xf.rotation(), gt.rotation()) < 1e-6);
        assert!((xf.translation() - gt.translation()).norm() < 1e-6);
    }

    #[test]
    fn local_perturbations_never_improve() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let p = random_cloud(30, &mut rng);
        let gt = random_rigid_transform(60.0, -1.0, 1.0, &mut rng);
        let noisy: Vec<Vector3<f64>> = p
            .iter()
            .map(|x| {
                gt.apply_point(x)
                    + Vector3::new(
                        rng.random_range(-0.05..0.05),
                        rng.random_range(-0.05..0.05),
                        rng.random_range(-0.05..0.05),
                    )
            })
            .collect();
        let q = PointCloud::new(noisy).unwrap();
        let w: Vec<f64> = (0..30).map(|_| rng.random_range(0.1..2.0)).collect();
        let c = Correspondences::new(&p, &q, &w).unwrap();
        let xf = weighted_procrustes(&c).unwrap();
        let best = weighted_objective(&c, &xf);
        for _ in 0..50 {
            let d = random_rigid_transform(1e-3_f64.to_degrees(), -1e-3, 1e-3, &mut rng);
            let f = weighted_objective(&c, &d.compose(&xf));
            assert!(f >= best - 1e-12, "{f} < {best}");
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let line = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let res = weighted_procrustes(&Correspondences::unweighted(&line, &line).unwrap());
        assert!(matches!(res, Err(Error::DegenerateGeometry(_))));
        let two = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert!(weighted_procrustes(&Correspondences::unweighted(&two, &two).unwrap()).is_err());
        let p = PointCloud::from_rows(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert!(Correspondences::new(&p, &p, &[0.0, 0.0, 0.0]).is_err());
        assert!(Correspondences::new(&p, &p, &[1.0, -1.0, 0.0]).is_err());
        assert!(Correspondences::new(&p, &two, &[1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn reflection_guard_on_planar_mirror() {
        // planar source, target mirrored through the plane: the best
        // reflection would be exact, the best rotation must still be proper.
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..10 {
            let pts: Vec<Vector3<f64>> = (0..20)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1e-3..1e-3),
                    )
                })
                .collect();
            let p = PointCloud::new(pts.clone()).unwrap();
            let spin = rng.random_range(-60.0..60.0);
            let mirrored: Vec<Vector3<f64>> = pts
                .iter()
                .map(|x| rotation_z(spin) * Vector3::new(x.x, x.y, -x.z))
                .collect();
            let q = PointCloud::new(mirrored).unwrap();
            let c = Correspondences::unweighted(&p, &q).unwrap();
            let xf = weighted_procrustes(&c).unwrap();
            check_rotation(xf.rotation(), ROTATION_TOL).unwrap();
            let got = weighted_objective(&c, &xf);

            // exhaustive 2° grid over rotations about the plane normal and
            // flips about in-plane axes, translation solved in closed form
            let mut grid_best = f64::INFINITY;
            for flip in [0.0, 180.0] {
                for k in 0..180 {
                    let r = rotation_z(k as f64 * 2.0) * rotation_x(flip);
                    let pc = p.centroid();
                    let qc = q.centroid();
                    let xf = RigidTransform::from_parts_unchecked(r, qc - r * pc);
                    grid_best = grid_best.min(weighted_objective(&c, &xf));
                }
            }
            assert!(got <= grid_best + 1e-3, "{got} vs {grid_best}");
        }
    }

    #[test]
    fn equivariance_under_common_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let p = random_cloud(25, &mut rng);
        let gt = random_rigid_transform(90.0, -1.0, 1.0, &mut rng);
        let q = apply_transform(&p, &gt);
        let w: Vec<f64> = (0..25).map(|_| rng.random_range(0.1..2.0)).collect();
        let xf = weighted_procrustes(&Correspondences::new(&p, &q, &w).unwrap()).unwrap();
        let g = rotation_y(33.0) * rotation_x(-71.0);
        let gxf = RigidTransform::from_parts_unchecked(g, Vector3::zeros());
        let gp = apply_transform(&p, &gxf);
        let gq = apply_transform(&q, &gxf);
        let xf2 = weighted_procrustes(&Correspondences::new(&gp, &gq, &w).unwrap()).unwrap();
        assert!((xf2.rotation() - g * xf.rotation() * g.transpose()).norm() < 1e-9);
        assert!(rotation_angle_between_deg(xf.rotation(), gt.rotation()) < 1e-8);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn weight_scale_invariance(seed in 0u64..100_000, c in 1e-6f64..1e6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = random_cloud(15, &mut rng);
                let q = random_cloud(15, &mut rng);
                let w: Vec<f64> = (0..15).map(|_| rng.random_range(0.01..1.0)).collect();
                let wc: Vec<f64> = w.iter().map(|x| x * c).collect();
                let a = weighted_procrustes(&Correspondences::new(&p, &q, &w).unwrap()).unwrap();
                let b = weighted_procrustes(&Correspondences::new(&p, &q, &wc).unwrap()).unwrap();
                prop_assert!((a.rotation() - b.rotation()).norm() < 1e-10);
                prop_assert!((a.translation() - b.translation()).norm() < 1e-10);
                prop_assert!(a.rotation().determinant() > 0.0);
            }
        }
    }
}
