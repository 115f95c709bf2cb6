//! Point clouds, rigid transforms and sampling utilities.
//!
//! Rotations act on column vectors. Euler angles follow the fixed-axis
//! X-then-Y-then-Z convention, `R = Rz * Ry * Rx`, with angles in degrees.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance used when validating `RᵀR = I` and `det(R) = 1`.
pub const ROTATION_TOL: f64 = 1e-9;

/// Cosine-free guard for the Euler inverse: `|R31|` must stay below `1 - GIMBAL_GUARD`.
pub const GIMBAL_GUARD: f64 = 1e-9;

/// An ordered, non-empty set of finite 3D points.
///
/// Indices are correspondence identities, so operations never reorder points
/// unless they say so.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(index) = points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect())
    }

    // Callers guarantee the invariants (e.g. rigid images of a valid cloud).
    pub(crate) fn from_vec_unchecked(points: Vec<Vector3<f64>>) -> Self {
        debug_assert!(!points.is_empty());
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vector3<f64>> {
        self.points.iter()
    }

    pub fn into_points(self) -> Vec<Vector3<f64>> {
        self.points
    }

    /// Sub-cloud made of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self.points.get(i).ok_or(Error::BadIndex {
                index: i,
                len: self.len(),
            })?;
            out.push(*p);
        }
        Self::new(out)
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let sum: Vector3<f64> = self.points.iter().sum();
        sum / self.len() as f64
    }

    /// Component-wise minimum and maximum corners.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn bounding_box_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }

    pub fn max_extent(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).max()
    }
}

impl std::ops::Index<usize> for PointCloud {
    type Output = Vector3<f64>;

    fn index(&self, i: usize) -> &Vector3<f64> {
        &self.points[i]
    }
}

impl<'a> IntoIterator for &'a PointCloud {
    type Item = &'a Vector3<f64>;
    type IntoIter = std::slice::Iter<'a, Vector3<f64>>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

/// A proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    /// Validates `R` against the SO(3) invariants at [`ROTATION_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation, ROTATION_TOL)?;
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::NotARotation("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_euler(angles: EulerAngles, translation: Vector3<f64>) -> Self {
        Self {
            rotation: euler_to_rotation(angles),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Geodesic angle of the rotation part, in degrees.
    pub fn rotation_angle_deg(&self) -> f64 {
        rotation_angle_between_deg(&self.rotation, &Matrix3::identity())
    }
}

/// Applies `xf` to every point, preserving order.
pub fn apply_transform(cloud: &PointCloud, xf: &RigidTransform) -> PointCloud {
    PointCloud::from_vec_unchecked(cloud.iter().map(|p| xf.apply_point(p)).collect())
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(xf: &RigidTransform) -> RigidTransform {
    xf.inverse()
}

/// Geodesic angle between two rotations in degrees.
///
/// Evaluated through the chordal distance, `θ = 2 asin(‖A − B‖_F / 2√2)`,
/// which stays accurate for tiny angles where the trace formula does not.
pub fn rotation_angle_between_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let chord = (a - b).norm() / (2.0 * std::f64::consts::SQRT_2);
    (2.0 * chord.min(1.0).asin()).to_degrees()
}

pub(crate) fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<()> {
    if !r.iter().all(|c| c.is_finite()) {
        return Err(Error::NotARotation("non-finite entries".into()));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).norm();
    if ortho > tol {
        return Err(Error::NotARotation(format!("|RᵀR - I|_F = {ortho:e}")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > tol {
        return Err(Error::NotARotation(format!("det(R) = {det}")));
    }
    Ok(())
}

/// Fixed-axis X, then Y, then Z rotation angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerAngles {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
}

impl EulerAngles {
    pub fn new(rx: f64, ry: f64, rz: f64) -> Self {
        Self { rx, ry, rz }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.rx, self.ry, self.rz]
    }
}

pub fn rotation_x(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rotation_y(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rotation_z(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn euler_to_rotation(e: EulerAngles) -> Matrix3<f64> {
    rotation_z(e.rz) * rotation_y(e.ry) * rotation_x(e.rx)
}

/// Inverse of [`euler_to_rotation`]; `ry` is returned in (-90°, 90°).
pub fn rotation_to_euler(r: &Matrix3<f64>) -> Result<EulerAngles> {
    let r31 = r[(2, 0)];
    if !(r31.abs() < 1.0 - GIMBAL_GUARD) {
        return Err(Error::GimbalLock(r31.abs()));
    }
    let ry = (-r31).asin();
    let rx = r[(2, 1)].atan2(r[(2, 2)]);
    let rz = r[(1, 0)].atan2(r[(0, 0)]);
    Ok(EulerAngles::new(
        rx.to_degrees(),
        ry.to_degrees(),
        rz.to_degrees(),
    ))
}

/// Indices chosen by greedy farthest-point sampling.
///
/// The first index is `start_index`; each next one maximizes the distance to
/// the already chosen set, ties going to the lowest index.
pub fn farthest_point_indices(cloud: &PointCloud, k: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::BadCount {
            requested: k,
            available: n,
        });
    }
    if start_index >= n {
        return Err(Error::BadIndex {
            index: start_index,
            len: n,
        });
    }
    let pts = cloud.points();
    let mut min_sq = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut chosen = Vec::with_capacity(k);
    let mut current = start_index;
    loop {
        chosen.push(current);
        taken[current] = true;
        if chosen.len() == k {
            break;
        }
        let anchor = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = (p - anchor).norm_squared();
            if d < min_sq[i] {
                min_sq[i] = d;
            }
            if !taken[i] && min_sq[i] > best_d {
                best_d = min_sq[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(chosen)
}

pub fn farthest_point_sample(cloud: &PointCloud, k: usize, start_index: usize) -> Result<PointCloud> {
    let idx = farthest_point_indices(cloud, k, start_index)?;
    cloud.select(&idx)
}

/// Rotation with each Euler component uniform in `[-max_deg, max_deg]`.
pub fn random_rotation_euler<R: Rng + ?Sized>(max_deg: f64, rng: &mut R) -> RigidTransform {
    let mut draw = || {
        if max_deg > 0.0 {
            rng.random_range(-max_deg..=max_deg)
        } else {
            0.0
        }
    };
    let angles = EulerAngles::new(draw(), draw(), draw());
    RigidTransform::from_euler(angles, Vector3::zeros())
}

/// Pure translation with each component uniform in `[lo, hi]`.
pub fn random_translation<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> RigidTransform {
    let mut draw = || if hi > lo { rng.random_range(lo..=hi) } else { lo };
    RigidTransform::from_translation(Vector3::new(draw(), draw(), draw()))
}

/// Euler rotation and translation drawn together, as used by the synthetic protocols.
pub fn random_rigid_transform<R: Rng + ?Sized>(
    max_deg: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> RigidTransform {
    let rot = random_rotation_euler(max_deg, rng);
    let tr = random_translation(lo, hi, rng);
    RigidTransform::from_parts_unchecked(*rot.rotation(), *tr.translation())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
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
    fn cloud_rejects_empty_and_nan() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::EmptyCloud)));
        let bad = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [f64::NAN, 0.0, 0.0]]);
        assert!(matches!(bad, Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn identity_leaves_cloud_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(20, &mut rng);
        assert_eq!(apply_transform(&c, &RigidTransform::identity()), c);
    }

    #[test]
    fn quarter_turn_about_z() {
        let c = PointCloud::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        let xf = RigidTransform::from_euler(EulerAngles::new(0.0, 0.0, 90.0), Vector3::zeros());
        let out = apply_transform(&c, &xf);
        assert!((out[0] - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn apply_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_cloud(30, &mut rng);
        let xf = random_rigid_transform(180.0, -2.0, 2.0, &mut rng);
        let out = apply_transform(&c, &xf);
        let r = xf.rotation();
        let t = xf.translation();
        for (i, p) in c.iter().enumerate() {
            for row in 0..3 {
                let mut acc = 0.0;
                for col in 0..3 {
                    acc += r[(row, col)] * p[col];
                }
                acc += t[row];
                assert!((out[i][row] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compose_and_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_rigid_transform(180.0, -1.0, 1.0, &mut rng);
            let b = random_rigid_transform(180.0, -1.0, 1.0, &mut rng);
            let x = Vector3::new(0.3, -0.7, 1.9);
            let lhs = a.compose(&b).apply_point(&x);
            let rhs = a.apply_point(&b.apply_point(&x));
            assert!((lhs - rhs).norm() < 1e-10);

            let id = a.compose(&a.inverse());
            assert!((id.rotation() - Matrix3::identity()).norm() < 1e-10);
            assert!(id.translation().norm() < 1e-10);
            assert_eq!(a.compose(&RigidTransform::identity()), a);
            let back = a.inverse().apply_point(&a.apply_point(&x));
            assert!((back - x).norm() < 1e-10);
        }
        let t = Vector3::new(1.0, -2.0, 3.0);
        let inv = RigidTransform::from_translation(t).inverse();
        assert_eq!(*inv.translation(), -t);
        assert_eq!(RigidTransform::identity().inverse(), RigidTransform::identity());
    }

    #[test]
    fn euler_examples_and_round_trip() {
        assert_eq!(euler_to_rotation(EulerAngles::default()), Matrix3::identity());
        let rz = euler_to_rotation(EulerAngles::new(0.0, 0.0, 90.0));
        let expect = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((rz - expect).norm() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let e = EulerAngles::new(
                rng.random_range(-45.0..45.0),
                rng.random_range(-45.0..45.0),
                rng.random_range(-45.0..45.0),
            );
            let r = euler_to_rotation(e);
            let back = rotation_to_euler(&r).unwrap();
            assert!((euler_to_rotation(back) - r).norm() < 1e-9);
            assert!((back.rx - e.rx).abs() < 1e-9);
            assert!((back.ry - e.ry).abs() < 1e-9);
            assert!((back.rz - e.rz).abs() < 1e-9);
        }
    }

    #[test]
    fn gimbal_lock_detected() {
        let r = euler_to_rotation(EulerAngles::new(10.0, 90.0, 5.0));
        assert!(matches!(rotation_to_euler(&r), Err(Error::GimbalLock(_))));
    }

    #[test]
    fn new_validates_rotation() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = -1.0;
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
        m[(0, 0)] = 1.001;
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
        assert!(RigidTransform::new(Matrix3::identity(), Vector3::zeros()).is_ok());
    }

    #[test]
    fn fps_square_corners() {
        let c = PointCloud::from_rows(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(farthest_point_indices(&c, 2, 0).unwrap(), vec![0, 2]);
        let mut all = farthest_point_indices(&c, 4, 1).unwrap();
        assert_eq!(all[0], 1);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_errors() {
        let c = PointCloud::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            farthest_point_indices(&c, 2, 0),
            Err(Error::BadCount { .. })
        ));
        assert!(matches!(
            farthest_point_indices(&c, 0, 0),
            Err(Error::BadCount { .. })
        ));
        assert!(matches!(
            farthest_point_indices(&c, 1, 3),
            Err(Error::BadIndex { .. })
        ));
    }

    // O(n^2 k) reference: recompute every min-distance from scratch each round.
    fn fps_brute_force(cloud: &PointCloud, k: usize, start: usize) -> Vec<usize> {
        let mut chosen = vec![start];
        while chosen.len() < k {
            let mut best = None;
            let mut best_d = -1.0;
            for i in 0..cloud.len() {
                if chosen.contains(&i) {
                    continue;
                }
                let d = chosen
                    .iter()
                    .map(|&j| (cloud[i] - cloud[j]).norm())
                    .fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = Some(i);
                }
            }
            chosen.push(best.unwrap());
        }
        chosen
    }

    #[test]
    fn fps_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10 {
            let c = random_cloud(50, &mut rng);
            let start = trial * 3;
            let fast = farthest_point_indices(&c, 10, start).unwrap();
            assert_eq!(fast, fps_brute_force(&c, 10, start));
        }
    }

    #[test]
    fn random_transforms() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(random_rotation_euler(45.0, &mut a), random_rotation_euler(45.0, &mut b));
        assert_eq!(random_rotation_euler(0.0, &mut a), RigidTransform::identity());

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 10_000;
        let mut sums = [0.0; 3];
        let mut tsum = [0.0; 3];
        for _ in 0..n {
            let r = random_rotation_euler(45.0, &mut rng);
            let e = rotation_to_euler(r.rotation()).unwrap().as_array();
            let t = random_translation(-0.5, 0.5, &mut rng);
            for k in 0..3 {
                assert!(e[k].abs() <= 45.0 + 1e-9);
                assert!(t.translation()[k].abs() <= 0.5);
                sums[k] += e[k];
                tsum[k] += t.translation()[k];
            }
        }
        // uniform on [-a, a] has sigma a / sqrt(3); the mean has sigma / sqrt(n)
        let sigma_r = 45.0 / 3f64.sqrt() / (n as f64).sqrt();
        let sigma_t = 0.5 / 3f64.sqrt() / (n as f64).sqrt();
        for k in 0..3 {
            assert!((sums[k] / n as f64).abs() < 3.0 * sigma_r);
            assert!((tsum[k] / n as f64).abs() < 3.0 * sigma_t);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rigid_motion_preserves_distances(
                seed in 0u64..10_000,
                x in prop::array::uniform3(-5.0f64..5.0),
                y in prop::array::uniform3(-5.0f64..5.0),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let xf = random_rigid_transform(180.0, -3.0, 3.0, &mut rng);
                let a = Vector3::from(x);
                let b = Vector3::from(y);
                let d0 = (a - b).norm();
                let d1 = (xf.apply_point(&a) - xf.apply_point(&b)).norm();
                prop_assert!((d0 - d1).abs() < 1e-9);
                prop_assert!(check_rotation(xf.rotation(), ROTATION_TOL).is_ok());
            }

            #[test]
            fn fps_returns_distinct_indices(seed in 0u64..10_000, k in 1usize..40) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let c = random_cloud(40, &mut rng);
                let idx = farthest_point_indices(&c, k, seed as usize % 40).unwrap();
                let mut sorted = idx.clone();
                sorted.sort();
                sorted.dedup();
                prop_assert_eq!(sorted.len(), k);
            }
        }
    }
}
