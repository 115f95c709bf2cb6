//! Registration metrics, the training loss, and success grids.

use std::fmt::Write as _;

use crate::datagen::{overlap_mask, DEFAULT_THETA};
use crate::error::{Error, Result};
use crate::geometry::{rotation_angle_between_deg, rotation_to_euler, PointCloud, RigidTransform};

/// Errors of one estimate against its ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairErrors {
    /// Absolute per-axis Euler differences (x, y, z), degrees, wrapped to [0, 180].
    pub euler_deg: [f64; 3],
    /// Absolute per-axis translation differences.
    pub translation: [f64; 3],
    pub chordal_deg: f64,
    pub mte: f64,
}

// |a - b| folded onto [0, 180]
fn angle_diff_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 360.0;
    d.min(360.0 - d)
}

pub fn transform_errors(est: &RigidTransform, gt: &RigidTransform) -> Result<PairErrors> {
    let a = rotation_to_euler(est.rotation())?.as_array();
    let b = rotation_to_euler(gt.rotation())?.as_array();
    let dt = est.translation() - gt.translation();
    Ok(PairErrors {
        euler_deg: [0, 1, 2].map(|k| angle_diff_deg(a[k], b[k])),
        translation: [dt.x.abs(), dt.y.abs(), dt.z.abs()],
        chordal_deg: rotation_angle_between_deg(est.rotation(), gt.rotation()),
        mte: dt.norm(),
    })
}

/// Dataset-level statistics; per-axis errors are pooled across axes and pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub pairs: usize,
    pub mse_r: f64,
    pub rmse_r: f64,
    pub mae_r: f64,
    pub mse_t: f64,
    pub rmse_t: f64,
    pub mae_t: f64,
    pub mae_chordal: f64,
    pub mte: f64,
}

impl MetricSummary {
    /// Flat `key=value` report, one metric per line.
    pub fn to_report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "pairs={}", self.pairs);
        for (k, v) in [
            ("mse_r", self.mse_r),
            ("rmse_r", self.rmse_r),
            ("mae_r", self.mae_r),
            ("mse_t", self.mse_t),
            ("rmse_t", self.rmse_t),
            ("mae_t", self.mae_t),
            ("mae_chordal", self.mae_chordal),
            ("mte", self.mte),
        ] {
            let _ = writeln!(out, "{k}={v:.9e}");
        }
        out
    }
}

pub fn aggregate(errors: &[PairErrors]) -> Result<MetricSummary> {
    if errors.is_empty() {
        return Err(Error::EmptySet);
    }
    let axes = (3 * errors.len()) as f64;
    let pooled = |f: &dyn Fn(&PairErrors) -> [f64; 3]| {
        let (mut sq, mut abs) = (0.0, 0.0);
        for e in errors {
            for v in f(e) {
                sq += v * v;
                abs += v.abs();
            }
        }
        (sq / axes, abs / axes)
    };
    let (mse_r, mae_r) = pooled(&|e| e.euler_deg);
    let (mse_t, mae_t) = pooled(&|e| e.translation);
    let n = errors.len() as f64;
    Ok(MetricSummary {
        pairs: errors.len(),
        mse_r,
        rmse_r: mse_r.sqrt(),
        mae_r,
        mse_t,
        rmse_t: mse_t.sqrt(),
        mae_t,
        mae_chordal: errors.iter().map(|e| e.chordal_deg).sum::<f64>() / n,
        mte: errors.iter().map(|e| e.mte).sum::<f64>() / n,
    })
}

/// Tab-separated table, one row per pair after a header line.
pub fn errors_table(errors: &[PairErrors]) -> String {
    let mut out = String::from("pair\terr_rx\terr_ry\terr_rz\terr_tx\terr_ty\terr_tz\tchordal_deg\tmte\n");
    for (i, e) in errors.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in e.euler_deg.iter().chain(&e.translation).chain([&e.chordal_deg, &e.mte]) {
            let _ = write!(out, "\t{v:.9e}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Decay of the pointwise term per epoch.
    pub beta: f64,
    pub epoch_n: u32,
    /// Squared-distance threshold of the overlap indicator.
    pub theta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.95,
            epoch_n: 0,
            theta: DEFAULT_THETA,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidConfig(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::InvalidConfig(format!("theta must be positive, got {}", self.theta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub term_rot: f64,
    pub term_trans: f64,
    pub term_pointwise: f64,
}

/// `‖R_GTᵀR − I‖² + ‖t_GT − t‖² + βⁿ/N Σ γ_GT,i ‖q̂_i − (R_GT p_i + t_GT)‖²`,
/// where `γ_GT` marks source points with a target within `θ` after the true motion.
pub fn loss(
    p: &PointCloud,
    q: &PointCloud,
    q_hat: &PointCloud,
    est: &RigidTransform,
    gt: &RigidTransform,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    if q_hat.len() != p.len() {
        return Err(Error::SizeMismatch(format!(
            "{} virtual targets for {} source points",
            q_hat.len(),
            p.len()
        )));
    }
    let term_rot = (gt.rotation().transpose() * est.rotation() - nalgebra::Matrix3::identity()).norm_squared();
    let term_trans = (gt.translation() - est.translation()).norm_squared();
    let mask = overlap_mask(p, q, gt, cfg.theta);
    let residual: f64 = p
        .iter()
        .zip(q_hat.iter())
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|((x, qh), _)| (qh - gt.apply_point(x)).norm_squared())
        .sum();
    let term_pointwise = cfg.beta.powi(cfg.epoch_n as i32) * residual / p.len() as f64;
    Ok(LossTerms {
        total: term_rot + term_trans + term_pointwise,
        term_rot,
        term_trans,
        term_pointwise,
    })
}

/// Per-trial deviation statistic for the success rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Deviation {
    #[default]
    Mean,
    Max,
}

/// What "cloud size" means for the success threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CloudSize {
    #[default]
    BoundingBoxDiagonal,
    MaxExtent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessRule {
    /// Threshold as a fraction of the cloud size.
    pub fraction: f64,
    pub deviation: Deviation,
    pub size: CloudSize,
}

impl Default for SuccessRule {
    fn default() -> Self {
        Self {
            fraction: 0.01,
            deviation: Deviation::Mean,
            size: CloudSize::BoundingBoxDiagonal,
        }
    }
}

impl SuccessRule {
    pub fn threshold(&self, cloud: &PointCloud) -> f64 {
        self.fraction
            * match self.size {
                CloudSize::BoundingBoxDiagonal => cloud.bounding_box_diagonal(),
                CloudSize::MaxExtent => cloud.max_extent(),
            }
    }

    /// Whether `est` places `cloud`'s points near where `gt` places them.
    pub fn succeeds(&self, cloud: &PointCloud, est: &RigidTransform, gt: &RigidTransform) -> bool {
        let devs = cloud.iter().map(|x| (est.apply_point(x) - gt.apply_point(x)).norm());
        let stat = match self.deviation {
            Deviation::Mean => devs.sum::<f64>() / cloud.len() as f64,
            Deviation::Max => devs.fold(0.0, f64::max),
        };
        stat < self.threshold(cloud)
    }
}

/// One registration attempt of a sweep.
#[derive(Debug, Clone)]
pub struct GridTrial<'a> {
    pub rotation_deg: f64,
    pub translation_frac: f64,
    pub cloud: &'a PointCloud,
    pub gt: RigidTransform,
    /// `None` when the method errored; counted as a failure.
    pub est: Option<RigidTransform>,
}

/// Success percentages by rotation (rows) and translation (columns)
/// magnitude. Cells without trials are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessGrid {
    pub rotations_deg: Vec<f64>,
    pub translation_fracs: Vec<f64>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl SuccessGrid {
    pub fn cell(&self, rotation_deg: f64, translation_frac: f64) -> Option<f64> {
        let r = self.rotations_deg.iter().position(|&v| v == rotation_deg)?;
        let t = self.translation_fracs.iter().position(|&v| v == translation_frac)?;
        self.cells[r][t]
    }

    /// Tab-separated; first column the rotation, header holds translations.
    pub fn to_table(&self) -> String {
        let mut out = String::from("rotation_deg");
        for t in &self.translation_fracs {
            let _ = write!(out, "\t{t}");
        }
        out.push('\n');
        for (r, row) in self.rotations_deg.iter().zip(&self.cells) {
            let _ = write!(out, "{r}");
            for c in row {
                match c {
                    Some(v) => {
                        let _ = write!(out, "\t{v:.2}");
                    }
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

pub fn success_grid(trials: &[GridTrial<'_>], rule: &SuccessRule) -> SuccessGrid {
    let rotations_deg = sorted_unique(trials.iter().map(|t| t.rotation_deg).collect());
    let translation_fracs = sorted_unique(trials.iter().map(|t| t.translation_frac).collect());
    let mut counts = vec![vec![(0usize, 0usize); translation_fracs.len()]; rotations_deg.len()];
    for t in trials {
        let r = rotations_deg.iter().position(|&v| v == t.rotation_deg).unwrap();
        let c = translation_fracs.iter().position(|&v| v == t.translation_frac).unwrap();
        let cell = &mut counts[r][c];
        cell.1 += 1;
        if t.est.is_some_and(|est| rule.succeeds(t.cloud, &est, &t.gt)) {
            cell.0 += 1;
        }
    }
    let cells = counts
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|(ok, n)| (n > 0).then(|| 100.0 * ok as f64 / n as f64))
                .collect()
        })
        .collect();
    SuccessGrid {
        rotations_deg,
        translation_fracs,
        cells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::rng_from_seed;
    use crate::geometry::{random_rigid_transform, rotation_x, EulerAngles};
    use nalgebra::{Matrix3, Vector3};
    use rand::Rng;

    #[test]
    fn zero_and_translation_only_errors() {
        let mut rng = rng_from_seed(1);
        let x = random_rigid_transform(80.0, -1.0, 1.0, &mut rng);
        let e = transform_errors(&x, &x).unwrap();
        assert_eq!(e.euler_deg, [0.0; 3]);
        assert_eq!(e.translation, [0.0; 3]);
        assert_eq!(e.chordal_deg, 0.0);
        assert_eq!(e.mte, 0.0);

        let shifted = RigidTransform::new(*x.rotation(), x.translation() + Vector3::new(0.3, 0.0, 0.0)).unwrap();
        let e = transform_errors(&shifted, &x).unwrap();
        assert!((e.mte - 0.3).abs() < 1e-12);
        assert_eq!(e.euler_deg, [0.0; 3]);
        assert_eq!(e.chordal_deg, 0.0);
    }

    // geodesic angle of a relative rotation via its trace
    fn trace_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        let rel = b.transpose() * a;
        (((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos().to_degrees()
    }

    #[test]
    fn chordal_matches_geodesic_and_is_symmetric() {
        let mut rng = rng_from_seed(2);
        for _ in 0..200 {
            let a = random_rigid_transform(80.0, -1.0, 1.0, &mut rng);
            let b = random_rigid_transform(80.0, -1.0, 1.0, &mut rng);
            let (Ok(ab), Ok(ba)) = (transform_errors(&a, &b), transform_errors(&b, &a)) else {
                continue;
            };
            assert!((ab.chordal_deg - trace_angle_deg(a.rotation(), b.rotation())).abs() < 1e-6);
            assert_eq!(ab.chordal_deg, ba.chordal_deg);
            assert_eq!(ab.euler_deg, ba.euler_deg);
        }
    }

    #[test]
    fn euler_differences_wrap() {
        let a = RigidTransform::from_euler(EulerAngles::new(179.0, 0.0, -179.0), Vector3::zeros());
        let b = RigidTransform::from_euler(EulerAngles::new(-179.0, 0.0, 179.0), Vector3::zeros());
        let e = transform_errors(&a, &b).unwrap();
        assert!((e.euler_deg[0] - 2.0).abs() < 1e-9);
        assert!((e.euler_deg[2] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn gimbal_lock_is_reported() {
        let r = crate::geometry::rotation_y(90.0);
        let x = RigidTransform::new(r, Vector3::zeros()).unwrap();
        assert!(matches!(
            transform_errors(&x, &RigidTransform::identity()),
            Err(Error::GimbalLock(_))
        ));
    }

    fn random_errors(n: usize, seed: u64) -> Vec<PairErrors> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| PairErrors {
                euler_deg: [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)],
                translation: [rng.random_range(0.0..0.1), rng.random_range(0.0..0.1), rng.random_range(0.0..0.1)],
                chordal_deg: rng.random_range(0.0..10.0),
                mte: rng.random_range(0.0..0.2),
            })
            .collect()
    }

    #[test]
    fn aggregate_examples_and_oracle() {
        assert!(matches!(aggregate(&[]), Err(Error::EmptySet)));
        let zero = PairErrors {
            euler_deg: [0.0; 3],
            translation: [0.0; 3],
            chordal_deg: 0.0,
            mte: 0.0,
        };
        let s = aggregate(&[zero]).unwrap();
        assert_eq!((s.mse_r, s.mae_r, s.mse_t, s.mae_chordal, s.mte), (0.0, 0.0, 0.0, 0.0, 0.0));
        let e = 1.5;
        let same = PairErrors {
            euler_deg: [e; 3],
            ..zero
        };
        let s = aggregate(&[same, same]).unwrap();
        assert!((s.mse_r - e * e).abs() < 1e-12 && (s.mae_r - e).abs() < 1e-12);

        let errs = random_errors(37, 3);
        let s = aggregate(&errs).unwrap();
        let mut sq = 0.0;
        let mut ab = 0.0;
        let mut count = 0.0;
        for pe in &errs {
            for k in 0..3 {
                sq += pe.translation[k] * pe.translation[k];
                ab += pe.translation[k];
                count += 1.0;
            }
        }
        assert!((s.mse_t - sq / count).abs() < 1e-15);
        assert!((s.mae_t - ab / count).abs() < 1e-15);
        assert!((s.rmse_r - s.mse_r.sqrt()).abs() < 1e-9);
        assert!(s.mae_r <= s.rmse_r && s.mae_t <= s.rmse_t);

        let mut rev = errs.clone();
        rev.reverse();
        let r = aggregate(&rev).unwrap();
        assert!((r.mse_r - s.mse_r).abs() < 1e-12 && (r.mte - s.mte).abs() < 1e-12);
    }

    #[test]
    fn reports_are_flat() {
        let s = aggregate(&random_errors(4, 4)).unwrap();
        let text = s.to_report();
        assert_eq!(text.lines().count(), 9);
        assert!(text.lines().all(|l| l.split_once('=').is_some()));
        let table = errors_table(&random_errors(4, 4));
        assert_eq!(table.lines().count(), 5);
        assert!(table.lines().all(|l| l.split('\t').count() == 9));
    }

    #[test]
    fn loss_zero_and_decay() {
        let mut rng = rng_from_seed(5);
        let p = crate::datagen::synthetic_shape(100, &mut rng).unwrap();
        let gt = random_rigid_transform(30.0, -0.5, 0.5, &mut rng);
        let q = crate::geometry::apply_transform(&p, &gt);
        let exact = loss(&p, &q, &q, &gt, &gt, &LossConfig::default()).unwrap();
        assert!(exact.total < 1e-24);

        let q_hat = PointCloud::new(q.iter().map(|x| x + Vector3::new(0.01, 0.0, 0.0)).collect()).unwrap();
        let first = loss(&p, &q, &q_hat, &gt, &gt, &LossConfig::default()).unwrap();
        let later = loss(&p, &q, &q_hat, &gt, &gt, &LossConfig { epoch_n: 14, ..Default::default() }).unwrap();
        assert!((later.term_pointwise / first.term_pointwise - 0.95f64.powi(14)).abs() < 1e-12);

        let est = RigidTransform::new(rotation_x(5.0) * gt.rotation(), *gt.translation()).unwrap();
        let l = loss(&p, &q, &q, &est, &gt, &LossConfig::default()).unwrap();
        assert!(l.term_rot > 0.0 && l.term_trans == 0.0);

        let short = p.select(&[0, 1, 2]).unwrap();
        assert!(matches!(
            loss(&p, &q, &short, &gt, &gt, &LossConfig::default()),
            Err(Error::SizeMismatch(_))
        ));
        assert!(loss(&p, &q, &q, &gt, &gt, &LossConfig { beta: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn success_grid_examples() {
        let mut rng = rng_from_seed(6);
        let cloud = crate::datagen::synthetic_shape(200, &mut rng).unwrap();
        let rule = SuccessRule::default();
        let off = Vector3::new(2.0 * rule.threshold(&cloud), 0.0, 0.0);
        let mut trials = Vec::new();
        for (k, r) in [15.0, 30.0].into_iter().enumerate() {
            for t in [0.1, 0.2, 0.3] {
                let gt = random_rigid_transform(r, -t, t, &mut rng);
                let est = if k == 0 {
                    gt
                } else {
                    RigidTransform::from_translation(off).compose(&gt)
                };
                trials.push(GridTrial {
                    rotation_deg: r,
                    translation_frac: t,
                    cloud: &cloud,
                    gt,
                    est: Some(est),
                });
            }
        }
        let g = success_grid(&trials, &rule);
        assert_eq!(g.rotations_deg, vec![15.0, 30.0]);
        assert_eq!(g.cells[0], vec![Some(100.0); 3]);
        assert_eq!(g.cells[1], vec![Some(0.0); 3]);
        assert_eq!(g.cell(30.0, 0.2), Some(0.0));
        assert_eq!(g.to_table().lines().count(), 3);

        // a failing repeat halves one cell
        let bad = RigidTransform::from_translation(off).compose(&trials[1].gt);
        trials.push(GridTrial { est: Some(bad), ..trials[1].clone() });
        trials.push(GridTrial { est: None, ..trials[2].clone() });
        let g = success_grid(&trials, &rule);
        assert_eq!(g.cell(15.0, 0.2), Some(50.0));
        assert_eq!(g.cell(15.0, 0.1), Some(100.0));
        assert_eq!(g.cell(15.0, 0.3), Some(50.0));
    }

    #[test]
    fn max_statistic_is_stricter() {
        let cloud = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let gt = RigidTransform::identity();
        // a small rotation about the origin moves far points more than near ones
        let est = RigidTransform::new(rotation_x(0.02f64.to_degrees()), Vector3::zeros()).unwrap();
        let mean = SuccessRule { fraction: 0.01, ..Default::default() };
        let max = SuccessRule { deviation: Deviation::Max, ..mean };
        assert!(mean.succeeds(&cloud, &est, &gt));
        assert!(!max.succeeds(&cloud, &est, &gt));
    }
}
