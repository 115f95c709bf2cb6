//! Synthetic registration pairs.
//!
//! Pair construction order: sample `P` from the source, map it through the
//! ground-truth motion to get `Q`, crop both clouds to the neighbourhood of a
//! random seed point, then add noise.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embed::knn_indices;
use crate::error::{Error, Result};
use crate::geometry::{
    apply_transform, farthest_point_indices, random_rigid_transform, PointCloud, RigidTransform,
};

/// The RNG stream used for every stochastic operation in the crate.
pub type ExperimentRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> ExperimentRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;
pub const DEFAULT_THETA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Both clouds share the same sampled points.
    Shared,
    /// Each cloud draws its own random subset of the source.
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub n_points: usize,
    pub rotation_max_deg: f64,
    pub translation_range: (f64, f64),
    /// Number of nearest neighbours kept around each crop seed.
    pub partial_keep: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub sampling_mode: SamplingMode,
    pub seed: u64,
    /// Rotation magnitudes (degrees) for success-grid sweeps.
    pub sweep_rotation_deg: Vec<f64>,
    /// Translation magnitudes, as fractions of the source bounding-box diagonal.
    pub sweep_translation_frac: Vec<f64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            n_points: 1024,
            rotation_max_deg: 45.0,
            translation_range: (-0.5, 0.5),
            partial_keep: None,
            noise_sigma: None,
            sampling_mode: SamplingMode::Shared,
            seed: 0,
            sweep_rotation_deg: Vec::new(),
            sweep_translation_frac: Vec::new(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::InvalidConfig("n_points must be positive".into()));
        }
        if let Some(keep) = self.partial_keep {
            if keep == 0 || keep > self.n_points {
                return Err(Error::InvalidConfig(format!(
                    "partial keep {keep} must be in 1..={}",
                    self.n_points
                )));
            }
        }
        if let Some(s) = self.noise_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("noise sigma must be >= 0, got {s}")));
            }
        }
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg.is_finite()) {
            return Err(Error::InvalidConfig("rotation_max_deg must be >= 0".into()));
        }
        let (lo, hi) = self.translation_range;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidConfig("translation range must satisfy lo <= hi".into()));
        }
        if self.sweep_rotation_deg.is_empty() != self.sweep_translation_frac.is_empty() {
            return Err(Error::InvalidConfig(
                "sweeps need both rotation and translation magnitudes".into(),
            ));
        }
        Ok(())
    }

    pub fn is_sweep(&self) -> bool {
        !self.sweep_rotation_deg.is_empty()
    }

    /// Flat `key = value` text, one entry per line, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = ExperimentSpec::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::parse("<spec>", lineno + 1, msg);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(bad(format!("duplicate key {key:?}")));
            }
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| bad(format!("bad number {v:?} for {key}")))
            };
            let count = |v: &str| -> Result<usize> {
                v.parse::<usize>()
                    .map_err(|_| bad(format!("bad count {v:?} for {key}")))
            };
            let list = |v: &str| -> Result<Vec<f64>> {
                v.split(',').map(|s| num(s.trim())).collect()
            };
            match key {
                "n_points" => spec.n_points = count(value)?,
                "rotation_max_deg" => spec.rotation_max_deg = num(value)?,
                "translation_range" => {
                    let v = list(value)?;
                    if v.len() != 2 {
                        return Err(bad("translation_range needs lo,hi".into()));
                    }
                    spec.translation_range = (v[0], v[1]);
                }
                "partial_keep" => {
                    spec.partial_keep = match value {
                        "none" => None,
                        v => Some(count(v)?),
                    }
                }
                "noise_sigma" => {
                    spec.noise_sigma = match value {
                        "none" => None,
                        v => Some(num(v)?),
                    }
                }
                "sampling_mode" => {
                    spec.sampling_mode = match value {
                        "shared" => SamplingMode::Shared,
                        "independent" => SamplingMode::Independent,
                        v => return Err(bad(format!("unknown sampling mode {v:?}"))),
                    }
                }
                "seed" => spec.seed = value.parse().map_err(|_| bad(format!("bad seed {value:?}")))?,
                "sweep_rotation_deg" => spec.sweep_rotation_deg = list(value)?,
                "sweep_translation_frac" => spec.sweep_translation_frac = list(value)?,
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let opt_count = |v: Option<usize>| v.map_or("none".to_string(), |k| k.to_string());
        let opt_num = |v: Option<f64>| v.map_or("none".to_string(), |k| k.to_string());
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut out = format!(
            "n_points = {}\nrotation_max_deg = {}\ntranslation_range = {},{}\npartial_keep = {}\nnoise_sigma = {}\nsampling_mode = {}\nseed = {}\n",
            self.n_points,
            self.rotation_max_deg,
            self.translation_range.0,
            self.translation_range.1,
            opt_count(self.partial_keep),
            opt_num(self.noise_sigma),
            match self.sampling_mode {
                SamplingMode::Shared => "shared",
                SamplingMode::Independent => "independent",
            },
            self.seed
        );
        if self.is_sweep() {
            out.push_str(&format!(
                "sweep_rotation_deg = {}\nsweep_translation_frac = {}\n",
                join(&self.sweep_rotation_deg),
                join(&self.sweep_translation_frac)
            ));
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::parse(path, line, message),
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationPair {
    pub p: PointCloud,
    pub q: PointCloud,
    /// Maps `P`'s frame to `Q`'s frame.
    pub gt: RigidTransform,
}

/// Builds a pair with a random ground truth drawn from the experiment's ranges.
pub fn make_pair(source: &PointCloud, spec: &ExperimentSpec) -> Result<RegistrationPair> {
    let mut rng = rng_from_seed(spec.seed);
    let (lo, hi) = spec.translation_range;
    // draw the motion first so it does not depend on the sampling mode
    let gt = random_rigid_transform(spec.rotation_max_deg, lo, hi, &mut rng);
    make_pair_with(source, spec, gt, &mut rng)
}

/// Builds a pair for a caller-chosen ground truth.
pub fn make_pair_with<R: Rng + ?Sized>(
    source: &PointCloud,
    spec: &ExperimentSpec,
    gt: RigidTransform,
    rng: &mut R,
) -> Result<RegistrationPair> {
    spec.validate()?;
    let n = spec.n_points;
    if source.len() < n {
        return Err(Error::SourceTooSmall {
            needed: n,
            available: source.len(),
        });
    }
    let (p, q_local) = match spec.sampling_mode {
        SamplingMode::Shared => {
            let start = rng.random_range(0..source.len());
            let p = source.select(&farthest_point_indices(source, n, start)?)?;
            (p.clone(), p)
        }
        SamplingMode::Independent => {
            let a = sorted_sample(rng, source.len(), n);
            let b = sorted_sample(rng, source.len(), n);
            (source.select(&a)?, source.select(&b)?)
        }
    };
    let mut p = p;
    let mut q = apply_transform(&q_local, &gt);
    if let Some(keep) = spec.partial_keep {
        p = partial_crop(&p, keep, rng.random_range(0..p.len()))?;
        q = partial_crop(&q, keep, rng.random_range(0..q.len()))?;
    }
    if let Some(sigma) = spec.noise_sigma {
        p = add_noise(&p, sigma, rng)?;
        q = add_noise(&q, sigma, rng)?;
    }
    Ok(RegistrationPair { p, q, gt })
}

fn sorted_sample<R: Rng + ?Sized>(rng: &mut R, len: usize, n: usize) -> Vec<usize> {
    let mut idx = sample(rng, len, n).into_vec();
    idx.sort_unstable();
    idx
}

/// Indices of the `keep` points nearest to `cloud[seed]` (seed included), in
/// ascending index order.
pub fn partial_crop_indices(cloud: &PointCloud, keep: usize, seed: usize) -> Result<Vec<usize>> {
    if keep == 0 || keep > cloud.len() {
        return Err(Error::BadCount {
            requested: keep,
            available: cloud.len(),
        });
    }
    if seed >= cloud.len() {
        return Err(Error::BadIndex {
            index: seed,
            len: cloud.len(),
        });
    }
    let mut idx = knn_indices(cloud, seed, keep);
    idx.sort_unstable();
    Ok(idx)
}

pub fn partial_crop(cloud: &PointCloud, keep: usize, seed: usize) -> Result<PointCloud> {
    cloud.select(&partial_crop_indices(cloud, keep, seed)?)
}

pub fn add_noise<R: Rng + ?Sized>(cloud: &PointCloud, sigma: f64, rng: &mut R) -> Result<PointCloud> {
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    PointCloud::new(
        cloud
            .iter()
            .map(|p| p + Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng)))
            .collect(),
    )
}

/// `γ_GT,i = [min_j ‖q_j − (R p_i + t)‖² < θ]`; the threshold is on the squared distance.
pub fn overlap_mask(p: &PointCloud, q: &PointCloud, gt: &RigidTransform, theta: f64) -> Vec<bool> {
    p.iter()
        .map(|x| {
            let y = gt.apply_point(x);
            q.iter()
                .map(|qj| (qj - y).norm_squared())
                .fold(f64::INFINITY, f64::min)
                < theta
        })
        .collect()
}

/// Rotation by `angle_deg` about a uniformly random axis.
pub fn random_axis_rotation<R: Rng + ?Sized>(angle_deg: f64, rng: &mut R) -> nalgebra::Matrix3<f64> {
    let axis = random_unit_vector(rng);
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis), angle_deg.to_radians())
        .into_inner()
}

pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v = Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Procedural stand-ins for CAD models: a few box, cylinder and ellipsoid
/// surfaces with random proportions, placements and orientations, sampled
/// on their surfaces and scaled into the unit sphere.
pub fn synthetic_shape<R: Rng + ?Sized>(n_points: usize, rng: &mut R) -> Result<PointCloud> {
    let parts = rng.random_range(2..=4);
    let mut prims = Vec::with_capacity(parts);
    for k in 0..parts {
        let kind = rng.random_range(0..3);
        let size = Vector3::new(
            rng.random_range(0.15..1.0),
            rng.random_range(0.1..0.6),
            rng.random_range(0.05..0.4),
        );
        let offset = if k == 0 {
            Vector3::zeros()
        } else {
            Vector3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.4..0.4),
            )
        };
        let orient = random_axis_rotation(rng.random_range(0.0..90.0), rng);
        prims.push((kind, size, offset, orient));
    }
    let areas: Vec<f64> = prims
        .iter()
        .map(|(kind, s, _, _)| match kind {
            0 => 2.0 * (s.x * s.y + s.y * s.z + s.x * s.z),
            1 => std::f64::consts::PI * (s.x + s.y) * s.z * 2.0 + std::f64::consts::PI * s.x * s.y * 0.5,
            _ => 4.0 * std::f64::consts::PI * ((s.x * s.y + s.y * s.z + s.x * s.z) / 3.0),
        })
        .collect();
    let total: f64 = areas.iter().sum();
    let mut pts = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let mut u = rng.random_range(0.0..total);
        let mut which = 0;
        while which + 1 < prims.len() && u >= areas[which] {
            u -= areas[which];
            which += 1;
        }
        let (kind, s, off, rot) = &prims[which];
        let local = match kind {
            0 => box_surface_point(s, rng),
            1 => cylinder_surface_point(s, rng),
            _ => random_unit_vector(rng).component_mul(&(s * 0.5)),
        };
        pts.push(rot * local + off);
    }
    let cloud = PointCloud::new(pts)?;
    let c = cloud.centroid();
    let radius = cloud.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
    PointCloud::new(cloud.iter().map(|p| (p - c) / radius).collect())
}

fn box_surface_point<R: Rng + ?Sized>(s: &Vector3<f64>, rng: &mut R) -> Vector3<f64> {
    let faces = [s.y * s.z, s.x * s.z, s.x * s.y];
    let total = 2.0 * faces.iter().sum::<f64>();
    let mut u = rng.random_range(0.0..total);
    let mut axis = 0;
    while axis < 2 && u >= 2.0 * faces[axis] {
        u -= 2.0 * faces[axis];
        axis += 1;
    }
    let mut p = Vector3::new(
        rng.random_range(-0.5..0.5) * s.x,
        rng.random_range(-0.5..0.5) * s.y,
        rng.random_range(-0.5..0.5) * s.z,
    );
    p[axis] = if rng.random_bool(0.5) { 0.5 } else { -0.5 } * s[axis];
    p
}

// elliptic cylinder along z with caps
fn cylinder_surface_point<R: Rng + ?Sized>(s: &Vector3<f64>, rng: &mut R) -> Vector3<f64> {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (a, b, h) = (s.x * 0.5, s.y * 0.5, s.z);
    let side = std::f64::consts::PI * (a + b) * h * 2.0;
    let caps = 2.0 * std::f64::consts::PI * a * b;
    if rng.random_range(0.0..side + caps) < side {
        Vector3::new(a * theta.cos(), b * theta.sin(), rng.random_range(-0.5..0.5) * h)
    } else {
        let r = rng.random_range(0.0f64..1.0).sqrt();
        let z = if rng.random_bool(0.5) { 0.5 } else { -0.5 } * h;
        Vector3::new(a * r * theta.cos(), b * r * theta.sin(), z)
    }
}
