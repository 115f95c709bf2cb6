//! Iterative registration drivers.
//!
//! * [`register_deepbbs`]: feature-space matching, re-run on the moved source
//!   with the spatial temperature `T` shrinking geometrically.
//! * [`register_deepbbs_pp`]: the above followed by matching on raw
//!   coordinates at a fixed temperature.
//! * [`register_spatial_only`]: the raw-coordinate stage alone.
//! * [`register_icp`]: point-to-point ICP baseline.
//!
//! The source `P` moves toward `Q`; every estimate maps the original `P` into
//! `Q`'s frame.

use crate::embed::{embed, with_coordinates, EmbeddingKind};
use crate::error::{Error, Result};
use crate::geometry::{apply_transform, rotation_angle_between_deg, PointCloud, RigidTransform};
use crate::matching::{compute_alpha, match_targets, GammaMode, MatchScratch, DEFAULT_XI};
use crate::solve::{weighted_procrustes, Correspondences};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub embedding: EmbeddingKind,
    pub xi: f64,
    pub t_initial: f64,
    pub t_decay: f64,
    /// Stop once the rotation step between consecutive estimates is below this, in degrees.
    pub convergence_deg: f64,
    pub max_iters: usize,
    pub fine_tune: bool,
    pub fine_tune_temperature: f64,
    pub fine_tune_convergence_deg: f64,
    /// Iteration cap of the spatial stage.
    pub fine_tune_max_iters: usize,
    pub icp_max_iters: usize,
    pub icp_tol: f64,
    pub gamma_mode: GammaMode,
    /// Start the feature stage from the translation that maps `P`'s centroid
    /// onto `Q`'s.
    pub align_centroids: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            embedding: EmbeddingKind::default(),
            xi: DEFAULT_XI,
            t_initial: 1.0,
            t_decay: 0.5,
            convergence_deg: 0.4,
            max_iters: 20,
            fine_tune: true,
            fine_tune_temperature: 1.0,
            fine_tune_convergence_deg: 0.4,
            fine_tune_max_iters: 100,
            icp_max_iters: 50,
            icp_tol: 1e-6,
            gamma_mode: GammaMode::Full,
            align_centroids: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        let positive = [
            ("xi", self.xi),
            ("t_initial", self.t_initial),
            ("convergence_deg", self.convergence_deg),
            ("fine_tune_temperature", self.fine_tune_temperature),
            ("fine_tune_convergence_deg", self.fine_tune_convergence_deg),
            ("icp_tol", self.icp_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.t_decay > 0.0 && self.t_decay < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "t_decay must lie in (0, 1), got {}",
                self.t_decay
            )));
        }
        if self.max_iters == 0 || self.fine_tune_max_iters == 0 || self.icp_max_iters == 0 {
            return Err(Error::InvalidConfig("iteration caps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Feature,
    Spatial,
    Icp,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Feature => "feature",
            Stage::Spatial => "spatial",
            Stage::Icp => "icp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub stage: Stage,
    /// Incremental transform estimated in this iteration.
    pub step: RigidTransform,
    /// Geodesic angle between consecutive cumulative estimates, degrees.
    pub rotation_step_deg: f64,
    pub temperature: Option<f64>,
    /// ICP only: mean squared nearest-neighbour residual before the step.
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationReport {
    pub estimate: RigidTransform,
    /// Starting estimate the recorded steps are applied to.
    pub initial: RigidTransform,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
}

impl RegistrationReport {
    fn new() -> Self {
        Self {
            estimate: RigidTransform::identity(),
            initial: RigidTransform::identity(),
            iterations: Vec::new(),
            converged: false,
        }
    }

    /// Ordered composition of every recorded step on top of the initial estimate.
    pub fn composed_steps(&self) -> RigidTransform {
        self.iterations
            .iter()
            .fold(self.initial, |acc, it| it.step.compose(&acc))
    }

    pub fn temperatures(&self, stage: Stage) -> Vec<f64> {
        self.iterations
            .iter()
            .filter(|it| it.stage == stage)
            .filter_map(|it| it.temperature)
            .collect()
    }

    pub fn stage_iterations(&self, stage: Stage) -> usize {
        self.iterations.iter().filter(|it| it.stage == stage).count()
    }

    /// Human-readable summary, one iteration per line.
    pub fn to_text(&self) -> String {
        let r = self.estimate.rotation();
        let t = self.estimate.translation();
        let mut out = String::new();
        out.push_str(&format!("converged={}\n", self.converged));
        out.push_str(&format!("iterations={}\n", self.iterations.len()));
        out.push_str(&format!(
            "rotation_angle_deg={:.9}\n",
            self.estimate.rotation_angle_deg()
        ));
        out.push_str(&format!("translation={:.9} {:.9} {:.9}\n", t.x, t.y, t.z));
        for row in 0..3 {
            out.push_str(&format!(
                "R{row}={:.12} {:.12} {:.12}\n",
                r[(row, 0)],
                r[(row, 1)],
                r[(row, 2)]
            ));
        }
        for (k, it) in self.iterations.iter().enumerate() {
            out.push_str(&format!(
                "iter {k} stage={} rotation_step_deg={:.6}",
                it.stage, it.rotation_step_deg
            ));
            if let Some(temp) = it.temperature {
                out.push_str(&format!(" temperature={temp}"));
            }
            if let Some(res) = it.residual {
                out.push_str(&format!(" residual={res:.6e}"));
            }
            out.push('\n');
        }
        out
    }
}

fn check_inputs(p: &PointCloud, q: &PointCloud, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    if p.len() < 3 || q.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            available: p.len().min(q.len()),
        });
    }
    Ok(())
}

/// Shared soft-matching loop. `temperature(k)` gives T for iteration k.
fn bbs_stage(
    p: &PointCloud,
    q: &PointCloud,
    cfg: &PipelineConfig,
    stage: Stage,
    embedding: EmbeddingKind,
    threshold_deg: f64,
    max_iters: usize,
    temperature: impl Fn(usize) -> f64,
    report: &mut RegistrationReport,
) -> Result<bool> {
    // the embedding of a rigidly moved P only differs in its coordinates, and α
    // only depends on distances within P
    let p_features = embed(p, embedding)?;
    let q_features = embed(q, embedding)?;
    let alpha = compute_alpha(&p_features, cfg.xi)?;
    let mut scratch = MatchScratch::default();
    for k in 0..max_iters {
        let moving = apply_transform(p, &report.estimate);
        let t = temperature(k);
        let moving_features = with_coordinates(&p_features, &moving);
        let (q_hat, gamma) = match_targets(
            &mut scratch,
            &moving,
            q,
            &moving_features,
            &q_features,
            alpha,
            t,
            cfg.gamma_mode,
        )?;
        let step = weighted_procrustes(&Correspondences::new(&moving, &q_hat, &gamma)?)?;
        let next = step.compose(&report.estimate);
        let angle = rotation_angle_between_deg(next.rotation(), report.estimate.rotation());
        report.estimate = next;
        report.iterations.push(IterationRecord {
            stage,
            step,
            rotation_step_deg: angle,
            temperature: Some(t),
            residual: None,
        });
        if angle < threshold_deg {
            return Ok(true);
        }
    }
    Ok(false)
}

fn feature_stage(p: &PointCloud, q: &PointCloud, cfg: &PipelineConfig, report: &mut RegistrationReport) -> Result<bool> {
    if cfg.align_centroids {
        report.initial = RigidTransform::from_translation(q.centroid() - p.centroid());
        report.estimate = report.initial;
    }
    let (t0, decay) = (cfg.t_initial, cfg.t_decay);
    bbs_stage(
        p,
        q,
        cfg,
        Stage::Feature,
        cfg.embedding,
        cfg.convergence_deg,
        cfg.max_iters,
        |k| t0 * decay.powi(k as i32),
        report,
    )
}

fn spatial_stage(p: &PointCloud, q: &PointCloud, cfg: &PipelineConfig, report: &mut RegistrationReport) -> Result<bool> {
    let t = cfg.fine_tune_temperature;
    bbs_stage(
        p,
        q,
        cfg,
        Stage::Spatial,
        EmbeddingKind::Identity,
        cfg.fine_tune_convergence_deg,
        cfg.fine_tune_max_iters,
        |_| t,
        report,
    )
}

pub fn register_deepbbs(p: &PointCloud, q: &PointCloud, cfg: &PipelineConfig) -> Result<RegistrationReport> {
    check_inputs(p, q, cfg)?;
    let mut report = RegistrationReport::new();
    report.converged = feature_stage(p, q, cfg, &mut report)?;
    Ok(report)
}

/// Feature stage, then spatial fine-tuning. `converged` reflects the final stage.
pub fn register_deepbbs_pp(p: &PointCloud, q: &PointCloud, cfg: &PipelineConfig) -> Result<RegistrationReport> {
    check_inputs(p, q, cfg)?;
    let mut report = RegistrationReport::new();
    report.converged = feature_stage(p, q, cfg, &mut report)?;
    report.converged = spatial_stage(p, q, cfg, &mut report)?;
    Ok(report)
}

pub fn register_spatial_only(p: &PointCloud, q: &PointCloud, cfg: &PipelineConfig) -> Result<RegistrationReport> {
    check_inputs(p, q, cfg)?;
    let mut report = RegistrationReport::new();
    report.converged = spatial_stage(p, q, cfg, &mut report)?;
    Ok(report)
}

/// Index of the nearest point of `q` to `x`, lowest index on ties.
pub fn nearest_index(q: &PointCloud, x: &nalgebra::Vector3<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, y) in q.iter().enumerate() {
        let d = (x - y).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn register_icp(p: &PointCloud, q: &PointCloud, cfg: &PipelineConfig) -> Result<RegistrationReport> {
    check_inputs(p, q, cfg)?;
    let mut report = RegistrationReport::new();
    let mut previous: Option<f64> = None;
    for _ in 0..cfg.icp_max_iters {
        let moving = apply_transform(p, &report.estimate);
        let mut matched = Vec::with_capacity(moving.len());
        let mut mse = 0.0;
        for x in moving.iter() {
            let (j, d) = nearest_index(q, x);
            matched.push(q[j]);
            mse += d;
        }
        mse /= moving.len() as f64;
        if let Some(prev) = previous {
            if (prev - mse).abs() < cfg.icp_tol {
                report.converged = true;
                break;
            }
        }
        previous = Some(mse);
        let target = PointCloud::new(matched)?;
        let step = weighted_procrustes(&Correspondences::unweighted(&moving, &target)?)?;
        let next = step.compose(&report.estimate);
        let angle = rotation_angle_between_deg(next.rotation(), report.estimate.rotation());
        report.estimate = next;
        report.iterations.push(IterationRecord {
            stage: Stage::Icp,
            step,
            rotation_step_deg: angle,
            temperature: None,
            residual: Some(mse),
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    DeepBbs,
    DeepBbsPp,
    Icp,
    SpatialOnly,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::DeepBbs, Method::DeepBbsPp, Method::Icp, Method::SpatialOnly];

    pub fn name(&self) -> &'static str {
        match self {
            Method::DeepBbs => "deepbbs",
            Method::DeepBbsPp => "deepbbs-pp",
            Method::Icp => "icp",
            Method::SpatialOnly => "spatial-only",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

pub fn register(method: Method, p: &PointCloud, q: &PointCloud, cfg: &PipelineConfig) -> Result<RegistrationReport> {
    match method {
        Method::DeepBbs => register_deepbbs(p, q, cfg),
        Method::DeepBbsPp => {
            if cfg.fine_tune {
                register_deepbbs_pp(p, q, cfg)
            } else {
                register_deepbbs(p, q, cfg)
            }
        }
        Method::Icp => register_icp(p, q, cfg),
        Method::SpatialOnly => register_spatial_only(p, q, cfg),
    }
}
