//! Displacement and pose metrics, input corruption and the evaluation harness.

mod ablation;
mod eval;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Fps, Modality, SceneRecord};
use crate::error::{Error, Result};
use crate::training::derived_rng;
pub use ablation::{ablate_masking, AblationRow};
pub use eval::{
    check_disjoint, evaluate, evaluate_samples, ConstantVelocity, EvalConfig, EvalReport, EvalRow, MetricReport,
    Predictor,
};

pub type Point2 = [f64; 2];
pub type Point3 = [f64; 3];

fn dist2(a: Point2, b: Point2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn dist3(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_lengths(pred: &[Point2], gt: &[Point2]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::contract("displacement metrics need at least one frame"));
    }
    Ok(())
}

/// Mean Euclidean displacement over frames.
pub fn ade(pred: &[Point2], gt: &[Point2]) -> Result<f64> {
    check_lengths(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(&p, &g)| dist2(p, g)).sum::<f64>() / gt.len() as f64)
}

/// Displacement at the final frame.
pub fn fde(pred: &[Point2], gt: &[Point2]) -> Result<f64> {
    check_lengths(pred, gt)?;
    Ok(dist2(pred[pred.len() - 1], gt[gt.len() - 1]))
}

fn best_of(modes: &[Vec<Point2>], gt: &[Point2], f: fn(&[Point2], &[Point2]) -> Result<f64>) -> Result<(f64, usize)> {
    if modes.is_empty() {
        return Err(Error::contract("best-of-K metrics need at least one mode"));
    }
    let mut best = (f64::INFINITY, 0);
    for (k, m) in modes.iter().enumerate() {
        let v = f(m, gt)?;
        if v < best.0 {
            best = (v, k);
        }
    }
    Ok(best)
}

/// Best-of-K ADE and the index of the best mode.
pub fn min_ade_k(modes: &[Vec<Point2>], gt: &[Point2]) -> Result<(f64, usize)> {
    best_of(modes, gt, ade)
}

/// Best-of-K FDE and the index of the best mode.
pub fn min_fde_k(modes: &[Vec<Point2>], gt: &[Point2]) -> Result<(f64, usize)> {
    best_of(modes, gt, fde)
}

/// Frame index of a future timestamp: `round(ms · fps / 1000) − 1`.
pub fn frame_at_ms(at_ms: f64, fps: Fps) -> Result<usize> {
    let idx = (at_ms * fps.get() / 1000.0).round() as i64 - 1;
    if idx < 0 {
        return Err(Error::contract(format!("{at_ms} ms is before the first future frame at {fps} fps")));
    }
    Ok(idx as usize)
}

/// Mean joint error in millimeters over the valid joints of the frame at
/// `at_ms`. Coordinates are in meters.
pub fn mpjpe_at(pred: &[Vec<Point3>], gt: &[Vec<Point3>], valid: &[Vec<bool>], at_ms: f64, fps: Fps) -> Result<f64> {
    let t = frame_at_ms(at_ms, fps)?;
    if t >= gt.len() || t >= pred.len() || t >= valid.len() {
        return Err(Error::contract(format!(
            "{at_ms} ms maps to frame {t}, beyond the {}-frame horizon",
            gt.len().min(pred.len())
        )));
    }
    let (p, g, v) = (&pred[t], &gt[t], &valid[t]);
    if p.len() != g.len() || v.len() != g.len() {
        return Err(Error::contract("pose joint counts differ"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for j in 0..g.len() {
        if v[j] {
            sum += dist3(p[j], g[j]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::contract(format!("no valid joints at frame {t}")));
    }
    Ok(1000.0 * sum / n as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseUnit {
    #[default]
    Millimeters,
    Meters,
}

/// Degradation applied to observed 3D pose at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    pub pose_keep_fraction: f64,
    pub gaussian_std: f64,
    pub unit: NoiseUnit,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            pose_keep_fraction: 1.0,
            gaussian_std: 0.0,
            unit: NoiseUnit::Millimeters,
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn keep(fraction: f64) -> Self {
        Self {
            pose_keep_fraction: fraction,
            ..Self::default()
        }
    }

    pub fn noise(std: f64) -> Self {
        Self {
            gaussian_std: std,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pose_keep_fraction > 0.0 && self.pose_keep_fraction <= 1.0) {
            return Err(Error::Config("pose_keep_fraction must lie in (0, 1]".into()));
        }
        if !(self.gaussian_std >= 0.0 && self.gaussian_std.is_finite()) {
            return Err(Error::Config("gaussian_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.pose_keep_fraction == 1.0 && self.gaussian_std == 0.0
    }

    /// Noise standard deviation in meters.
    pub fn std_meters(&self) -> f64 {
        match self.unit {
            NoiseUnit::Millimeters => self.gaussian_std / 1000.0,
            NoiseUnit::Meters => self.gaussian_std,
        }
    }

    /// Short description used in report rows, e.g. `keep=0.5` or `noise=25mm`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.pose_keep_fraction != 1.0 {
            parts.push(format!("keep={}", self.pose_keep_fraction));
        }
        if self.gaussian_std != 0.0 {
            let u = match self.unit {
                NoiseUnit::Millimeters => "mm",
                NoiseUnit::Meters => "m",
            };
            parts.push(format!("noise={}{u}", self.gaussian_std));
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    /// Parses `keep=0.5`, `noise=25`, `noise=0.025m` or a comma list of them.
    pub fn parse(s: &str) -> Result<Self> {
        let mut spec = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("corruption `{part}` is not key=value")))?;
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("corruption value `{v}` is not a number")))
            };
            match key {
                "keep" => spec.pose_keep_fraction = num(value)?,
                "noise" | "std" => {
                    if let Some(v) = value.strip_suffix("mm") {
                        spec.gaussian_std = num(v)?;
                    } else if let Some(v) = value.strip_suffix('m') {
                        spec.gaussian_std = num(v)?;
                        spec.unit = NoiseUnit::Meters;
                    } else {
                        spec.gaussian_std = num(value)?;
                    }
                }
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|_| Error::Config(format!("corruption seed `{value}` is not an integer")))?
                }
                other => return Err(Error::Config(format!("unknown corruption key `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Corrupts the observed 3D pose of every agent, drawing from `rng`.
///
/// Per observed frame, `round(keep · n)` of the `n` valid joints survive (a
/// fresh subset each frame); survivors receive i.i.d. Gaussian noise.
/// Future frames are never touched.
pub fn corrupt_pose_with<R: Rng>(sample: &SceneRecord, spec: &CorruptionSpec, rng: &mut R) -> Result<SceneRecord> {
    spec.validate()?;
    let mut out = sample.clone();
    if spec.is_identity() {
        return Ok(out);
    }
    let std = spec.std_meters();
    let normal = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    for agent in out.agents.iter_mut() {
        let Some(p) = agent.get_mut(Modality::Pose3d) else { continue };
        for t in 0..sample.t_obs.min(p.frames()) {
            let valid: Vec<usize> = (0..p.elements()).filter(|&j| p.is_valid(t, j)).collect();
            let keep = ((spec.pose_keep_fraction * valid.len() as f64).round() as usize).min(valid.len());
            let mut kept = vec![false; p.elements()];
            for i in sample_indices(rng, valid.len(), keep) {
                kept[valid[i]] = true;
            }
            for &j in &valid {
                if !kept[j] {
                    p.set(t, j, None);
                } else if std > 0.0 {
                    let c = p.get(t, j).expect("valid").to_vec();
                    let noisy: Vec<f64> = c.iter().map(|v| v + normal.sample(rng)).collect();
                    p.set(t, j, Some(&noisy));
                }
            }
        }
    }
    Ok(out)
}

/// [`corrupt_pose_with`] seeded from the corruption seed.
pub fn corrupt_pose(sample: &SceneRecord, spec: &CorruptionSpec) -> Result<SceneRecord> {
    corrupt_pose_with(sample, spec, &mut derived_rng(spec.seed, 0, 0))
}
