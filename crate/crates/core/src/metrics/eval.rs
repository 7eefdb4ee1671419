use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ade, corrupt_pose_with, fde, min_ade_k, min_fde_k, mpjpe_at, CorruptionSpec, Point2, Point3};
use crate::data::{Dataset, FrameSettings, Modality, SceneRecord};
use crate::error::{Error, Result};
use crate::model::checkpoint::CheckpointMeta;
use crate::model::{Model, PredictionOutput};
use crate::training::{base_scene_id, derived_rng, prepare_samples, EgoPolicy, Sample};

/// Anything that forecasts the ego of a normalized sample.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict_sample(&self, sample: &SceneRecord, subset: &[Modality]) -> Result<PredictionOutput>;
}

impl Predictor for Model {
    fn name(&self) -> String {
        format!("model(K={}, D={})", self.config.k, self.config.hidden_dim)
    }

    fn predict_sample(&self, sample: &SceneRecord, subset: &[Modality]) -> Result<PredictionOutput> {
        self.predict_normalized(sample, subset)
    }
}

/// Extrapolates the last observed ego velocity.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConstantVelocity;

impl Predictor for ConstantVelocity {
    fn name(&self) -> String {
        "constant_velocity".into()
    }

    fn predict_sample(&self, sample: &SceneRecord, _subset: &[Modality]) -> Result<PredictionOutput> {
        let ego = sample.agents.first().ok_or_else(|| Error::contract("sample has no agents"))?;
        let last_t = sample.t_obs.checked_sub(1).ok_or_else(|| Error::contract("no observed frames"))?;
        let last = ego
            .traj
            .get(last_t, 0)
            .ok_or_else(|| Error::contract("ego has no last observed position"))?;
        let v = match last_t.checked_sub(1).and_then(|t| ego.traj.get(t, 0)) {
            Some(prev) => [last[0] - prev[0], last[1] - prev[1]],
            None => [0.0, 0.0],
        };
        let mode = (1..=sample.t_pred)
            .map(|k| [last[0] + k as f64 * v[0], last[1] + k as f64 * v[1]])
            .collect();
        Ok(PredictionOutput {
            traj_modes: vec![mode],
            pose: None,
            pose_valid: None,
        })
    }
}

/// Aggregate metrics over a set of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    /// ADE/FDE of mode 0.
    pub ade: f64,
    pub fde: f64,
    pub min_ade_k: f64,
    pub min_fde_k: f64,
    /// Milliseconds to MPJPE in millimeters.
    pub mpjpe_at: BTreeMap<u32, f64>,
    pub sample_count: usize,
}

struct PerSample {
    k: usize,
    ade: f64,
    fde: f64,
    min_ade: f64,
    min_fde: f64,
    mpjpe: Vec<Option<f64>>,
}

fn full_traj(s: &Sample) -> Result<Vec<Point2>> {
    s.target
        .traj
        .iter()
        .map(|p| {
            p.ok_or_else(|| Error::contract(format!("ego `{}` of {} has gaps in its future", s.ego_id, s.scene_id)))
        })
        .collect()
}

fn score(pred: &dyn Predictor, s: &Sample, index: usize, subset: &[Modality], corruption: Option<&CorruptionSpec>, ms: &[u32]) -> Result<PerSample> {
    let input = match corruption {
        Some(c) if !c.is_identity() => corrupt_pose_with(&s.sample, c, &mut derived_rng(c.seed, 1, index as u64))?,
        _ => s.sample.clone(),
    };
    let out = pred.predict_sample(&input, subset)?;
    let gt = full_traj(s)?;
    let mode0 = out
        .traj_modes
        .first()
        .ok_or_else(|| Error::contract("predictor returned no modes"))?;
    let mut mpjpe = vec![None; ms.len()];
    if let (Some(p), Some(g)) = (&out.pose, &s.target.pose) {
        let valid: Vec<Vec<bool>> = g.iter().map(|f| f.iter().map(Option::is_some).collect()).collect();
        let gt_pose: Vec<Vec<Point3>> = g.iter().map(|f| f.iter().map(|j| j.unwrap_or([0.0; 3])).collect()).collect();
        for (slot, &m) in mpjpe.iter_mut().zip(ms) {
            let t = super::frame_at_ms(m as f64, s.sample.fps)?;
            if t < valid.len() && !valid[t].iter().any(|&v| v) {
                continue;
            }
            *slot = Some(mpjpe_at(p, &gt_pose, &valid, m as f64, s.sample.fps)?);
        }
    }
    Ok(PerSample {
        k: out.traj_modes.len(),
        ade: ade(mode0, &gt)?,
        fde: fde(mode0, &gt)?,
        min_ade: min_ade_k(&out.traj_modes, &gt)?.0,
        min_fde: min_fde_k(&out.traj_modes, &gt)?.0,
        mpjpe,
    })
}

/// Metrics of `pred` on prepared samples. Corruption touches the model input
/// only; ground truth always comes from the clean sample.
pub fn evaluate_samples(
    pred: &dyn Predictor,
    samples: &[Sample],
    subset: &[Modality],
    corruption: Option<&CorruptionSpec>,
    mpjpe_ms: &[u32],
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    let per = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| score(pred, s, i, subset, corruption, mpjpe_ms))
        .collect::<Result<Vec<_>>>()?;
    let n = per.len() as f64;
    let mut mp = vec![(0.0, 0usize); mpjpe_ms.len()];
    for p in &per {
        for (acc, v) in mp.iter_mut().zip(&p.mpjpe) {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        }
    }
    Ok(MetricReport {
        k: per[0].k,
        ade: per.iter().map(|p| p.ade).sum::<f64>() / n,
        fde: per.iter().map(|p| p.fde).sum::<f64>() / n,
        min_ade_k: per.iter().map(|p| p.min_ade).sum::<f64>() / n,
        min_fde_k: per.iter().map(|p| p.min_fde).sum::<f64>() / n,
        mpjpe_at: mpjpe_ms
            .iter()
            .zip(mp)
            .filter(|(_, (_, c))| *c > 0)
            .map(|(&m, (s, c))| (m, s / c as f64))
            .collect(),
        sample_count: per.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub settings: FrameSettings,
    pub window_stride: usize,
    pub ego: EgoPolicy,
    /// Modality subsets to report; derived from the data when absent.
    pub subsets: Option<Vec<Vec<Modality>>>,
    /// Extra corrupted rows, emitted for subsets that contain 3D pose.
    pub corruptions: Vec<CorruptionSpec>,
    pub mpjpe_ms: Vec<u32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            settings: FrameSettings::default(),
            window_stride: 10,
            ego: EgoPolicy::All,
            subsets: None,
            corruptions: Vec::new(),
            mpjpe_ms: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub subset: String,
    pub corruption: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: String,
    pub dataset: String,
    /// Which agents were scored.
    pub egos: String,
    pub rows: Vec<EvalRow>,
}

fn subset_label(s: &[Modality]) -> String {
    s.iter().map(|m| m.short_name()).collect::<Vec<_>>().join("+")
}

/// `{T}`, `{T, 3dP}` when 3D pose is present, and all present modalities when
/// that adds anything.
pub fn default_subsets(scenes: &[SceneRecord]) -> Vec<Vec<Modality>> {
    let present: Vec<Modality> = Modality::ALL.into_iter().filter(|&m| scenes.iter().any(|s| s.has_modality(m))).collect();
    let mut out = vec![vec![Modality::Traj]];
    if present.contains(&Modality::Pose3d) {
        out.push(vec![Modality::Traj, Modality::Pose3d]);
    }
    let mut all = present.clone();
    if !all.contains(&Modality::Traj) {
        all.insert(0, Modality::Traj);
    }
    if !out.contains(&all) {
        out.push(all);
    }
    out
}

/// Rejects evaluation data that shares a split tag or a scene with training.
pub fn check_disjoint(meta: &CheckpointMeta, dataset: &Dataset) -> Result<()> {
    let tag = dataset.tag();
    if meta.train_tags.contains(&tag) {
        return Err(Error::contract(format!("evaluation split `{tag}` was used for training")));
    }
    for s in &dataset.scenes {
        if meta.train_scene_ids.binary_search_by(|id| id.as_str().cmp(base_scene_id(&s.scene_id))).is_ok() {
            return Err(Error::contract(format!("scene `{}` was used for training", s.scene_id)));
        }
    }
    Ok(())
}

/// Evaluates every eligible ego of every window, one row per modality subset
/// and corruption.
pub fn evaluate(pred: &dyn Predictor, dataset: &Dataset, train_meta: Option<&CheckpointMeta>, cfg: &EvalConfig) -> Result<EvalReport> {
    if let Some(meta) = train_meta {
        check_disjoint(meta, dataset)?;
    }
    for c in &cfg.corruptions {
        c.validate()?;
    }
    let samples = prepare_samples(&dataset.scenes, &cfg.settings, cfg.window_stride, cfg.ego)?;
    let subsets = cfg.subsets.clone().unwrap_or_else(|| default_subsets(&dataset.scenes));
    let mut rows = Vec::new();
    for subset in &subsets {
        if !subset.contains(&Modality::Traj) {
            return Err(Error::Config(format!("subset {} lacks T", subset_label(subset))));
        }
        rows.push(EvalRow {
            subset: subset_label(subset),
            corruption: "none".into(),
            report: evaluate_samples(pred, &samples, subset, None, &cfg.mpjpe_ms)?,
        });
        if subset.contains(&Modality::Pose3d) {
            for c in cfg.corruptions.iter().filter(|c| !c.is_identity()) {
                rows.push(EvalRow {
                    subset: subset_label(subset),
                    corruption: c.label(),
                    report: evaluate_samples(pred, &samples, subset, Some(c), &cfg.mpjpe_ms)?,
                });
            }
        }
    }
    Ok(EvalReport {
        predictor: pred.name(),
        dataset: dataset.tag(),
        egos: match cfg.ego {
            EgoPolicy::All => "every agent with a complete window".into(),
            EgoPolicy::First => "first agent of each window".into(),
        },
        rows,
    })
}

impl EvalReport {
    fn mpjpe_columns(&self) -> Vec<u32> {
        let mut ms: Vec<u32> = self.rows.iter().flat_map(|r| r.report.mpjpe_at.keys().copied()).collect();
        ms.sort_unstable();
        ms.dedup();
        ms
    }

    pub fn to_table(&self) -> String {
        let ms = self.mpjpe_columns();
        let mut s = String::new();
        let _ = writeln!(s, "# {} on {} ({})", self.predictor, self.dataset, self.egos);
        let _ = write!(s, "{:<16} {:<16} {:>7} {:>8} {:>8} {:>10} {:>10}", "subset", "corruption", "n", "ADE", "FDE", "minADE_K", "minFDE_K");
        for m in &ms {
            let _ = write!(s, " {:>10}", format!("MPJPE@{m}"));
        }
        s.push('\n');
        for r in &self.rows {
            let p = &r.report;
            let _ = write!(
                s,
                "{:<16} {:<16} {:>7} {:>8.4} {:>8.4} {:>10.4} {:>10.4}",
                r.subset, r.corruption, p.sample_count, p.ade, p.fde, p.min_ade_k, p.min_fde_k
            );
            for m in &ms {
                match p.mpjpe_at.get(m) {
                    Some(v) => {
                        let _ = write!(s, " {v:>10.2}");
                    }
                    None => {
                        let _ = write!(s, " {:>10}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let ms = self.mpjpe_columns();
        let err = |e: csv::Error| Error::Data(format!("writing report: {e}"));
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["subset", "corruption", "k", "samples", "ade", "fde", "min_ade_k", "min_fde_k"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(ms.iter().map(|m| format!("mpjpe_{m}ms")));
        out.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let p = &r.report;
            let mut rec = vec![
                r.subset.clone(),
                r.corruption.clone(),
                p.k.to_string(),
                p.sample_count.to_string(),
                p.ade.to_string(),
                p.fde.to_string(),
                p.min_ade_k.to_string(),
                p.min_fde_k.to_string(),
            ];
            rec.extend(ms.iter().map(|m| p.mpjpe_at.get(m).map_or(String::new(), |v| v.to_string())));
            out.write_record(&rec).map_err(err)?;
        }
        out.flush().map_err(|e| Error::io("<report>", e))
    }
}
