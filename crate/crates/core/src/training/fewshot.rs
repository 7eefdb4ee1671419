use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{derived_rng, prepare_samples, samples::base_scene_id, AdamState, Sample, TrainConfig, Trainer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_samples, MetricReport};
use crate::model::checkpoint::{Checkpoint, CheckpointMeta};
use crate::model::Model;

pub const FEW_SHOT_GRID: [usize; 5] = [50, 100, 250, 500, 1000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    /// `pretrained` or `scratch`.
    pub variant: String,
    pub n: usize,
    pub ade: f64,
    pub fde: f64,
    pub min_ade_k: f64,
    pub min_fde_k: f64,
}

/// Sizes of `grid` not exceeding `available`, plus `available` itself when
/// some larger size had to be dropped.
pub fn clamp_grid(grid: &[usize], available: usize) -> Vec<usize> {
    let mut out: Vec<usize> = grid.iter().copied().filter(|&n| n > 0 && n <= available).collect();
    if grid.iter().any(|&n| n > available) && available > 0 && !out.contains(&available) {
        out.push(available);
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn check_splits(train: &Dataset, eval: &Dataset, base: Option<&CheckpointMeta>) -> Result<()> {
    if train.tag() == eval.tag() {
        return Err(Error::contract(format!("train and eval share the split `{}`", train.tag())));
    }
    let mut ids: Vec<&str> = train.scenes.iter().map(|s| base_scene_id(&s.scene_id)).collect();
    ids.sort_unstable();
    for s in &eval.scenes {
        if ids.binary_search(&base_scene_id(&s.scene_id)).is_ok() {
            return Err(Error::contract(format!("scene `{}` appears in both splits", s.scene_id)));
        }
    }
    if let Some(meta) = base {
        crate::metrics::check_disjoint(meta, eval)?;
    }
    Ok(())
}

/// The fixed, seed-shuffled pool whose prefixes form the few-shot subsets.
pub fn few_shot_pool(train: &Dataset, cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let mut pool = prepare_samples(&train.scenes, &cfg.settings, cfg.window_stride, cfg.ego)?;
    pool.shuffle(&mut derived_rng(cfg.seed, u64::MAX - 1, 0));
    Ok(pool)
}

fn row(variant: &str, n: usize, r: MetricReport) -> FewShotRow {
    FewShotRow {
        variant: variant.into(),
        n,
        ade: r.ade,
        fde: r.fde,
        min_ade_k: r.min_ade_k,
        min_fde_k: r.min_fde_k,
    }
}

/// Trains on the first `n` pool samples for every `n` of the clamped grid and
/// evaluates on `eval`. With `base`, training starts from its weights;
/// otherwise from a fresh model built from `cfg.model`.
pub fn few_shot(base: Option<&Checkpoint>, train: &Dataset, eval: &Dataset, cfg: &TrainConfig, grid: &[usize]) -> Result<Vec<FewShotRow>> {
    check_splits(train, eval, base.map(|c| &c.meta))?;
    let pool = few_shot_pool(train, cfg)?;
    if pool.is_empty() {
        return Err(Error::contract("few-shot training split yields no samples"));
    }
    let eval_samples = prepare_samples(&eval.scenes, &cfg.settings, cfg.window_stride, cfg.ego)?;
    let mut cfg = cfg.clone();
    if let Some(b) = base {
        cfg.model = b.model.config.clone();
    }
    let variant = if base.is_some() { "pretrained" } else { "scratch" };
    let mut rows = Vec::new();
    for n in clamp_grid(grid, pool.len()) {
        let model = match base {
            Some(b) => b.model.clone(),
            None => Model::new(cfg.model.clone())?,
        };
        let ckpt = Checkpoint {
            optimizer: Some(AdamState::new(&model.store, cfg.adam)),
            model,
            meta: CheckpointMeta::default(),
        };
        let mut t = Trainer::new(ckpt, &pool[..n], cfg.clone())?;
        t.run()?;
        let r = evaluate_samples(&t.checkpoint.model, &eval_samples, &cfg.modalities, None, &[])?;
        rows.push(row(variant, n, r));
    }
    Ok(rows)
}

pub fn write_few_shot_csv<W: std::io::Write>(w: W, rows: &[FewShotRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Data(format!("writing few-shot log: {e}")))?;
    }
    out.flush().map_err(|e| Error::io("<few-shot log>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, CanonicalHeader, SynthConfig};

    #[test]
    fn grid_clamping() {
        assert_eq!(clamp_grid(&FEW_SHOT_GRID, 5000), FEW_SHOT_GRID.to_vec());
        assert_eq!(clamp_grid(&FEW_SHOT_GRID, 300), vec![50, 100, 250, 300]);
        assert_eq!(clamp_grid(&FEW_SHOT_GRID, 10), vec![10]);
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let scenes = synth_generate(1, 2, &SynthConfig::default()).unwrap();
        let a = Dataset::new(CanonicalHeader::new("synth", "train"), scenes.clone());
        let b = Dataset::new(CanonicalHeader::new("synth", "test"), scenes);
        let cfg = TrainConfig::default();
        assert!(matches!(few_shot(None, &a, &b, &cfg, &[1]), Err(Error::Contract(_))));
        assert!(matches!(few_shot(None, &a, &a, &cfg, &[1]), Err(Error::Contract(_))));
    }
}
