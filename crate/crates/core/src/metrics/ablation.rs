use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalConfig, EvalReport};
use crate::data::Dataset;
use crate::error::Result;
use crate::masking::MaskSpec;
use crate::training::{pretrain, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: MaskSpec,
    pub report: EvalReport,
}

/// Pre-trains one model per masking strategy with otherwise identical
/// settings and evaluates each on the same test split.
pub fn ablate_masking(
    train: &[Dataset],
    test: &Dataset,
    cfg: &TrainConfig,
    masks: &[MaskSpec],
    eval_cfg: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    masks
        .iter()
        .map(|mask| {
            let run = TrainConfig {
                mask: mask.clone(),
                ..cfg.clone()
            };
            let out = pretrain(train, &run)?;
            let report = evaluate(&out.checkpoint.model, test, Some(&out.checkpoint.meta), eval_cfg)?;
            Ok(AblationRow {
                mask: mask.clone(),
                report,
            })
        })
        .collect()
}
