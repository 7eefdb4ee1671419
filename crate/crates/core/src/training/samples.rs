use serde::{Deserialize, Serialize};

use crate::data::{normalize_sample, resample_scene, window, FrameSettings, SceneRecord};
use crate::error::Result;
use crate::model::Target;

/// Which agents of a window become the ego of a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoPolicy {
    /// Every agent with a complete trajectory.
    #[default]
    All,
    /// Only the first listed agent, when its trajectory is complete.
    First,
}

/// One normalized training or evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Window id, `{scene}@{start}`.
    pub scene_id: String,
    pub ego_id: String,
    /// Ego-normalized window, ego first.
    pub sample: SceneRecord,
    pub target: Target,
}

/// Scene id with any window suffix removed.
pub fn base_scene_id(id: &str) -> &str {
    id.split('@').next().unwrap_or(id)
}

/// Resamples scenes to the settings' rate when needed, cuts windows and
/// normalizes one sample per eligible ego.
pub fn prepare_samples(
    scenes: &[SceneRecord],
    settings: &FrameSettings,
    window_stride: usize,
    ego: EgoPolicy,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for scene in scenes {
        let scene = if (scene.fps.get() - settings.fps.get()).abs() > 1e-9 {
            resample_scene(scene, settings.fps)?
        } else {
            scene.clone()
        };
        for w in window(&scene, settings, window_stride)? {
            let mut egos = w.ego_candidates();
            if ego == EgoPolicy::First {
                egos.retain(|&i| i == 0);
            }
            for i in egos {
                let id = w.agents[i].agent_id.clone();
                let (sample, _) = normalize_sample(&w, &id)?;
                out.push(Sample {
                    scene_id: w.scene_id.clone(),
                    ego_id: id,
                    target: Target::from_sample(&sample)?,
                    sample,
                });
            }
        }
    }
    Ok(out)
}
