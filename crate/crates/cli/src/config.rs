//! Run configuration: a JSON file, then command-line overrides on top.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` file,
//! flags. The top-level `seed` and `settings` are copied into every section
//! that has its own, so one value drives all randomness and all horizons.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use transmotion::data::{FrameSettings, SynthConfig};
use transmotion::masking::MaskSpec;
use transmotion::metrics::EvalConfig;
use transmotion::navsim::EpisodeConfig;
use transmotion::training::{TrainConfig, FEW_SHOT_GRID};

/// Selects the predictor used by the predictive navigator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    /// The trained model from `--checkpoint`.
    Model,
    ConstantVelocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavsimConfig {
    pub episodes: usize,
    pub episode: EpisodeConfig,
    pub predictor: PredictorKind,
    /// Horizon of the constant-velocity predictor, in history frames.
    pub cv_horizon: usize,
}

impl Default for NavsimConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            episode: EpisodeConfig::default(),
            predictor: PredictorKind::Model,
            cv_horizon: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub grid: Vec<usize>,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            grid: FEW_SHOT_GRID.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub masks: Vec<MaskSpec>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        use transmotion::masking::MaskMode;
        let with = |mode| MaskSpec {
            mode,
            ..MaskSpec::default()
        };
        Self {
            masks: vec![
                with(MaskMode::None),
                with(MaskMode::ModalityMeta),
                with(MaskMode::Fixed),
                with(MaskMode::Dynamic),
            ],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training (or conversion input) files.
    pub data: Vec<PathBuf>,
    /// Held-out file for eval, few-shot and ablation runs.
    pub eval_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub settings: FrameSettings,
    pub paths: Paths,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub navsim: NavsimConfig,
    pub fewshot: FewShotConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            settings: FrameSettings::default(),
            paths: Paths::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
            navsim: NavsimConfig::default(),
            fewshot: FewShotConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// A failure that maps to exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Invalid(msg.into()))
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            invalid(format!("{}: field `{field}`: {}", path.display(), e.inner()))
        })
    }

    /// Propagates the shared seed and frame settings into the sections.
    pub fn resolve(&mut self) {
        self.train.seed = self.seed;
        self.train.model.init_seed = self.seed;
        self.train.settings = self.settings;
        self.eval.settings = self.settings;
        self.synth.settings = self.settings;
        for c in &mut self.eval.corruptions {
            c.seed = self.seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let at = |section: &str, r: transmotion::Result<()>| r.map_err(|e| invalid(format!("{section}: {e}")));
        at("settings", self.settings.window_frames().map(|_| ()))?;
        at("train", self.train.validate())?;
        at("synth", self.synth.validate())?;
        at("navsim.episode.params", self.navsim.episode.params.validate())?;
        for (i, c) in self.eval.corruptions.iter().enumerate() {
            at(&format!("eval.corruptions[{i}]"), c.validate())?;
        }
        for (i, m) in self.ablation.masks.iter().enumerate() {
            at(&format!("ablation.masks[{i}]"), m.validate())?;
        }
        if self.eval.window_stride == 0 {
            bail!(invalid("eval.window_stride: must be at least 1"));
        }
        if self.navsim.episode.timeout <= 0.0 {
            bail!(invalid("navsim.episode.timeout: must be positive"));
        }
        if self.fewshot.grid.is_empty() {
            bail!(invalid("fewshot.grid: must not be empty"));
        }
        Ok(())
    }
}
