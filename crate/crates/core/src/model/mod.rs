//! The dual transformer.
//!
//! Stage 1 runs per agent over that agent's tokens (all input modalities,
//! plus the ego's future queries). Stage 2 runs once over the trajectory and
//! 3D-pose outputs of every agent together with the ego's queries. The K
//! trajectory heads and the pose head read the ego's query outputs.

pub mod checkpoint;
pub mod params;

pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_sample, Anchor, Fps, Modality, SceneRecord, JOINT_COUNT};
use crate::error::{Error, Result};
use crate::masking::sampling_mask;
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{append_future_queries, grid_stride, tokenize_agent, EmbeddingParams, Token};
use layers::{Block, Head, Norm};
pub use params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub heads: usize,
    pub layers_stage1: usize,
    pub layers_stage2: usize,
    pub ff_mult: usize,
    /// Number of trajectory modes K.
    pub k: usize,
    pub max_fps: f64,
    /// Modalities with an input projection.
    pub input_modalities: Vec<Modality>,
    /// Emit the deterministic future pose (adds 39 queries per future frame).
    pub predict_pose: bool,
    /// Largest grid index the positional tables accept on either side.
    pub grid_capacity: usize,
    /// Parameter initialization seed.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            heads: 4,
            layers_stage1: 6,
            layers_stage2: 4,
            ff_mult: 4,
            k: 20,
            max_fps: 50.0,
            input_modalities: Modality::ALL.to_vec(),
            predict_pose: true,
            grid_capacity: 1000,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.hidden_dim < 2 || self.hidden_dim % 2 != 0 {
            return Err(Error::Config("hidden_dim must be even".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.ff_mult == 0 {
            return Err(Error::Config("ff_mult must be at least 1".into()));
        }
        if !self.input_modalities.contains(&Modality::Traj) {
            return Err(Error::Config("input modalities must include T".into()));
        }
        Fps::new(self.max_fps)?;
        Ok(())
    }

    pub fn max_fps(&self) -> Fps {
        Fps::new(self.max_fps).expect("validated")
    }
}

/// Ego predictions in the ego-normalized frame (or world frame after
/// [`predict`]).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput {
    /// `K × t_pred` points.
    pub traj_modes: Vec<Vec<[f64; 2]>>,
    /// `t_pred × 39` pelvis-local joints, when the model predicts pose.
    pub pose: Option<Vec<Vec<[f64; 3]>>>,
    /// Joints of the pose output backed by observed data.
    pub pose_valid: Option<Vec<bool>>,
}

impl PredictionOutput {
    pub fn is_finite(&self) -> bool {
        self.traj_modes.iter().flatten().flatten().all(|v| v.is_finite())
            && self.pose.iter().flatten().flatten().flatten().all(|v| v.is_finite())
    }
}

/// Tokens of one sample: agent 0 is the ego and carries the future queries.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTokens {
    pub agents: Vec<Vec<Token>>,
    pub t_pred: usize,
}

/// Supervision for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub traj: Vec<Option<[f64; 2]>>,
    /// `t_pred × 39`.
    pub pose: Option<Vec<Vec<Option<[f64; 3]>>>>,
}

impl Target {
    /// Ego future of a normalized sample.
    pub fn from_sample(sample: &SceneRecord) -> Result<Self> {
        let ego = sample.agents.first().ok_or_else(|| Error::contract("sample has no agents"))?;
        let future = sample.t_obs..sample.frames();
        let traj = future
            .clone()
            .map(|t| ego.traj.get(t, 0).map(|c| [c[0], c[1]]))
            .collect();
        let pose = ego.pose3d.as_ref().map(|p| {
            future
                .map(|t| (0..JOINT_COUNT).map(|j| p.get(t, j).map(|c| [c[0], c[1], c[2]])).collect())
                .collect()
        });
        Ok(Self { traj, pose })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub traj: f64,
    pub pose: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { traj: 1.0, pose: 1.0 }
    }
}

/// Graph outputs of one forward pass.
pub struct ForwardVars {
    /// K tensors of shape `[t_pred × 2]`.
    pub modes: Vec<Var>,
    /// `[t_pred·39 × 3]`.
    pub pose: Option<Var>,
}

pub struct LossTerms {
    pub total: Var,
    pub traj: f64,
    pub pose: f64,
    pub best_mode: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    embed: EmbeddingParams,
    stage1: Vec<Block>,
    norm1: Norm,
    stage2: Vec<Block>,
    norm2: Norm,
    traj_heads: Vec<Head>,
    pose_head: Option<Head>,
}

fn canonical_key(tokens: &[Token]) -> Vec<(Modality, usize, i64, bool, [u64; 3])> {
    tokens
        .iter()
        .filter(|t| t.attended())
        .map(|t| {
            (
                t.modality,
                t.element,
                t.slot,
                t.is_masked,
                [t.coords[0].to_bits(), t.coords[1].to_bits(), t.coords[2].to_bits()],
            )
        })
        .collect()
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let d = config.hidden_dim;
        let embed = EmbeddingParams::init(
            &mut store,
            &mut rng,
            d,
            &config.input_modalities,
            config.predict_pose,
            config.grid_capacity,
        )?;
        let stage1 = (0..config.layers_stage1)
            .map(|i| Block::init(&mut store, &mut rng, &format!("stage1.{i}"), d, config.heads, config.ff_mult))
            .collect();
        let norm1 = Norm::init(&mut store, "stage1.norm", d);
        let stage2 = (0..config.layers_stage2)
            .map(|i| Block::init(&mut store, &mut rng, &format!("stage2.{i}"), d, config.heads, config.ff_mult))
            .collect();
        let norm2 = Norm::init(&mut store, "stage2.norm", d);
        let traj_heads = (0..config.k)
            .map(|k| Head::init(&mut store, &mut rng, &format!("head.traj.{k}"), d, 2))
            .collect();
        let pose_head = config
            .predict_pose
            .then(|| Head::init(&mut store, &mut rng, "head.pose", d, 3));
        Ok(Self {
            config,
            store,
            embed,
            stage1,
            norm1,
            stage2,
            norm2,
            traj_heads,
            pose_head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Tokens of a normalized sample (ego first) restricted to `modalities`.
    pub fn tokenize(&self, sample: &SceneRecord, modalities: &[Modality]) -> Result<SampleTokens> {
        if sample.agents.is_empty() {
            return Err(Error::contract("sample has no agents"));
        }
        let max_fps = self.config.max_fps();
        let stride = grid_stride(sample.fps, max_fps)?;
        let mods: Vec<Modality> = modalities
            .iter()
            .copied()
            .filter(|m| self.config.input_modalities.contains(m))
            .collect();
        let mut agents = Vec::with_capacity(sample.agents.len());
        for (i, a) in sample.agents.iter().enumerate() {
            let mut toks = tokenize_agent(a, &mods, sample.t_obs, sample.fps, max_fps)?;
            if i == 0 {
                append_future_queries(&mut toks, sample.t_pred, stride, true, self.config.predict_pose);
            }
            agents.push(toks);
        }
        Ok(SampleTokens {
            agents,
            t_pred: sample.t_pred,
        })
    }

    fn stage(&self, g: &Graph, blocks: &[Block], norm: &Norm, mut x: Var) -> Result<Var> {
        for b in blocks {
            x = b.forward(g, &self.store, x)?;
        }
        norm.forward(g, &self.store, x)
    }

    /// Records the forward pass on `g`.
    pub fn forward(&self, g: &Graph, sample: &SampleTokens) -> Result<ForwardVars> {
        if sample.agents.is_empty() {
            return Err(Error::contract("forward needs at least one agent"));
        }
        let compact: Vec<Vec<Token>> = sample
            .agents
            .iter()
            .map(|a| a.iter().filter(|t| t.attended()).copied().collect())
            .collect();
        let ego = &compact[0];
        if !ego.iter().any(|t| t.modality == Modality::Traj && !t.is_future_query) {
            return Err(Error::contract("ego has no trajectory tokens"));
        }
        let n_traj_q = ego
            .iter()
            .filter(|t| t.is_future_query && t.modality == Modality::Traj)
            .count();
        if n_traj_q != sample.t_pred {
            return Err(Error::contract(format!(
                "ego carries {n_traj_q} trajectory queries for a {}-frame horizon",
                sample.t_pred
            )));
        }

        // Neighbours in a canonical order so the stage-2 reduction order does
        // not depend on how the input listed them.
        let mut neighbours: Vec<&Vec<Token>> = compact[1..].iter().filter(|a| !a.is_empty()).collect();
        neighbours.sort_by_cached_key(|a| canonical_key(a));

        let mut social_parts = Vec::with_capacity(neighbours.len() + 1);
        let mut traj_rows = Vec::new();
        let mut pose_rows = Vec::new();
        let mut offset = 0;
        for (i, toks) in std::iter::once(ego).chain(neighbours).enumerate() {
            let x = self.embed.embed(g, &self.store, toks)?;
            let h = self.stage(g, &self.stage1, &self.norm1, x)?;
            let keep: Vec<usize> = (0..toks.len())
                .filter(|&j| matches!(toks[j].modality, Modality::Traj | Modality::Pose3d))
                .collect();
            if keep.is_empty() {
                continue;
            }
            if i == 0 {
                for (pos, &j) in keep.iter().enumerate() {
                    if toks[j].is_future_query {
                        if toks[j].modality == Modality::Traj {
                            traj_rows.push(pos);
                        } else {
                            pose_rows.push(pos);
                        }
                    }
                }
            }
            offset += keep.len();
            social_parts.push(g.gather_rows(h, &keep)?);
        }
        debug_assert!(offset > 0);
        let social_in = if social_parts.len() == 1 {
            social_parts[0]
        } else {
            g.concat_rows(&social_parts)?
        };
        let social = self.stage(g, &self.stage2, &self.norm2, social_in)?;
        let traj_q = g.gather_rows(social, &traj_rows)?;
        let modes = self
            .traj_heads
            .iter()
            .map(|h| h.forward(g, &self.store, traj_q))
            .collect::<Result<Vec<_>>>()?;
        let pose = match (&self.pose_head, pose_rows.is_empty()) {
            (Some(head), false) => {
                let q = g.gather_rows(social, &pose_rows)?;
                Some(head.forward(g, &self.store, q)?)
            }
            _ => None,
        };
        Ok(ForwardVars { modes, pose })
    }

    /// Winner-takes-all trajectory loss plus masked pose loss.
    ///
    /// Each mode's error is the mean squared displacement over valid future
    /// frames; only the best mode contributes. The pose term is the mean
    /// squared joint error over valid ground-truth joints.
    pub fn loss(&self, g: &Graph, out: &ForwardVars, target: &Target, weights: LossWeights) -> Result<LossTerms> {
        let t_pred = target.traj.len();
        let mut mask = Vec::with_capacity(t_pred * 2);
        let mut gt = Vec::with_capacity(t_pred * 2);
        for p in &target.traj {
            match p {
                Some(c) => {
                    gt.extend_from_slice(c);
                    mask.extend_from_slice(&[1.0, 1.0]);
                }
                None => {
                    gt.extend_from_slice(&[0.0, 0.0]);
                    mask.extend_from_slice(&[0.0, 0.0]);
                }
            }
        }
        let n_valid = target.traj.iter().filter(|p| p.is_some()).count();
        let gt = g.constant(Tensor::new(vec![t_pred, 2], gt)?);
        let mask = g.constant(Tensor::new(vec![t_pred, 2], mask)?);

        let mut best: Option<(f64, usize, Var)> = None;
        for (k, &m) in out.modes.iter().enumerate() {
            let d = g.sub(m, gt)?;
            let d = g.mul(d, mask)?;
            let sq = g.mul(d, d)?;
            let l = g.scale(g.sum(sq), 1.0 / n_valid.max(1) as f64);
            let v = g.item(l);
            if best.as_ref().map_or(true, |b| v < b.0) {
                best = Some((v, k, l));
            }
        }
        let (traj_value, best_mode, traj_var) = best.ok_or_else(|| Error::contract("no trajectory modes"))?;
        let mut total = g.scale(traj_var, weights.traj);
        let mut pose_value = 0.0;

        if let (Some(pose_out), Some(pose_gt)) = (out.pose, target.pose.as_ref()) {
            let rows = pose_gt.len() * JOINT_COUNT;
            let mut vals = Vec::with_capacity(rows * 3);
            let mut msk = Vec::with_capacity(rows * 3);
            let mut n = 0usize;
            for frame in pose_gt {
                for j in frame {
                    match j {
                        Some(c) => {
                            vals.extend_from_slice(c);
                            msk.extend_from_slice(&[1.0; 3]);
                            n += 1;
                        }
                        None => {
                            vals.extend_from_slice(&[0.0; 3]);
                            msk.extend_from_slice(&[0.0; 3]);
                        }
                    }
                }
            }
            if n > 0 {
                let gt = g.constant(Tensor::new(vec![rows, 3], vals)?);
                let m = g.constant(Tensor::new(vec![rows, 3], msk)?);
                let d = g.sub(pose_out, gt)?;
                let d = g.mul(d, m)?;
                let sq = g.mul(d, d)?;
                let l = g.scale(g.sum(sq), 1.0 / n as f64);
                pose_value = g.item(l);
                let weighted = g.scale(l, weights.pose);
                total = g.add(total, weighted)?;
            }
        }
        Ok(LossTerms {
            total,
            traj: traj_value,
            pose: pose_value,
            best_mode,
        })
    }

    /// Inference on an ego-normalized sample restricted to `subset`, with the
    /// sampling mask implied by the sample's frame rate.
    pub fn predict_normalized(&self, sample: &SceneRecord, subset: &[Modality]) -> Result<PredictionOutput> {
        let mut tokens = self.tokenize(sample, subset)?;
        let chunk = grid_stride(sample.fps, self.config.max_fps())?;
        for a in tokens.agents.iter_mut() {
            *a = sampling_mask(a, chunk)?.apply(a);
        }
        self.predict_tokens(&tokens)
    }

    /// Forward pass without gradient bookkeeping beyond the throwaway graph.
    pub fn predict_tokens(&self, sample: &SampleTokens) -> Result<PredictionOutput> {
        let g = Graph::new();
        let out = self.forward(&g, sample)?;
        let traj_modes = out
            .modes
            .iter()
            .map(|&m| g.with_value(m, |t| t.data().chunks(2).map(|c| [c[0], c[1]]).collect()))
            .collect();
        let pose = out.pose.map(|p| {
            g.with_value(p, |t| {
                t.data()
                    .chunks(3 * JOINT_COUNT)
                    .map(|frame| frame.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
                    .collect()
            })
        });
        let pose_valid = pose.as_ref().map(|_| {
            let mut v = vec![false; JOINT_COUNT];
            for t in &sample.agents[0] {
                if t.modality == Modality::Pose3d && t.carries_data() {
                    v[t.element] = true;
                }
            }
            v
        });
        Ok(PredictionOutput {
            traj_modes,
            pose,
            pose_valid,
        })
    }
}

/// Inference on a raw scene window for agent `ego_id` using only `subset`.
///
/// The scene is normalized around the ego, tokenized with the chosen
/// modalities, passed through the sampling mask implied by its frame rate,
/// and the trajectory modes are translated back to the world frame.
pub fn predict(model: &Model, scene: &SceneRecord, ego_id: &str, subset: &[Modality]) -> Result<(PredictionOutput, Anchor)> {
    if !subset.contains(&Modality::Traj) {
        return Err(Error::contract("modality subset must contain T"));
    }
    let (sample, anchor) = normalize_sample(scene, ego_id)?;
    let mut out = model.predict_normalized(&sample, subset)?;
    for mode in out.traj_modes.iter_mut() {
        for p in mode.iter_mut() {
            *p = anchor.to_world(*p);
        }
    }
    Ok((out, anchor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn tiny(predict_pose: bool) -> Model {
        Model::new(ModelConfig {
            hidden_dim: 16,
            layers_stage1: 1,
            layers_stage2: 1,
            ff_mult: 2,
            k: 3,
            predict_pose,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn sample() -> SceneRecord {
        let scenes = synth_generate(5, 1, &SynthConfig::default()).unwrap();
        normalize_sample(&scenes[0], "0").unwrap().0
    }

    #[test]
    fn output_shapes() {
        let m = Model::new(ModelConfig {
            hidden_dim: 16,
            layers_stage1: 1,
            layers_stage2: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let s = sample();
        let toks = m.tokenize(&s, &Modality::ALL).unwrap();
        let out = m.predict_tokens(&toks).unwrap();
        assert_eq!(out.traj_modes.len(), 20);
        assert!(out.traj_modes.iter().all(|t| t.len() == 20));
        let pose = out.pose.unwrap();
        assert_eq!((pose.len(), pose[0].len()), (20, 39));
    }

    #[test]
    fn zero_agents_and_missing_trajectory() {
        let m = tiny(false);
        let g = Graph::new();
        let empty = SampleTokens {
            agents: vec![],
            t_pred: 3,
        };
        assert!(matches!(m.forward(&g, &empty), Err(Error::Contract(_))));
        let s = sample();
        let toks = m.tokenize(&s, &[Modality::Pose3d]).unwrap();
        assert!(matches!(m.forward(&g, &toks), Err(Error::Contract(_))));
        assert!(predict(&m, &synth_generate(5, 1, &SynthConfig::default()).unwrap()[0], "0", &[Modality::Pose3d]).is_err());
    }

    #[test]
    fn exact_mode_and_offset_losses() {
        let m = tiny(true);
        let g = Graph::new();
        let t_pred = 4;
        let modes: Vec<Var> = (0..3)
            .map(|k| g.constant(Tensor::filled(&[t_pred, 2], k as f64)))
            .collect();
        let pose = g.constant(Tensor::zeros(&[t_pred * 39, 3]));
        let out = ForwardVars { modes, pose: Some(pose) };
        let mut target = Target {
            traj: vec![Some([1.0, 1.0]); t_pred],
            pose: Some(vec![vec![Some([0.0; 3]); 39]; t_pred]),
        };
        let l = m.loss(&g, &out, &target, LossWeights::default()).unwrap();
        assert_eq!(g.item(l.total), 0.0);
        assert_eq!(l.best_mode, 1);
        // invalid joints are not supervised
        target.pose.as_mut().unwrap()[0][38] = None;
        let l2 = m.loss(&g, &out, &target, LossWeights::default()).unwrap();
        assert_eq!(g.item(l2.total), 0.0);

        let m1 = ForwardVars {
            modes: vec![g.constant(Tensor::filled(&[t_pred, 2], 0.5))],
            pose: None,
        };
        let target = Target {
            traj: vec![Some([0.0, 0.5]); t_pred],
            pose: None,
        };
        let l = m.loss(&g, &m1, &target, LossWeights::default()).unwrap();
        assert!((g.item(l.total) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn padding_tokens_do_not_change_outputs() {
        let m = tiny(false);
        let s = sample();
        let toks = m.tokenize(&s, &[Modality::Traj, Modality::Pose3d]).unwrap();
        let mut padded = toks.clone();
        for a in padded.agents.iter_mut() {
            let extra: Vec<Token> = a
                .iter()
                .filter(|t| !t.is_future_query)
                .map(|t| Token {
                    is_valid: false,
                    slot: t.slot - 3,
                    ..*t
                })
                .collect();
            a.extend(extra);
        }
        assert_eq!(m.predict_tokens(&toks).unwrap(), m.predict_tokens(&padded).unwrap());
    }

    #[test]
    fn subsets_and_determinism() {
        let m = tiny(true);
        let scene = &synth_generate(9, 1, &SynthConfig::default()).unwrap()[0];
        let a = predict(&m, scene, "1", &[Modality::Traj]).unwrap().0;
        let b = predict(&m, scene, "1", &[Modality::Traj, Modality::Pose3d]).unwrap().0;
        assert!(a.is_finite() && b.is_finite());
        assert_ne!(a, b);
        assert_eq!(a, predict(&m, scene, "1", &[Modality::Traj]).unwrap().0);
    }
}
