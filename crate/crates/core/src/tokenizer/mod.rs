//! Turns normalized scene tracks into token sequences.
//!
//! Every (frame, element) entry of a modality becomes one [`Token`]. Tokens
//! are placed on a virtual grid at the maximum frame rate, with slot 0 at the
//! last observed frame, negative slots in the past and positive slots for
//! future queries. Grid positions without data become padding tokens, which
//! are invalid and never attended.

mod embed;

pub use embed::EmbeddingParams;

use serde::{Deserialize, Serialize};

use crate::data::{AgentTrack, Fps, Modality, ModalityTensor, JOINT_COUNT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default virtual grid rate.
pub const MAX_FPS: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Token {
    pub modality: Modality,
    pub element: usize,
    pub slot: i64,
    pub is_future_query: bool,
    /// Carries data (and is attended). Padding and missing entries are invalid.
    pub is_valid: bool,
    /// Valid but content replaced by the mask embedding.
    pub is_masked: bool,
    /// Coordinates, zero-padded to three.
    pub coords: [f64; 3],
}

impl Token {
    fn observed(modality: Modality, element: usize, slot: i64, coords: Option<&[f64]>) -> Self {
        let mut c = [0.0; 3];
        if let Some(v) = coords {
            c[..v.len()].copy_from_slice(v);
        }
        Token {
            modality,
            element,
            slot,
            is_future_query: false,
            is_valid: coords.is_some(),
            is_masked: false,
            coords: c,
        }
    }

    fn query(modality: Modality, element: usize, slot: i64) -> Self {
        Token {
            modality,
            element,
            slot,
            is_future_query: true,
            is_valid: true,
            is_masked: false,
            coords: [0.0; 3],
        }
    }

    /// Whether the token enters attention.
    pub fn attended(&self) -> bool {
        self.is_valid
    }

    /// Whether the token's vector comes from its coordinates.
    pub fn carries_data(&self) -> bool {
        self.is_valid && !self.is_masked && !self.is_future_query
    }
}

/// One token per (observed frame, element), at frame-unit slots
/// `-(t_obs-1) ..= 0`. Invalid entries become invalid tokens.
pub fn project(tensor: &ModalityTensor, t_obs: usize) -> Result<Vec<Token>> {
    if t_obs > tensor.frames() {
        return Err(Error::contract(format!(
            "{} has {} frames, fewer than t_obs = {t_obs}",
            tensor.modality(),
            tensor.frames()
        )));
    }
    let m = tensor.modality();
    let mut out = Vec::with_capacity(t_obs * tensor.elements());
    for t in 0..t_obs {
        let slot = t as i64 - (t_obs as i64 - 1);
        for e in 0..tensor.elements() {
            out.push(Token::observed(m, e, slot, tensor.get(t, e)));
        }
    }
    Ok(out)
}

/// Grid slots per real frame.
pub fn grid_stride(fps: Fps, max_fps: Fps) -> Result<usize> {
    max_fps.stride_to(fps)
}

/// Spreads frame-unit observation tokens onto the max-fps grid.
///
/// Real frames land every `max_fps / fps` slots, anchored at slot 0; the
/// in-between slots of the `t_obs·stride` observation grid receive padding
/// tokens for every (modality, element) present.
pub fn upsample_pad(tokens: &[Token], fps: Fps, max_fps: Fps) -> Result<Vec<Token>> {
    let stride = grid_stride(fps, max_fps)? as i64;
    if stride == 1 {
        return Ok(tokens.to_vec());
    }
    let earliest = tokens.iter().filter(|t| !t.is_future_query).map(|t| t.slot).min().unwrap_or(0);
    let grid_start = earliest * stride - (stride - 1);
    let mut elements: Vec<(Modality, usize)> = tokens
        .iter()
        .filter(|t| !t.is_future_query)
        .map(|t| (t.modality, t.element))
        .collect();
    elements.sort();
    elements.dedup();

    let mut out = Vec::with_capacity(tokens.len() * stride as usize);
    for tok in tokens {
        let mut t = *tok;
        t.slot *= stride;
        out.push(t);
    }
    for slot in grid_start..=0 {
        if slot % stride != 0 {
            for &(m, e) in &elements {
                out.push(Token::observed(m, e, slot, None));
            }
        }
    }
    out.sort_by_key(|t| (t.is_future_query, t.slot, t.modality, t.element));
    Ok(out)
}

/// Observation tokens of one agent for the given modalities on the grid.
pub fn tokenize_agent(agent: &AgentTrack, modalities: &[Modality], t_obs: usize, fps: Fps, max_fps: Fps) -> Result<Vec<Token>> {
    let mut frame_tokens = Vec::new();
    for m in Modality::ALL {
        if !modalities.contains(&m) {
            continue;
        }
        if let Some(tensor) = agent.get(m) {
            frame_tokens.extend(project(tensor, t_obs)?);
        }
    }
    upsample_pad(&frame_tokens, fps, max_fps)
}

/// Appends learned-query placeholders for every future frame: one per
/// trajectory frame and, when `pose` is set, 39 per pose frame. Frame `k`
/// (0-based) sits at slot `(k+1)·stride`.
pub fn append_future_queries(tokens: &mut Vec<Token>, t_pred: usize, stride: usize, traj: bool, pose: bool) {
    for k in 0..t_pred {
        let slot = ((k + 1) * stride) as i64;
        if traj {
            tokens.push(Token::query(Modality::Traj, 0, slot));
        }
        if pose {
            for j in 0..JOINT_COUNT {
                tokens.push(Token::query(Modality::Pose3d, j, slot));
            }
        }
    }
}

/// Fixed sinusoidal encodings for the two sides of the grid.
///
/// Observation slot `s ≤ 0` uses index `|s|`; prediction slot `s ≥ 1` uses
/// index `s − 1` and the sine/cosine-swapped table, so the two sides never
/// share a vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiDirEncoderTable {
    pub dim: usize,
    /// Largest index on either side.
    pub capacity: usize,
}

impl BiDirEncoderTable {
    pub fn new(dim: usize, capacity: usize) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::Config(format!("encoding dimension {dim} must be even and at least 2")));
        }
        Ok(Self { dim, capacity })
    }

    /// `(index, is_prediction_side)` for a slot.
    pub fn index(slot: i64) -> (usize, bool) {
        if slot <= 0 {
            (slot.unsigned_abs() as usize, false)
        } else {
            (slot as usize - 1, true)
        }
    }

    pub fn encode(&self, slot: i64) -> Result<Vec<f64>> {
        let (idx, future) = Self::index(slot);
        if idx > self.capacity {
            return Err(Error::contract(format!(
                "grid slot {slot} exceeds encoder capacity {}",
                self.capacity
            )));
        }
        let mut out = vec![0.0; self.dim];
        for k in 0..self.dim / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * k as f64 / self.dim as f64);
            let (s, c) = (idx as f64 * freq).sin_cos();
            if future {
                out[2 * k] = c;
                out[2 * k + 1] = s;
            } else {
                out[2 * k] = s;
                out[2 * k + 1] = c;
            }
        }
        Ok(out)
    }

    /// `[slots.len() × dim]` encodings.
    pub fn rows(&self, slots: impl IntoIterator<Item = i64>) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut n = 0;
        for s in slots {
            data.extend(self.encode(s)?);
            n += 1;
        }
        Tensor::new(vec![n, self.dim], data)
    }
}

/// Adds the bidirectional encoding to each row of `vectors` (`[n × D]`, one
/// row per token).
pub fn bidir_encode(tokens: &[Token], vectors: &mut Tensor, table: &BiDirEncoderTable) -> Result<()> {
    if vectors.shape() != [tokens.len(), table.dim] {
        return Err(Error::Dimension {
            op: "bidir_encode",
            lhs: vectors.shape().to_vec(),
            rhs: vec![tokens.len(), table.dim],
        });
    }
    for (row, tok) in vectors.data_mut().chunks_mut(table.dim).zip(tokens) {
        for (v, e) in row.iter_mut().zip(table.encode(tok.slot)?) {
            *v += e;
        }
    }
    Ok(())
}

/// Nominal extent of one modality for the length formulas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModalityExtent {
    pub modality: Modality,
    /// e_c: elements per frame (valid joints for poses).
    pub elements: usize,
    /// t_c: observed frames kept after the sampling mask.
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenBudget {
    /// L_c = e_c·t_c.
    pub per_modality: Vec<(Modality, usize)>,
    /// Pose terms after the drop ratio, floor(L_c·(1 − r_d)).
    pub pose_kept: Vec<(Modality, usize)>,
    pub l1: usize,
    pub l2: usize,
}

impl TokenBudget {
    pub fn length(&self, m: Modality) -> usize {
        self.per_modality.iter().find(|(c, _)| *c == m).map_or(0, |p| p.1)
    }

    pub fn kept(&self, m: Modality) -> usize {
        if m.is_pose() {
            self.pose_kept.iter().find(|(c, _)| *c == m).map_or(0, |p| p.1)
        } else {
            self.length(m)
        }
    }
}

/// Expected pose tokens kept out of `len` when a fraction `r_d` is dropped.
pub fn pose_term(len: usize, r_d: f64) -> usize {
    (len as f64 * (1.0 - r_d) + 1e-9).floor() as usize
}

/// Token lengths for one agent:
/// L1 = L_T + L_3dB + L_2dB + L_3dP(1−r_d) + L_2dP(1−r_d),
/// and the agent's share of L2, L_T + L_3dP(1−r_d), multiplied by `n_agents`.
pub fn token_budget(extents: &[ModalityExtent], r_d: f64, n_agents: usize) -> Result<TokenBudget> {
    if !(0.0..1.0).contains(&r_d) {
        return Err(Error::contract(format!("drop ratio {r_d} outside [0, 1)")));
    }
    let mut per_modality = Vec::new();
    let mut pose_kept = Vec::new();
    for m in Modality::ALL {
        let len: usize = extents
            .iter()
            .filter(|x| x.modality == m)
            .map(|x| x.elements * x.frames)
            .sum();
        if extents.iter().any(|x| x.modality == m) {
            per_modality.push((m, len));
            if m.is_pose() {
                pose_kept.push((m, pose_term(len, r_d)));
            }
        }
    }
    let mut b = TokenBudget {
        per_modality,
        pose_kept,
        l1: 0,
        l2: 0,
    };
    b.l1 = Modality::ALL.iter().map(|&m| b.kept(m)).sum();
    b.l2 = n_agents * (b.kept(Modality::Traj) + b.kept(Modality::Pose3d));
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{remap_joints, PoseSource, RawPose};

    fn fps(v: f64) -> Fps {
        Fps::new(v).unwrap()
    }

    fn traj(frames: usize) -> ModalityTensor {
        ModalityTensor::new(Modality::Traj, frames, vec![0.5; frames * 2], vec![true; frames]).unwrap()
    }

    #[test]
    fn trajectory_tokens() {
        let toks = project(&traj(10), 10).unwrap();
        assert_eq!(toks.len(), 10);
        assert!(toks.iter().all(|t| t.modality == Modality::Traj && t.element == 0 && t.is_valid));
        assert_eq!(toks.last().unwrap().slot, 0);
        assert_eq!(toks[0].slot, -9);
    }

    #[test]
    fn jta_pose_tokens() {
        let raw = RawPose {
            frames: 10,
            joints: 22,
            features: 3,
            values: vec![0.1; 10 * 22 * 3],
            valid: vec![true; 10 * 22],
        };
        let pose = remap_joints(PoseSource::Jta, &raw, Modality::Pose3d).unwrap();
        let toks = project(&pose, 10).unwrap();
        assert_eq!(toks.iter().filter(|t| t.is_valid).count(), 220);
        assert_eq!(toks.iter().filter(|t| !t.is_valid).count(), 170);
    }

    #[test]
    fn all_invalid_frame() {
        let mut t = traj(3);
        t.set(1, 0, None);
        let toks = project(&t, 3).unwrap();
        assert!(!toks[1].attended());
    }

    #[test]
    fn upsampling_grid() {
        let toks = project(&traj(10), 10).unwrap();
        let grid = upsample_pad(&toks, fps(5.0), fps(MAX_FPS)).unwrap();
        assert_eq!(grid.len(), 100);
        let real: Vec<i64> = grid.iter().filter(|t| t.is_valid).map(|t| t.slot).collect();
        assert_eq!(real, (0..10).map(|k| -90 + 10 * k).collect::<Vec<_>>());
        assert_eq!(grid.iter().map(|t| t.slot).min(), Some(-99));
        assert_eq!(upsample_pad(&toks, fps(50.0), fps(MAX_FPS)).unwrap(), toks);
        assert!(matches!(
            upsample_pad(&toks, fps(3.0), fps(MAX_FPS)),
            Err(Error::UnsupportedRate(_))
        ));
    }

    #[test]
    fn encoder_sides() {
        let table = BiDirEncoderTable::new(16, 1000).unwrap();
        assert_ne!(table.encode(-10).unwrap(), table.encode(10).unwrap());
        assert_ne!(table.encode(0).unwrap(), table.encode(1).unwrap());
        assert_eq!(BiDirEncoderTable::index(1), (0, true));
        assert!(table.encode(-1001).is_err());
    }

    #[test]
    fn trailing_frames_share_encodings() {
        let table = BiDirEncoderTable::new(8, 1000).unwrap();
        let short = upsample_pad(&project(&traj(10), 10).unwrap(), fps(5.0), fps(50.0)).unwrap();
        let long = upsample_pad(&project(&traj(20), 20).unwrap(), fps(5.0), fps(50.0)).unwrap();
        let tail = |toks: &[Token]| -> Vec<Vec<f64>> {
            let mut v: Vec<&Token> = toks.iter().filter(|t| t.is_valid).collect();
            v.sort_by_key(|t| t.slot);
            v[v.len() - 5..].iter().map(|t| table.encode(t.slot).unwrap()).collect()
        };
        assert_eq!(tail(&short), tail(&long));
    }

    #[test]
    fn query_counts() {
        let mut toks = Vec::new();
        append_future_queries(&mut toks, 20, 10, true, false);
        assert_eq!(toks.len(), 20);
        assert_eq!(toks[0].slot, 10);
        let mut toks = Vec::new();
        append_future_queries(&mut toks, 25, 2, false, true);
        assert_eq!(toks.len(), 975);
        assert!(toks.iter().all(|t| t.is_future_query && t.slot >= 1));
    }

    #[test]
    fn budget_examples() {
        let ext = |m, e, t| ModalityExtent {
            modality: m,
            elements: e,
            frames: t,
        };
        let b = token_budget(&[ext(Modality::Traj, 1, 10), ext(Modality::Pose3d, 22, 10)], 0.0, 1).unwrap();
        assert_eq!(b.l1, 230);
        let b = token_budget(&[ext(Modality::Traj, 1, 30), ext(Modality::Pose3d, 22, 10)], 0.5, 3).unwrap();
        assert_eq!(b.kept(Modality::Pose3d), 110);
        assert_eq!(b.l2, 420);
        let b = token_budget(&[ext(Modality::Traj, 1, 10), ext(Modality::Box2d, 2, 10), ext(Modality::Pose2d, 17, 10)], 0.25, 2).unwrap();
        assert_eq!(b.l1, 10 + 20 + 127);
        assert_eq!(b.l2, 20);
        assert!(token_budget(&[], 1.0, 1).is_err());
    }
}
