//! Sampling, dynamic spatial-temporal and baseline masks over token lists.
//!
//! A mask assigns every token a [`MaskDecision`]. `Drop` removes the token
//! from the sequence; `Blank` keeps it in place but swaps its content for the
//! mask embedding. Pose masking drops, trajectory/box temporal masking blanks,
//! which is what makes the first-stage length formula hold. Future queries and
//! already-invalid tokens always receive `Keep`.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::tokenizer::Token;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskDecision {
    Keep,
    Blank,
    Drop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Dynamic,
    Fixed,
    ModalityMeta,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    /// Sampling-mask chunk on the max-fps grid; `None` keeps the data rate.
    pub chunk: Option<usize>,
    pub r_s_range: [f64; 2],
    pub r_t: f64,
    pub mode: MaskMode,
    pub fixed_ratio: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            chunk: None,
            r_s_range: [0.1, 0.9],
            r_t: 0.1,
            mode: MaskMode::Dynamic,
            fixed_ratio: 0.25,
        }
    }
}

impl MaskSpec {
    pub fn none() -> Self {
        Self {
            mode: MaskMode::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.r_s_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("r_s_range [{lo}, {hi}] must satisfy 0 < low <= high < 1")));
        }
        if !(0.0..1.0).contains(&self.r_t) {
            return Err(Error::Config(format!("r_t {} outside [0, 1)", self.r_t)));
        }
        if !(0.0..1.0).contains(&self.fixed_ratio) {
            return Err(Error::Config(format!("fixed_ratio {} outside [0, 1)", self.fixed_ratio)));
        }
        if self.chunk == Some(0) {
            return Err(Error::Config("chunk must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskResult {
    pub decisions: Vec<MaskDecision>,
    /// Realized spatial ratio, when a dynamic mask drew one.
    pub realized_r_s: Option<f64>,
    /// Per modality, the observation slots blanked or dropped as whole frames.
    pub dropped_frames: BTreeMap<Modality, Vec<i64>>,
    /// Per pose modality, the element indices dropped at every frame.
    pub dropped_elements: BTreeMap<Modality, Vec<usize>>,
}

impl MaskResult {
    pub fn identity(n: usize) -> Self {
        Self {
            decisions: vec![MaskDecision::Keep; n],
            realized_r_s: None,
            dropped_frames: BTreeMap::new(),
            dropped_elements: BTreeMap::new(),
        }
    }

    /// Tokens that stay in the sequence; blanked ones are flagged masked.
    pub fn apply(&self, tokens: &[Token]) -> Vec<Token> {
        tokens
            .iter()
            .zip(&self.decisions)
            .filter_map(|(t, d)| match d {
                MaskDecision::Keep => Some(*t),
                MaskDecision::Blank => Some(Token { is_masked: true, ..*t }),
                MaskDecision::Drop => None,
            })
            .collect()
    }

    pub fn count(&self, d: MaskDecision) -> usize {
        self.decisions.iter().filter(|&&x| x == d).count()
    }
}

fn maskable(t: &Token) -> bool {
    t.is_valid && !t.is_future_query && !t.is_masked
}

/// Keeps, within every block of `chunk` observation slots, only the block's
/// latest slot (slots divisible by `chunk`), simulating `max_fps / chunk`.
///
/// `chunk` must divide the observation grid length, taken as
/// `1 − earliest slot`.
pub fn sampling_mask(tokens: &[Token], chunk: usize) -> Result<MaskResult> {
    if chunk == 0 {
        return Err(Error::contract("chunk must be at least 1"));
    }
    let earliest = tokens.iter().filter(|t| !t.is_future_query).map(|t| t.slot).min().unwrap_or(0);
    let grid_len = (1 - earliest) as usize;
    if grid_len % chunk != 0 {
        return Err(Error::contract(format!(
            "chunk {chunk} does not divide the {grid_len}-slot observation grid"
        )));
    }
    let c = chunk as i64;
    let mut res = MaskResult::identity(tokens.len());
    let mut dropped: BTreeMap<Modality, Vec<i64>> = BTreeMap::new();
    for (t, d) in tokens.iter().zip(res.decisions.iter_mut()) {
        if !t.is_future_query && t.slot % c != 0 {
            *d = MaskDecision::Drop;
            dropped.entry(t.modality).or_default().push(t.slot);
        }
    }
    for v in dropped.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    res.dropped_frames = dropped;
    Ok(res)
}

/// Draws r_s uniformly from the mask's range.
pub fn draw_r_s<R: Rng>(spec: &MaskSpec, rng: &mut R) -> f64 {
    let [lo, hi] = spec.r_s_range;
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Dynamic spatial-temporal mask with a given spatial ratio.
///
/// For each pose modality, `floor(r_s · e)` of its `e` valid elements are
/// dropped at every observed frame. For each of trajectory, 3D box and 2D box,
/// `floor(r_t · t)` of its `t` observed slots are blanked.
pub fn dynamic_st_mask_with<R: Rng>(tokens: &[Token], r_s: f64, r_t: f64, rng: &mut R) -> MaskResult {
    let mut res = MaskResult::identity(tokens.len());
    res.realized_r_s = Some(r_s);
    for m in Modality::ALL {
        if m.is_pose() {
            let mut elems: Vec<usize> = tokens
                .iter()
                .filter(|t| t.modality == m && maskable(t))
                .map(|t| t.element)
                .collect();
            elems.sort_unstable();
            elems.dedup();
            let k = (r_s * elems.len() as f64 + 1e-9).floor() as usize;
            if k == 0 {
                continue;
            }
            let mut chosen: Vec<usize> = sample(rng, elems.len(), k).into_iter().map(|i| elems[i]).collect();
            chosen.sort_unstable();
            for (t, d) in tokens.iter().zip(res.decisions.iter_mut()) {
                if t.modality == m && maskable(t) && chosen.binary_search(&t.element).is_ok() {
                    *d = MaskDecision::Drop;
                }
            }
            res.dropped_elements.insert(m, chosen);
        } else {
            let mut slots: Vec<i64> = tokens
                .iter()
                .filter(|t| t.modality == m && maskable(t))
                .map(|t| t.slot)
                .collect();
            slots.sort_unstable();
            slots.dedup();
            let k = (r_t * slots.len() as f64 + 1e-9).floor() as usize;
            if k == 0 {
                continue;
            }
            let mut chosen: Vec<i64> = sample(rng, slots.len(), k).into_iter().map(|i| slots[i]).collect();
            chosen.sort_unstable();
            for (t, d) in tokens.iter().zip(res.decisions.iter_mut()) {
                if t.modality == m && maskable(t) && chosen.binary_search(&t.slot).is_ok() {
                    *d = MaskDecision::Blank;
                }
            }
            res.dropped_frames.insert(m, chosen);
        }
    }
    res
}

pub fn dynamic_st_mask<R: Rng>(tokens: &[Token], spec: &MaskSpec, rng: &mut R) -> MaskResult {
    let r_s = draw_r_s(spec, rng);
    dynamic_st_mask_with(tokens, r_s, spec.r_t, rng)
}

/// Drops exactly `floor(fixed_ratio · n)` of the `n` maskable pose tokens.
pub fn fixed_st_mask<R: Rng>(tokens: &[Token], fixed_ratio: f64, rng: &mut R) -> MaskResult {
    let mut res = MaskResult::identity(tokens.len());
    let pose: Vec<usize> = (0..tokens.len())
        .filter(|&i| tokens[i].modality.is_pose() && maskable(&tokens[i]))
        .collect();
    let k = (fixed_ratio * pose.len() as f64 + 1e-9).floor() as usize;
    for i in sample(rng, pose.len(), k) {
        res.decisions[pose[i]] = MaskDecision::Drop;
    }
    res
}

/// Per auxiliary modality, a fair coin decides whether to drop it entirely.
pub fn draw_modality_drops<R: Rng>(rng: &mut R) -> Vec<Modality> {
    Modality::ALL
        .into_iter()
        .filter(|&m| m != Modality::Traj)
        .filter(|_| rng.gen_bool(0.5))
        .collect()
}

pub fn modality_drop(tokens: &[Token], drop: &[Modality]) -> MaskResult {
    let mut res = MaskResult::identity(tokens.len());
    for (t, d) in tokens.iter().zip(res.decisions.iter_mut()) {
        if t.modality != Modality::Traj && drop.contains(&t.modality) && maskable(t) {
            *d = MaskDecision::Drop;
        }
    }
    res
}

pub fn modality_meta_mask<R: Rng>(tokens: &[Token], rng: &mut R) -> MaskResult {
    modality_drop(tokens, &draw_modality_drops(rng))
}

/// Applies the mask spec to every agent of one sample. The spatial ratio and the
/// modality coin flips are drawn once per sample and shared by all agents;
/// the sampling mask runs first.
pub fn mask_sample<R: Rng>(agents: &[Vec<Token>], spec: &MaskSpec, rng: &mut R) -> Result<Vec<Vec<Token>>> {
    let r_s = draw_r_s(spec, rng);
    let drops = draw_modality_drops(rng);
    agents
        .iter()
        .map(|toks| {
            let toks = match spec.chunk {
                Some(c) => sampling_mask(toks, c)?.apply(toks),
                None => toks.clone(),
            };
            let res = match spec.mode {
                MaskMode::None => return Ok(toks),
                MaskMode::Dynamic => dynamic_st_mask_with(&toks, r_s, spec.r_t, rng),
                MaskMode::Fixed => fixed_st_mask(&toks, spec.fixed_ratio, rng),
                MaskMode::ModalityMeta => modality_drop(&toks, &drops),
            };
            Ok(res.apply(&toks))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Fps, ModalityTensor};
    use crate::tokenizer::{append_future_queries, project, upsample_pad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj_grid() -> Vec<Token> {
        let t = ModalityTensor::new(Modality::Traj, 10, vec![1.0; 20], vec![true; 10]).unwrap();
        upsample_pad(&project(&t, 10).unwrap(), Fps::new(5.0).unwrap(), Fps::new(50.0).unwrap()).unwrap()
    }

    fn dense_grid(slots: usize) -> Vec<Token> {
        let t = ModalityTensor::new(Modality::Traj, slots, vec![1.0; 2 * slots], vec![true; slots]).unwrap();
        project(&t, slots).unwrap()
    }

    fn kept_slots(toks: &[Token], r: &MaskResult) -> Vec<i64> {
        r.apply(toks).iter().filter(|t| t.is_valid).map(|t| t.slot).collect()
    }

    #[test]
    fn chunk_ten_simulates_five_fps() {
        let g = dense_grid(100);
        let r = sampling_mask(&g, 10).unwrap();
        assert_eq!(kept_slots(&g, &r), (0..10).map(|k| -90 + 10 * k).collect::<Vec<_>>());
        let r = sampling_mask(&g, 20).unwrap();
        assert_eq!(kept_slots(&g, &r), vec![-80, -60, -40, -20, 0]);
        assert_eq!(sampling_mask(&g, 1).unwrap(), MaskResult::identity(100));
        assert!(sampling_mask(&g, 30).is_err());
        // on the padded 5 fps grid the same chunk keeps exactly the real frames
        let p = traj_grid();
        assert_eq!(sampling_mask(&p, 10).unwrap().apply(&p).len(), 10);
    }

    #[test]
    fn dynamic_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = dense_grid(10);
        let r = dynamic_st_mask_with(&t, 0.5, 0.1, &mut rng);
        assert_eq!(r.count(MaskDecision::Blank), 1);
        let spec = MaskSpec {
            r_s_range: [0.3, 0.3],
            ..MaskSpec::default()
        };
        for _ in 0..10 {
            assert_eq!(dynamic_st_mask(&t, &spec, &mut rng).realized_r_s, Some(0.3));
        }
    }

    #[test]
    fn queries_are_never_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = dense_grid(10);
        append_future_queries(&mut t, 5, 1, true, true);
        let spec = MaskSpec {
            r_t: 0.9,
            ..MaskSpec::default()
        };
        for mode in [MaskMode::Dynamic, MaskMode::Fixed, MaskMode::ModalityMeta] {
            let spec = MaskSpec { mode, ..spec.clone() };
            let out = mask_sample(&[t.clone()], &spec, &mut rng).unwrap();
            assert_eq!(out[0].iter().filter(|x| x.is_future_query).count(), 5 * 40);
        }
    }

    #[test]
    fn fixed_mask_count_is_constant() {
        let pose = ModalityTensor::new(Modality::Pose3d, 10, vec![0.0; 10 * 39 * 3], {
            let mut v = vec![false; 390];
            for t in 0..10 {
                for j in 0..22 {
                    v[t * 39 + j] = true;
                }
            }
            v
        })
        .unwrap();
        let toks = project(&pose, 10).unwrap();
        let a = fixed_st_mask(&toks, 0.25, &mut ChaCha8Rng::seed_from_u64(1));
        let b = fixed_st_mask(&toks, 0.25, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a.count(MaskDecision::Drop), 55);
        assert_eq!(b.count(MaskDecision::Drop), 55);
        assert_ne!(a.decisions, b.decisions);
        assert_eq!(fixed_st_mask(&toks, 0.0, &mut ChaCha8Rng::seed_from_u64(1)), MaskResult::identity(390));
    }

    #[test]
    fn trajectory_only_meta_mask_is_identity() {
        let t = dense_grid(10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(modality_meta_mask(&t, &mut rng), MaskResult::identity(10));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(MaskSpec::default().validate().is_ok());
        let bad = MaskSpec {
            r_s_range: [0.0, 0.5],
            ..MaskSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
