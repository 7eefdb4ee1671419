use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::vocab::JOINT_COUNT;
use crate::error::{Error, Result};

/// One input stream of an agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "T")]
    Traj,
    #[serde(rename = "3dB")]
    Box3d,
    #[serde(rename = "2dB")]
    Box2d,
    #[serde(rename = "3dP")]
    Pose3d,
    #[serde(rename = "2dP")]
    Pose2d,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Traj,
        Modality::Box3d,
        Modality::Box2d,
        Modality::Pose3d,
        Modality::Pose2d,
    ];

    /// Elements per frame: one point, two box corners, or the unified joints.
    pub fn elements(self) -> usize {
        match self {
            Modality::Traj => 1,
            Modality::Box3d | Modality::Box2d => 2,
            Modality::Pose3d | Modality::Pose2d => JOINT_COUNT,
        }
    }

    /// Coordinates per element.
    pub fn features(self) -> usize {
        match self {
            Modality::Traj | Modality::Box2d | Modality::Pose2d => 2,
            Modality::Box3d | Modality::Pose3d => 3,
        }
    }

    pub fn is_pose(self) -> bool {
        matches!(self, Modality::Pose3d | Modality::Pose2d)
    }

    pub fn is_image_space(self) -> bool {
        matches!(self, Modality::Box2d | Modality::Pose2d)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Modality::Traj => "T",
            Modality::Box3d => "3dB",
            Modality::Box2d => "2dB",
            Modality::Pose3d => "3dP",
            Modality::Pose2d => "2dP",
        }
    }

    /// Parses a comma-separated list such as `T,3dP`.
    pub fn parse_list(s: &str) -> Result<Vec<Modality>> {
        let mut out: Vec<Modality> = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T" | "traj" | "Traj" => Ok(Modality::Traj),
            "3dB" | "bbox3d" => Ok(Modality::Box3d),
            "2dB" | "bbox2d" => Ok(Modality::Box2d),
            "3dP" | "pose3d" => Ok(Modality::Pose3d),
            "2dP" | "pose2d" => Ok(Modality::Pose2d),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Frame rate in frames per second. Fractional rates such as 2.5 are allowed.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Fps(f64);

impl Fps {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(Error::Config(format!("fps must be positive, got {value}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Integer ratio `self / lower`, or an unsupported-rate error.
    pub fn stride_to(self, lower: Fps) -> Result<usize> {
        let ratio = self.0 / lower.0;
        let rounded = ratio.round();
        if rounded >= 1.0 && (ratio - rounded).abs() < 1e-9 {
            Ok(rounded as usize)
        } else {
            Err(Error::UnsupportedRate(format!(
                "{} fps is not an integer multiple of {} fps",
                self.0, lower.0
            )))
        }
    }
}

impl fmt::Display for Fps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for Fps {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.fract() == 0.0 && self.0 < 1e15 {
            s.serialize_u64(self.0 as u64)
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Fps {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Fps::new(v).map_err(serde::de::Error::custom)
    }
}

/// Observation/prediction horizon at a frame rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSettings {
    pub obs_seconds: f64,
    pub pred_seconds: f64,
    pub fps: Fps,
}

impl Default for FrameSettings {
    fn default() -> Self {
        Self {
            obs_seconds: 2.0,
            pred_seconds: 4.0,
            fps: Fps(5.0),
        }
    }
}

fn whole_frames(seconds: f64, fps: Fps, what: &str) -> Result<usize> {
    let frames = seconds * fps.get();
    let rounded = frames.round();
    if rounded >= 1.0 && (frames - rounded).abs() < 1e-9 {
        Ok(rounded as usize)
    } else {
        Err(Error::Config(format!(
            "{what} of {seconds} s at {fps} fps is not a positive whole number of frames"
        )))
    }
}

impl FrameSettings {
    pub fn new(obs_seconds: f64, pred_seconds: f64, fps: f64) -> Result<Self> {
        let s = Self {
            obs_seconds,
            pred_seconds,
            fps: Fps::new(fps)?,
        };
        s.t_obs()?;
        s.t_pred()?;
        Ok(s)
    }

    pub fn t_obs(&self) -> Result<usize> {
        whole_frames(self.obs_seconds, self.fps, "observation")
    }

    pub fn t_pred(&self) -> Result<usize> {
        whole_frames(self.pred_seconds, self.fps, "prediction")
    }

    pub fn window_frames(&self) -> Result<usize> {
        Ok(self.t_obs()? + self.t_pred()?)
    }
}

/// `frames × elements × features` coordinates of one modality with a
/// `frames × elements` validity mask. Invalid entries hold NaN.
#[derive(Clone, Debug)]
pub struct ModalityTensor {
    modality: Modality,
    frames: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl PartialEq for ModalityTensor {
    fn eq(&self, other: &Self) -> bool {
        // NaN sentinels compare equal to each other here.
        self.modality == other.modality
            && self.frames == other.frames
            && self.valid == other.valid
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()))
    }
}

impl ModalityTensor {
    pub fn new(modality: Modality, frames: usize, mut values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let e = modality.elements();
        let f = modality.features();
        if values.len() != frames * e * f || valid.len() != frames * e {
            return Err(Error::Data(format!(
                "{modality}: expected {frames}×{e}×{f} values, got {} values and {} flags",
                values.len(),
                valid.len()
            )));
        }
        for (slot, &ok) in valid.iter().enumerate() {
            let coords = &mut values[slot * f..(slot + 1) * f];
            if ok {
                if coords.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!(
                        "{modality}: non-finite coordinate at frame {}, element {}",
                        slot / e,
                        slot % e
                    )));
                }
            } else {
                coords.fill(f64::NAN);
            }
        }
        if matches!(modality, Modality::Box3d | Modality::Box2d) {
            for t in 0..frames {
                if valid[t * e] != valid[t * e + 1] {
                    return Err(Error::Data(format!(
                        "{modality}: box corners at frame {t} must be valid together"
                    )));
                }
            }
        }
        Ok(Self {
            modality,
            frames,
            values,
            valid,
        })
    }

    /// All entries invalid.
    pub fn empty(modality: Modality, frames: usize) -> Self {
        let e = modality.elements();
        Self {
            modality,
            frames,
            values: vec![f64::NAN; frames * e * modality.features()],
            valid: vec![false; frames * e],
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn elements(&self) -> usize {
        self.modality.elements()
    }

    pub fn features(&self) -> usize {
        self.modality.features()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, t: usize, e: usize) -> bool {
        self.valid[t * self.elements() + e]
    }

    pub fn get(&self, t: usize, e: usize) -> Option<&[f64]> {
        let slot = t * self.elements() + e;
        let f = self.features();
        self.valid[slot].then(|| &self.values[slot * f..(slot + 1) * f])
    }

    /// Writes a coordinate, or invalidates the entry with `None`.
    pub fn set(&mut self, t: usize, e: usize, coords: Option<&[f64]>) {
        let slot = t * self.elements() + e;
        let f = self.features();
        let dst = &mut self.values[slot * f..(slot + 1) * f];
        match coords {
            Some(c) if c.iter().all(|v| v.is_finite()) => {
                dst.copy_from_slice(c);
                self.valid[slot] = true;
            }
            _ => {
                dst.fill(f64::NAN);
                self.valid[slot] = false;
            }
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Whether every element of frame `t` is valid.
    pub fn frame_fully_valid(&self, t: usize) -> bool {
        let e = self.elements();
        self.valid[t * e..(t + 1) * e].iter().all(|&v| v)
    }

    pub fn select_frames(&self, indices: &[usize]) -> Self {
        let e = self.elements();
        let f = self.features();
        let mut values = Vec::with_capacity(indices.len() * e * f);
        let mut valid = Vec::with_capacity(indices.len() * e);
        for &t in indices {
            values.extend_from_slice(&self.values[t * e * f..(t + 1) * e * f]);
            valid.extend_from_slice(&self.valid[t * e..(t + 1) * e]);
        }
        Self {
            modality: self.modality,
            frames: indices.len(),
            values,
            valid,
        }
    }

    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select_frames(&idx)
    }

    /// Applies `f` to every valid coordinate tuple.
    pub fn map_valid(&mut self, mut f: impl FnMut(usize, usize, &mut [f64])) {
        let e = self.elements();
        let fw = self.features();
        for t in 0..self.frames {
            for el in 0..e {
                let slot = t * e + el;
                if self.valid[slot] {
                    f(t, el, &mut self.values[slot * fw..(slot + 1) * fw]);
                }
            }
        }
    }
}

/// Per-agent modality streams over the scene window.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrack {
    pub agent_id: String,
    pub traj: ModalityTensor,
    pub pose3d: Option<ModalityTensor>,
    pub bbox3d: Option<ModalityTensor>,
    pub bbox2d: Option<ModalityTensor>,
    pub pose2d: Option<ModalityTensor>,
    /// Image width/height for the 2D modalities.
    pub img_wh: Option<[f64; 2]>,
}

impl AgentTrack {
    pub fn new(agent_id: impl Into<String>, traj: ModalityTensor) -> Self {
        Self {
            agent_id: agent_id.into(),
            traj,
            pose3d: None,
            bbox3d: None,
            bbox2d: None,
            pose2d: None,
            img_wh: None,
        }
    }

    pub fn get(&self, m: Modality) -> Option<&ModalityTensor> {
        match m {
            Modality::Traj => Some(&self.traj),
            Modality::Pose3d => self.pose3d.as_ref(),
            Modality::Box3d => self.bbox3d.as_ref(),
            Modality::Box2d => self.bbox2d.as_ref(),
            Modality::Pose2d => self.pose2d.as_ref(),
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> Option<&mut ModalityTensor> {
        match m {
            Modality::Traj => Some(&mut self.traj),
            Modality::Pose3d => self.pose3d.as_mut(),
            Modality::Box3d => self.bbox3d.as_mut(),
            Modality::Box2d => self.bbox2d.as_mut(),
            Modality::Pose2d => self.pose2d.as_mut(),
        }
    }

    /// Installs (or with `None`, removes) an auxiliary modality. The
    /// trajectory cannot be removed.
    pub fn set(&mut self, m: Modality, tensor: Option<ModalityTensor>) {
        match m {
            Modality::Traj => {
                if let Some(t) = tensor {
                    self.traj = t;
                }
            }
            Modality::Pose3d => self.pose3d = tensor,
            Modality::Box3d => self.bbox3d = tensor,
            Modality::Box2d => self.bbox2d = tensor,
            Modality::Pose2d => self.pose2d = tensor,
        }
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL.into_iter().filter(|&m| self.get(m).is_some())
    }

    /// Keeps only the listed modalities (trajectory always stays).
    pub fn restrict(&mut self, keep: &[Modality]) {
        for m in Modality::ALL {
            if m != Modality::Traj && !keep.contains(&m) {
                self.set(m, None);
            }
        }
    }

    pub fn map_tensors(&self, f: impl Fn(&ModalityTensor) -> ModalityTensor) -> Self {
        Self {
            agent_id: self.agent_id.clone(),
            traj: f(&self.traj),
            pose3d: self.pose3d.as_ref().map(&f),
            bbox3d: self.bbox3d.as_ref().map(&f),
            bbox2d: self.bbox2d.as_ref().map(&f),
            pose2d: self.pose2d.as_ref().map(&f),
            img_wh: self.img_wh,
        }
    }
}

/// One multi-agent scene: the unit of the canonical file format.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub scene_id: String,
    pub fps: Fps,
    pub t_obs: usize,
    pub t_pred: usize,
    pub agents: Vec<AgentTrack>,
}

impl SceneRecord {
    pub fn frames(&self) -> usize {
        self.t_obs + self.t_pred
    }

    /// Checks that every tensor spans the scene and carries the right modality.
    pub fn validate(&self) -> Result<()> {
        let frames = self.frames();
        for (i, agent) in self.agents.iter().enumerate() {
            for m in Modality::ALL {
                if let Some(t) = agent.get(m) {
                    if t.modality() != m {
                        return Err(Error::Data(format!(
                            "agent {i}: slot {m} holds a {} tensor",
                            t.modality()
                        )));
                    }
                    if t.frames() != frames {
                        return Err(Error::Data(format!(
                            "agent {i}: {m} has {} frames, scene has {frames}",
                            t.frames()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Agents whose trajectory is valid on every frame of the window.
    pub fn ego_candidates(&self) -> Vec<usize> {
        self.agents
            .iter()
            .enumerate()
            .filter(|(_, a)| (0..self.frames()).all(|t| a.traj.is_valid(t, 0)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_modality(&self, m: Modality) -> bool {
        self.agents.iter().any(|a| a.get(m).is_some())
    }
}
