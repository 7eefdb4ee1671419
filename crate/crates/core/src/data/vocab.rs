//! The 39-joint unified skeleton and per-dataset joint remapping.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scene::{Modality, ModalityTensor};
use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 39;

/// Datasets with a column in the joint mapping table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseSource {
    Jta,
    H36m,
    Jrdb,
    Amass,
    #[serde(rename = "3dpw")]
    ThreeDpw,
}

impl PoseSource {
    pub const ALL: [PoseSource; 5] = [
        PoseSource::Jta,
        PoseSource::H36m,
        PoseSource::Jrdb,
        PoseSource::Amass,
        PoseSource::ThreeDpw,
    ];

    fn column(self) -> usize {
        self as usize
    }

    /// Number of joints in the dataset's native skeleton.
    pub fn joint_count(self) -> usize {
        match self {
            PoseSource::Jta => 22,
            PoseSource::H36m => 32,
            PoseSource::Jrdb => 17,
            PoseSource::Amass => 22,
            PoseSource::ThreeDpw => 24,
        }
    }
}

impl fmt::Display for PoseSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoseSource::Jta => "jta",
            PoseSource::H36m => "h36m",
            PoseSource::Jrdb => "jrdb",
            PoseSource::Amass => "amass",
            PoseSource::ThreeDpw => "3dpw",
        })
    }
}

impl FromStr for PoseSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jta" => Ok(PoseSource::Jta),
            "h36m" | "human3.6m" => Ok(PoseSource::H36m),
            "jrdb" | "jrdb-pose" => Ok(PoseSource::Jrdb),
            "amass" => Ok(PoseSource::Amass),
            "3dpw" => Ok(PoseSource::ThreeDpw),
            other => Err(Error::Config(format!("unknown pose source `{other}`"))),
        }
    }
}

const N: Option<u8> = None;

const fn s(i: u8) -> Option<u8> {
    Some(i)
}

/// (unified name, [JTA, H36M, JRDB, AMASS, 3DPW] native ids).
const TABLE: [(&str, [Option<u8>; 5]); JOINT_COUNT] = [
    ("pelvis", [s(15), s(0), s(8), s(0), s(0)]),
    ("right_hip", [s(16), s(1), s(10), s(2), s(2)]),
    ("right_knee", [s(17), s(2), s(13), s(5), s(5)]),
    ("right_ankle", [s(18), s(3), s(15), s(8), s(8)]),
    ("right_foot_arch", [N, s(4), N, s(11), s(11)]),
    ("right_toes", [N, s(5), N, N, N]),
    ("left_hip", [s(19), s(6), s(11), s(1), s(1)]),
    ("left_knee", [s(20), s(7), s(14), s(4), s(4)]),
    ("left_ankle", [s(21), s(8), s(16), s(7), s(7)]),
    ("left_foot_arch", [N, s(9), N, s(10), s(10)]),
    ("left_toes", [N, s(10), N, N, N]),
    ("spine", [N, s(12), N, N, N]),
    ("thorax", [N, s(13), N, N, N]),
    ("neck", [s(2), s(14), s(4), s(12), s(12)]),
    ("head_center", [s(1), s(15), N, s(15), s(15)]),
    ("left_shoulder", [s(8), s(17), s(5), s(16), s(16)]),
    ("left_elbow", [s(9), s(18), s(7), s(18), s(18)]),
    ("left_wrist", [s(10), s(19), N, s(20), s(20)]),
    ("left_outer_thigh", [N, s(21), N, N, N]),
    ("left_hand", [N, s(22), s(12), N, s(22)]),
    ("right_shoulder", [s(4), s(25), s(3), s(17), s(17)]),
    ("right_elbow", [s(5), s(26), s(6), s(19), s(19)]),
    ("right_wrist", [s(6), s(27), N, s(21), s(21)]),
    ("right_outer_thigh", [N, s(29), N, N, N]),
    ("right_hand", [N, s(30), s(9), N, s(23)]),
    ("head_top", [s(0), N, s(0), N, N]),
    ("right_clavicle", [s(3), N, N, s(14), s(14)]),
    ("left_clavicle", [s(7), N, N, s(13), s(13)]),
    ("spine0_jta", [s(11), N, N, N, N]),
    ("spine1_jta", [s(12), N, N, N, N]),
    ("spine2_jta", [s(13), N, N, N, N]),
    ("spine3_jta", [s(14), N, N, N, N]),
    ("right_eye", [N, N, s(1), N, N]),
    ("left_eye", [N, N, s(2), N, N]),
    ("spine1_smpl", [N, N, N, s(3), s(3)]),
    ("spine2_smpl", [N, N, N, s(6), s(6)]),
    ("spine3_smpl", [N, N, N, s(9), s(9)]),
    ("nose", [N, N, N, N, N]),
    ("forehead", [N, N, N, N, N]),
];

/// Named indices into the unified skeleton.
pub mod joint {
    pub const PELVIS: usize = 0;
    pub const RIGHT_HIP: usize = 1;
    pub const RIGHT_KNEE: usize = 2;
    pub const RIGHT_ANKLE: usize = 3;
    pub const LEFT_HIP: usize = 6;
    pub const LEFT_KNEE: usize = 7;
    pub const LEFT_ANKLE: usize = 8;
    pub const NECK: usize = 13;
    pub const HEAD_CENTER: usize = 14;
    pub const LEFT_SHOULDER: usize = 15;
    pub const LEFT_ELBOW: usize = 16;
    pub const LEFT_WRIST: usize = 17;
    pub const RIGHT_SHOULDER: usize = 20;
    pub const RIGHT_ELBOW: usize = 21;
    pub const RIGHT_WRIST: usize = 22;
}

/// One row of the vocabulary.
#[derive(Clone, Copy, Debug)]
pub struct JointEntry {
    pub unified_id: usize,
    pub name: &'static str,
    old_ids: [Option<u8>; 5],
}

impl JointEntry {
    pub fn old_id(&self, source: PoseSource) -> Option<usize> {
        self.old_ids[source.column()].map(usize::from)
    }
}

/// The unified joint vocabulary.
#[derive(Clone, Copy, Debug, Default)]
pub struct UnifiedJointVocabulary;

impl UnifiedJointVocabulary {
    pub fn entries(&self) -> impl Iterator<Item = JointEntry> {
        TABLE.iter().enumerate().map(|(unified_id, (name, old_ids))| JointEntry {
            unified_id,
            name,
            old_ids: *old_ids,
        })
    }

    pub fn entry(&self, unified_id: usize) -> Option<JointEntry> {
        self.entries().nth(unified_id)
    }

    pub fn name(&self, unified_id: usize) -> Option<&'static str> {
        TABLE.get(unified_id).map(|(n, _)| *n)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        TABLE.iter().position(|(n, _)| *n == name)
    }

    /// Unified slots that `source` populates.
    pub fn valid_slots(&self, source: PoseSource) -> Vec<usize> {
        self.entries()
            .filter(|e| e.old_id(source).is_some())
            .map(|e| e.unified_id)
            .collect()
    }
}

/// A pose in a dataset's native joint layout.
#[derive(Clone, Debug)]
pub struct RawPose {
    pub frames: usize,
    pub joints: usize,
    pub features: usize,
    /// `frames × joints × features`
    pub values: Vec<f64>,
    /// `frames × joints`
    pub valid: Vec<bool>,
}

/// Maps a native-layout pose onto the unified skeleton.
///
/// `target` selects the 3D or 2D pose modality; its feature width must match
/// the raw data.
pub fn remap_joints(source: PoseSource, raw: &RawPose, target: Modality) -> Result<ModalityTensor> {
    if !target.is_pose() {
        return Err(Error::Config(format!("{target} is not a pose modality")));
    }
    if raw.features != target.features() {
        return Err(Error::Data(format!(
            "{target} needs {} features per joint, raw pose has {}",
            target.features(),
            raw.features
        )));
    }
    if raw.joints != source.joint_count() {
        return Err(Error::Data(format!(
            "{source} has {} joints, raw pose has {}",
            source.joint_count(),
            raw.joints
        )));
    }
    if raw.values.len() != raw.frames * raw.joints * raw.features || raw.valid.len() != raw.frames * raw.joints {
        return Err(Error::Data("raw pose buffer sizes do not match its shape".into()));
    }
    let f = raw.features;
    let mut out = ModalityTensor::empty(target, raw.frames);
    for entry in UnifiedJointVocabulary.entries() {
        let Some(old) = entry.old_id(source) else {
            continue;
        };
        if old >= raw.joints {
            return Err(Error::Data(format!(
                "{source} joint {old} out of range for {} raw joints",
                raw.joints
            )));
        }
        for t in 0..raw.frames {
            let slot = t * raw.joints + old;
            if raw.valid[slot] {
                out.set(t, entry.unified_id, Some(&raw.values[slot * f..(slot + 1) * f]));
            }
        }
    }
    Ok(out)
}
