//! Canonical scene records, the unified joint vocabulary, resampling,
//! windowing, normalization, NDJSON persistence and synthetic scenes.

pub mod canonical;
pub mod scene;
pub mod synth;
pub mod transform;
pub mod vocab;

pub use canonical::{read_canonical, write_canonical, CanonicalHeader, CanonicalReader, Dataset};
pub use scene::{AgentTrack, Fps, FrameSettings, Modality, ModalityTensor, SceneRecord};
pub use synth::{synth_generate, SynthConfig};
pub use transform::{normalize_sample, resample, resample_scene, window, Anchor};
pub use vocab::{remap_joints, PoseSource, RawPose, UnifiedJointVocabulary, JOINT_COUNT};
