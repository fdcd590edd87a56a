//! Skeleton recordings: parsing, preprocessing into fixed-size tensors,
//! synthetic motion datasets and evaluation-protocol splits.

mod cache;
mod ntu;
mod nucla;
mod preprocess;
mod split;
mod synth;

pub use cache::{load_dataset, read_cached, save_dataset, write_cached, ManifestEntry, MANIFEST_FILE};
pub use ntu::{parse_ntu_filename, parse_ntu_skeleton, write_ntu_skeleton};
pub use nucla::parse_nucla_json;
pub use preprocess::{
    center_crop, normalize_origin, preprocess, preprocess_augmented, uniform_sample,
    uniform_sample_jittered, PreprocessConfig,
};
pub use split::{split_protocol, Protocol, XSUB_TRAIN_SUBJECTS};
pub use synth::{generate_raw, synth_dataset, Generator, SynthSpec, REST_POSE};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Joints per body in the NTU RGB+D layout.
pub const NTU_JOINTS: usize = 25;
/// Joints per body in the Northwestern-UCLA layout.
pub const NUCLA_JOINTS: usize = 20;

/// NTU joint names, 0-based.
pub const NTU_JOINT_NAMES: [&str; NTU_JOINTS] = [
    "spine_base",
    "spine_mid",
    "neck",
    "head",
    "shoulder_left",
    "elbow_left",
    "wrist_left",
    "hand_left",
    "shoulder_right",
    "elbow_right",
    "wrist_right",
    "hand_right",
    "hip_left",
    "knee_left",
    "ankle_left",
    "foot_left",
    "hip_right",
    "knee_right",
    "ankle_right",
    "foot_right",
    "spine_shoulder",
    "hand_tip_left",
    "thumb_left",
    "hand_tip_right",
    "thumb_right",
];

/// Identifiers of a recording. Unknown fields are `None`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleMeta {
    pub setup: Option<u32>,
    pub camera: Option<u32>,
    pub subject: Option<u32>,
    pub replication: Option<u32>,
}

/// One tracked body in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Body {
    pub joints: Vec<[f64; 3]>,
}

/// A recording as read from disk: a variable number of frames, each with
/// zero or more bodies.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSkeletonSample {
    pub frames: Vec<Vec<Body>>,
    pub joints_per_body: usize,
    pub label: usize,
    pub meta: SampleMeta,
}

impl RawSkeletonSample {
    /// Checks frame count and per-body joint counts.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::contract("skeleton sample has no frames"));
        }
        if self.joints_per_body != NTU_JOINTS && self.joints_per_body != NUCLA_JOINTS {
            return Err(Error::contract(format!(
                "unsupported joint layout with {} joints",
                self.joints_per_body
            )));
        }
        for (t, frame) in self.frames.iter().enumerate() {
            for body in frame {
                if body.joints.len() != self.joints_per_body {
                    return Err(Error::contract(format!(
                        "frame {t}: body has {} joints, expected {}",
                        body.joints.len(),
                        self.joints_per_body
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn max_bodies(&self) -> usize {
        self.frames.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// A preprocessed sample of shape `(3, T, V, M)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTensor {
    pub data: Tensor,
    pub label: usize,
    pub meta: SampleMeta,
}

impl SkeletonTensor {
    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn bodies(&self) -> usize {
        self.data.shape()[3]
    }
}
