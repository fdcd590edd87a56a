//! Northwestern-UCLA samples as JSON:
//! `{"label": int, "camera": int, "subject": int, "frames": [[[x, y, z] x 20] x T]}`.

use serde::Deserialize;

use super::{Body, RawSkeletonSample, SampleMeta, NUCLA_JOINTS};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct NuclaJson {
    label: usize,
    camera: u32,
    subject: u32,
    frames: Vec<Vec<[f64; 3]>>,
}

/// Parses one N-UCLA JSON sample (a single body per frame).
pub fn parse_nucla_json(text: &str) -> Result<RawSkeletonSample> {
    let raw: NuclaJson = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    if raw.frames.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "sample has no frames".into(),
        });
    }
    let mut frames = Vec::with_capacity(raw.frames.len());
    for (t, joints) in raw.frames.into_iter().enumerate() {
        if joints.len() != NUCLA_JOINTS {
            return Err(Error::contract(format!(
                "frame {t}: {} joints, expected {NUCLA_JOINTS}",
                joints.len()
            )));
        }
        frames.push(vec![Body { joints }]);
    }
    Ok(RawSkeletonSample {
        frames,
        joints_per_body: NUCLA_JOINTS,
        label: raw.label,
        meta: SampleMeta {
            setup: None,
            camera: Some(raw.camera),
            subject: Some(raw.subject),
            replication: None,
        },
    })
}
