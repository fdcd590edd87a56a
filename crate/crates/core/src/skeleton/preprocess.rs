use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{RawSkeletonSample, SkeletonTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Settings of the frame/body normalization pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Recordings are zero-padded (or truncated) to this many frames.
    pub max_frames: usize,
    /// Frames kept by uniform sampling.
    pub sample_frames: usize,
    /// Frames kept by the central crop; the output temporal extent.
    pub crop_frames: usize,
    /// Body slots in the output; missing bodies are zero.
    pub bodies: usize,
    /// 0-based joint used as the coordinate origin.
    pub origin_joint: usize,
    /// Random offsets inside each sampling interval (augmentation only).
    pub jitter: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            max_frames: 300,
            sample_frames: 150,
            crop_frames: 128,
            bodies: 2,
            origin_joint: 1,
            jitter: false,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_frames == 0 || self.sample_frames == 0 || self.crop_frames == 0 || self.bodies == 0 {
            return Err(Error::contract("preprocess extents must be at least 1"));
        }
        if self.crop_frames > self.sample_frames {
            return Err(Error::contract(format!(
                "crop length {} exceeds sampled length {}",
                self.crop_frames, self.sample_frames
            )));
        }
        Ok(())
    }
}

/// `indices[i] = floor(i * t_in / t_target)`.
pub fn uniform_sample(t_in: usize, t_target: usize) -> Vec<usize> {
    (0..t_target).map(|i| i * t_in / t_target).collect()
}

/// Like [`uniform_sample`] but with a random position inside each
/// sampling interval: `floor((i + u_i) * t_in / t_target)`, `u_i` in `[0, 1)`.
/// Indices stay non-decreasing and below `t_in`.
pub fn uniform_sample_jittered(t_in: usize, t_target: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..t_target)
        .map(|i| {
            let u: f64 = rng.random();
            let idx = ((i as f64 + u) * t_in as f64 / t_target as f64).floor() as usize;
            idx.clamp(i * t_in / t_target, t_in - 1)
        })
        .collect()
}

/// Start and end of a central window of `t_target` frames.
pub fn center_crop(t_in: usize, t_target: usize) -> Result<(usize, usize)> {
    if t_in < t_target {
        return Err(Error::contract(format!(
            "cannot crop {t_target} frames out of {t_in}"
        )));
    }
    let start = (t_in - t_target) / 2;
    Ok((start, start + t_target))
}

/// Translates a recording so that joint `origin_joint` of the first body, in
/// the first frame where a body is present, sits at the origin. The same
/// offset is subtracted from every joint of every body in every frame.
pub fn normalize_origin(sample: &RawSkeletonSample, origin_joint: usize) -> Result<RawSkeletonSample> {
    if origin_joint >= sample.joints_per_body {
        return Err(Error::contract(format!(
            "origin joint {origin_joint} out of range for {} joints",
            sample.joints_per_body
        )));
    }
    let reference = sample
        .frames
        .iter()
        .find_map(|f| f.first())
        .ok_or_else(|| Error::contract("no body present in any frame"))?
        .joints[origin_joint];
    let mut out = sample.clone();
    for body in out.frames.iter_mut().flatten() {
        for joint in body.joints.iter_mut() {
            for k in 0..3 {
                joint[k] -= reference[k];
            }
        }
    }
    Ok(out)
}

/// Runs the full pipeline: zero-pad to `max_frames`, sample
/// `sample_frames` uniformly, crop `crop_frames` centrally, zero-pad bodies,
/// and move the origin joint of the first present body to zero.
///
/// Output shape is `(3, crop_frames, V, bodies)`. Frame and body slots with
/// no recorded data stay exactly zero; the origin offset is only applied to
/// recorded slots. If cropping removes every recorded frame the output is
/// all zeros.
pub fn preprocess(sample: &RawSkeletonSample, cfg: &PreprocessConfig) -> Result<SkeletonTensor> {
    run_pipeline(sample, cfg, uniform_sample(cfg.max_frames, cfg.sample_frames))
}

/// [`preprocess`] with jittered sampling when `cfg.jitter` is set.
pub fn preprocess_augmented(
    sample: &RawSkeletonSample,
    cfg: &PreprocessConfig,
    rng: &mut impl Rng,
) -> Result<SkeletonTensor> {
    let indices = if cfg.jitter {
        uniform_sample_jittered(cfg.max_frames, cfg.sample_frames, rng)
    } else {
        uniform_sample(cfg.max_frames, cfg.sample_frames)
    };
    run_pipeline(sample, cfg, indices)
}

fn run_pipeline(sample: &RawSkeletonSample, cfg: &PreprocessConfig, sampled: Vec<usize>) -> Result<SkeletonTensor> {
    cfg.validate()?;
    sample.validate()?;
    let v = sample.joints_per_body;
    if cfg.origin_joint >= v {
        return Err(Error::contract(format!("origin joint {} out of range for {v} joints", cfg.origin_joint)));
    }
    let (start, end) = center_crop(sampled.len(), cfg.crop_frames)?;
    let t_out = cfg.crop_frames;
    let m = cfg.bodies;

    // Frames beyond the recording (or beyond max_frames) are padding.
    let recorded = sample.frames.len().min(cfg.max_frames);
    let mut data = Tensor::zeros(&[3, t_out, v, m]);
    let mut present = vec![vec![false; m]; t_out];
    for (t, &src) in sampled[start..end].iter().enumerate() {
        if src >= recorded {
            continue;
        }
        for (b, body) in sample.frames[src].iter().take(m).enumerate() {
            present[t][b] = true;
            for (j, xyz) in body.joints.iter().enumerate() {
                for c in 0..3 {
                    data.set(&[c, t, j, b], xyz[c]);
                }
            }
        }
    }

    if let Some(t_ref) = (0..t_out).find(|&t| present[t][0]) {
        let reference: Vec<f64> = (0..3).map(|c| data.at(&[c, t_ref, cfg.origin_joint, 0])).collect();
        for (t, slots) in present.iter().enumerate() {
            for (b, &here) in slots.iter().enumerate() {
                if !here {
                    continue;
                }
                for j in 0..v {
                    for (c, r) in reference.iter().enumerate() {
                        let x = data.at(&[c, t, j, b]);
                        data.set(&[c, t, j, b], x - r);
                    }
                }
            }
        }
    }

    Ok(SkeletonTensor {
        data,
        label: sample.label,
        meta: sample.meta.clone(),
    })
}
