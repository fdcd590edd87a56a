//! Synthetic skeleton motions for desk-scale experiments.
//!
//! Each generator animates a rest-pose skeleton placed at a random position.
//! With `noise = 0` and `variation = 0` the motion parameters are exactly
//! the ones in [`SynthSpec`], which the tests recover from the generated
//! coordinates.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{preprocess, Body, PreprocessConfig, RawSkeletonSample, SampleMeta, SkeletonTensor, NTU_JOINTS};
use crate::error::{Error, Result};

/// Rest pose in the NTU joint order (meters; x right, y up, z depth).
pub const REST_POSE: [[f64; 3]; NTU_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.3, 0.0],
    [0.0, 0.6, 0.0],
    [0.0, 0.75, 0.0],
    [-0.2, 0.55, 0.0],
    [-0.25, 0.3, 0.0],
    [-0.27, 0.08, 0.0],
    [-0.28, 0.0, 0.0],
    [0.2, 0.55, 0.0],
    [0.25, 0.3, 0.0],
    [0.27, 0.08, 0.0],
    [0.28, 0.0, 0.0],
    [-0.1, -0.05, 0.0],
    [-0.1, -0.45, 0.0],
    [-0.1, -0.85, 0.0],
    [-0.1, -0.9, 0.1],
    [0.1, -0.05, 0.0],
    [0.1, -0.45, 0.0],
    [0.1, -0.85, 0.0],
    [0.1, -0.9, 0.1],
    [0.0, 0.55, 0.0],
    [-0.29, -0.08, 0.0],
    [-0.25, -0.02, 0.03],
    [0.29, -0.08, 0.0],
    [0.25, -0.02, 0.03],
];

/// Right elbow, wrist, hand, hand tip and thumb.
pub(crate) const ARM_JOINTS: [usize; 5] = [9, 10, 11, 23, 24];
/// Right knee, ankle and foot.
pub(crate) const LEG_JOINTS: [usize; 3] = [17, 18, 19];

/// Built-in motion generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Vertical sinusoidal oscillation of the right arm.
    ArmWave,
    /// Constant-velocity translation of the whole body in the floor plane.
    Translate,
    /// A second body walking towards a standing first body.
    Approach,
    /// Forward sinusoidal swing of the right leg.
    LegSwing,
}

impl Generator {
    pub const ALL: [Generator; 4] = [Generator::ArmWave, Generator::Translate, Generator::Approach, Generator::LegSwing];

    pub fn name(self) -> &'static str {
        match self {
            Generator::ArmWave => "arm-wave",
            Generator::Translate => "translate",
            Generator::Approach => "approach",
            Generator::LegSwing => "leg-swing",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Generator::ALL
            .into_iter()
            .find(|g| g.name() == name)
            .ok_or_else(|| Error::UnknownGenerator(name.to_string()))
    }
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Generator name per class; the class index is the position.
    pub classes: Vec<String>,
    pub samples_per_class: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Oscillation amplitude (m) for arm-wave and leg-swing.
    pub amplitude: f64,
    /// Oscillation periods over the whole recording.
    pub cycles: f64,
    /// Translation speed (m per frame) for translate and approach.
    pub speed: f64,
    /// Initial distance (m) of the second body in approach.
    pub approach_distance: f64,
    /// Standard deviation (m) of per-joint Gaussian noise.
    pub noise: f64,
    /// Relative per-sample spread of amplitude, cycles and speed.
    pub variation: f64,
    pub preprocess: PreprocessConfig,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: vec!["arm-wave".into(), "translate".into()],
            samples_per_class: 8,
            min_frames: 60,
            max_frames: 300,
            amplitude: 0.25,
            cycles: 3.0,
            speed: 0.004,
            approach_distance: 2.0,
            noise: 0.005,
            variation: 0.2,
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl SynthSpec {
    pub fn generators(&self) -> Result<Vec<Generator>> {
        if self.classes.len() < 2 {
            return Err(Error::contract("a synthetic dataset needs at least two classes"));
        }
        self.classes.iter().map(|c| Generator::from_name(c)).collect()
    }
}

fn jitter(rng: &mut impl Rng, spread: f64) -> f64 {
    if spread == 0.0 {
        1.0
    } else {
        1.0 + spread * rng.random_range(-1.0..=1.0)
    }
}

/// Generates one raw recording of `frames` frames (label 0, no metadata).
pub fn generate_raw(generator: Generator, spec: &SynthSpec, frames: usize, rng: &mut impl Rng) -> Result<RawSkeletonSample> {
    if frames == 0 {
        return Err(Error::contract("a recording needs at least one frame"));
    }
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::contract(e.to_string()))?;
    let base = [rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2), rng.random_range(2.0..4.0)];
    let amplitude = spec.amplitude * jitter(rng, spec.variation);
    let cycles = spec.cycles * jitter(rng, spec.variation);
    let speed = spec.speed * jitter(rng, spec.variation);
    let phase = rng.random_range(0.0..TAU);
    let heading = rng.random_range(0.0..TAU);

    let pose = |offset: [f64; 3]| -> Vec<[f64; 3]> {
        REST_POSE
            .iter()
            .map(|j| [base[0] + offset[0] + j[0], base[1] + offset[1] + j[1], base[2] + offset[2] + j[2]])
            .collect()
    };

    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let wave = amplitude * (TAU * cycles * t as f64 / frames as f64 + phase).sin();
        let mut bodies = Vec::with_capacity(2);
        match generator {
            Generator::ArmWave => {
                let mut joints = pose([0.0; 3]);
                for &j in &ARM_JOINTS {
                    joints[j][1] += wave;
                }
                bodies.push(joints);
            }
            Generator::LegSwing => {
                let mut joints = pose([0.0; 3]);
                for &j in &LEG_JOINTS {
                    joints[j][2] += wave;
                }
                bodies.push(joints);
            }
            Generator::Translate => {
                let d = speed * t as f64;
                bodies.push(pose([d * heading.cos(), 0.0, d * heading.sin()]));
            }
            Generator::Approach => {
                bodies.push(pose([0.0; 3]));
                let gap = (spec.approach_distance - speed * t as f64).max(0.5);
                bodies.push(pose([gap, 0.0, 0.0]));
            }
        }
        let frame = bodies
            .into_iter()
            .map(|mut joints| {
                if spec.noise > 0.0 {
                    for j in joints.iter_mut() {
                        for c in j.iter_mut() {
                            *c += noise.sample(rng);
                        }
                    }
                }
                Body { joints }
            })
            .collect();
        out.push(frame);
    }
    Ok(RawSkeletonSample {
        frames: out,
        joints_per_body: NTU_JOINTS,
        label: 0,
        meta: SampleMeta::default(),
    })
}

/// Generates and preprocesses a labelled dataset. Samples are interleaved
/// by class (`0, 1, .., N-1, 0, 1, ..`), so every prefix of `N * k` samples
/// is balanced. Subject ids cycle through 1..=40 and camera ids through 1..=3.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<SkeletonTensor>> {
    let generators = spec.generators()?;
    if spec.min_frames == 0 || spec.min_frames > spec.max_frames {
        return Err(Error::contract(format!(
            "invalid frame range {}..={}",
            spec.min_frames, spec.max_frames
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(generators.len() * spec.samples_per_class);
    for i in 0..spec.samples_per_class {
        for (label, &generator) in generators.iter().enumerate() {
            let frames = rng.random_range(spec.min_frames..=spec.max_frames);
            let mut raw = generate_raw(generator, spec, frames, &mut rng)?;
            let k = out.len() as u32;
            raw.label = label;
            raw.meta = SampleMeta {
                setup: Some(1),
                camera: Some(1 + k % 3),
                subject: Some(1 + k % 40),
                replication: Some(1 + i as u32),
            };
            out.push(preprocess(&raw, &spec.preprocess)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_generator() {
        let spec = SynthSpec {
            classes: vec!["arm-wave".into(), "moonwalk".into()],
            ..SynthSpec::default()
        };
        assert!(matches!(synth_dataset(&spec, 1), Err(Error::UnknownGenerator(n)) if n == "moonwalk"));
    }

    #[test]
    fn names_round_trip() {
        for g in Generator::ALL {
            assert_eq!(Generator::from_name(g.name()).unwrap(), g);
        }
    }
}
