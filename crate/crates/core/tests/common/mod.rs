#![allow(dead_code)]

use action_capsules::model::{batch_input, forward, loss, ActionCapsNet, ModelConfig};
use action_capsules::params::{ParamSet, ParamVars};
use action_capsules::restcn::ResTcnConfig;
use action_capsules::skeleton::{SampleMeta, SkeletonTensor};
use action_capsules::tensor::{gradient_check_report, GradCheckReport, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// V=4, M=2, N=2, D=3, P=2, r=2 on 16 frames.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        classes: 2,
        joints: 4,
        bodies: 2,
        frames: 16,
        stages: 4,
        tcn: ResTcnConfig {
            k: 3,
            channels: vec![2, 3, 3, 4],
            ..ResTcnConfig::default()
        },
        primary_dim: 2,
        capsule_dim: 3,
        routing_iters: 2,
        ..ModelConfig::default()
    }
}

pub fn sample(cfg: &ModelConfig, rng: &mut impl Rng) -> SkeletonTensor {
    SkeletonTensor {
        data: random(&[cfg.in_channels, cfg.frames, cfg.joints, cfg.bodies], rng, 1.0),
        label: 0,
        meta: SampleMeta::default(),
    }
}

/// Moves the zero-initialized biases and log priors to random values so
/// no unit sits exactly on a relu kink.
pub fn randomize_biases(params: &mut ParamSet, rng: &mut impl Rng) {
    for (name, t) in params.names().to_vec().iter().zip(params.tensors_mut()) {
        if t.rank() == 1 || name.ends_with(".b_init") {
            *t = random(t.shape(), rng, 0.1);
        }
    }
}

/// Loss of the tiny model as a function of input and all parameters.
pub fn model_gradient_report(cfg: &ModelConfig, seed: u64) -> GradCheckReport {
    let mut net = ActionCapsNet::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    randomize_biases(&mut net.params, &mut rng);
    let s = sample(cfg, &mut rng);
    let x = batch_input(&[&s], cfg).unwrap();
    let label = rng.random_range(0..cfg.classes);
    let mut inputs = vec![x];
    inputs.extend(net.params.tensors().iter().cloned());
    gradient_check_report(
        |tape, vars| {
            let bound = ParamVars::from_vars(&net.params, vars[1..].to_vec())?;
            let out = forward(tape, &bound, vars[0], cfg)?;
            loss(tape, &out, &[label], cfg)
        },
        &inputs,
        1e-5,
    )
    .unwrap()
}

/// Learning rates of epochs 0..60 for the default schedule, written out by hand.
pub const LR_TABLE: [f64; 60] = [
    0.0001, 0.0002, 0.0003, 0.0004, 0.0005, 0.0006, 0.0007, 0.0008, 0.0009, 0.001, //
    0.001, 0.001, 0.001, 0.001, 0.001, 0.001, 0.001, 0.001, 0.001, 0.001, //
    0.001, 0.001, 0.001, 0.001, 0.001, 0.001, 0.001, 0.001, 0.001, 0.001, //
    0.0001, 0.0001, 0.0001, 0.0001, 0.0001, 0.0001, 0.0001, 0.0001, 0.0001, 0.0001, //
    0.0001, 0.0001, 0.0001, 0.0001, 0.0001, 0.0001, 0.0001, 0.0001, 0.0001, 0.0001, //
    1e-05, 1e-05, 1e-05, 1e-05, 1e-05, 1e-05, 1e-05, 1e-05, 1e-05, 1e-05,
];

/// FLOPs of [`tiny_model`] tallied layer by layer. Slots 8, k 3, frames
/// 16 -> 8 -> 4 -> 2 -> 1 after pooling.
pub fn tiny_hand_tally() -> u64 {
    let tcn = 2 * 3 * 3 * 16 * 8 + 2 * 2 * 2 * 3 * 16 * 8 + 3 * 2 * 16 * 8
        + 3 * 2 * 3 * 8 * 8 + 2 * 3 * 3 * 3 * 8 * 8 + 3 * 2 * 8 * 8
        + 3 * 3 * 3 * 4 * 8 * 3
        + 4 * 3 * 3 * 2 * 8 + 2 * 4 * 4 * 3 * 2 * 8 + 4 * 3 * 2 * 8;
    // Per stage and path: projection 8 * (C * T') * 2, votes 8 * 2 * 2 * 3,
    // routing (2 + 1) * 8 * 2 * 3.
    let columns = [2 * 8, 3 * 4, 3 * 2, 4];
    let caps: usize = columns.iter().map(|c| 2 * (8 * c * 2 + 8 * 2 * 2 * 3 + 3 * 8 * 2 * 3)).sum();
    2 * (tcn + caps) as u64
}
