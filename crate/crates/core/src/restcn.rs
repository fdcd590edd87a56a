//! Residual temporal convolution blocks.
//!
//! A block maps `[B, C_in, T, V]` to `[B, C_out, T / pool, V]`:
//!
//! ```text
//! h = act(conv1(x)); h = act(conv2(h)); h = conv3(h)
//! y = maxpool(act(h + proj(x)))
//! ```
//!
//! `proj` is a 1x1 convolution when channel counts differ and the identity
//! otherwise. Convolutions are same-padded and act only along time, so the
//! joint axis is never mixed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{he_uniform, ParamSet, ParamVars};
use crate::tensor::{same_padding, Tape, Tensor, Var};

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResTcnConfig {
    /// Temporal kernel size (odd).
    pub k: usize,
    /// Output width of each block.
    pub channels: Vec<usize>,
    pub pool_window: usize,
    pub activation: Activation,
    /// Per-channel batch normalization after every convolution.
    pub batch_norm: bool,
}

impl Default for ResTcnConfig {
    fn default() -> Self {
        ResTcnConfig {
            k: 9,
            channels: vec![64, 64, 128, 256],
            pool_window: 2,
            activation: Activation::Relu,
            batch_norm: false,
        }
    }
}

impl ResTcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::contract(format!("temporal kernel size {} must be odd", self.k)));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::contract("block widths must be non-empty and positive"));
        }
        if self.pool_window == 0 {
            return Err(Error::contract("pool window must be at least 1"));
        }
        Ok(())
    }

    /// Input width of block `i` given the network input width.
    pub fn block_input(&self, i: usize, in_channels: usize) -> usize {
        if i == 0 {
            in_channels
        } else {
            self.channels[i - 1]
        }
    }

    /// Temporal extent after each block for an input of `frames` frames.
    pub fn stage_frames(&self, frames: usize) -> Vec<usize> {
        let mut t = frames;
        self.channels
            .iter()
            .map(|_| {
                t /= self.pool_window;
                t
            })
            .collect()
    }
}

/// Parameter names and shapes of block `i`, in registration order.
pub fn block_param_shapes(cfg: &ResTcnConfig, i: usize, c_in: usize) -> Vec<(String, Vec<usize>)> {
    let c_out = cfg.channels[i];
    let mut out = Vec::new();
    for j in 0..3 {
        let ci = if j == 0 { c_in } else { c_out };
        out.push((format!("tcn{i}.conv{j}.weight"), vec![c_out, ci, cfg.k, 1]));
        out.push((format!("tcn{i}.conv{j}.bias"), vec![c_out]));
        if cfg.batch_norm {
            out.push((format!("tcn{i}.bn{j}.gamma"), vec![c_out]));
            out.push((format!("tcn{i}.bn{j}.beta"), vec![c_out]));
        }
    }
    if c_in != c_out {
        out.push((format!("tcn{i}.proj.weight"), vec![c_out, c_in, 1, 1]));
        out.push((format!("tcn{i}.proj.bias"), vec![c_out]));
    }
    out
}

/// Registers freshly initialized parameters for every block: He-uniform
/// convolution weights, zero biases, unit batch-norm scales.
pub fn init_res_tcn(params: &mut ParamSet, cfg: &ResTcnConfig, in_channels: usize, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    for i in 0..cfg.channels.len() {
        for (name, shape) in block_param_shapes(cfg, i, cfg.block_input(i, in_channels)) {
            let value = if name.ends_with(".weight") {
                he_uniform(&shape, shape[1] * shape[2], rng)
            } else if name.ends_with(".gamma") {
                Tensor::full(&shape, 1.0)
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, value)?;
        }
    }
    Ok(())
}

/// Tape handles of one block's parameters.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub convs: [(Var, Var); 3],
    pub norms: Option<[(Var, Var); 3]>,
    pub proj: Option<(Var, Var)>,
}

impl BlockVars {
    pub fn bind(params: &ParamVars, cfg: &ResTcnConfig, i: usize) -> Result<Self> {
        let pair = |a: String, b: String| -> Result<(Var, Var)> { Ok((params.get(&a)?, params.get(&b)?)) };
        let conv = |j: usize| pair(format!("tcn{i}.conv{j}.weight"), format!("tcn{i}.conv{j}.bias"));
        let norm = |j: usize| pair(format!("tcn{i}.bn{j}.gamma"), format!("tcn{i}.bn{j}.beta"));
        let norms = if cfg.batch_norm {
            Some([norm(0)?, norm(1)?, norm(2)?])
        } else {
            None
        };
        let proj = match params.get(&format!("tcn{i}.proj.weight")) {
            Ok(w) => Some((w, params.get(&format!("tcn{i}.proj.bias"))?)),
            Err(_) => None,
        };
        Ok(BlockVars {
            convs: [conv(0)?, conv(1)?, conv(2)?],
            norms,
            proj,
        })
    }

    pub fn bind_all(params: &ParamVars, cfg: &ResTcnConfig) -> Result<Vec<Self>> {
        (0..cfg.channels.len()).map(|i| BlockVars::bind(params, cfg, i)).collect()
    }
}

/// One residual block followed by temporal max-pooling.
pub fn res_tcn_block(tape: &mut Tape, x: Var, vars: &BlockVars, cfg: &ResTcnConfig) -> Result<Var> {
    let pad = same_padding(cfg.k);
    let mut h = x;
    for (j, &(w, b)) in vars.convs.iter().enumerate() {
        h = tape.conv_temporal(h, w, b, pad)?;
        if let Some(norms) = &vars.norms {
            let (gamma, beta) = norms[j];
            h = tape.batch_norm(h, gamma, beta, BN_EPS)?;
        }
        if j < 2 {
            h = cfg.activation.apply(tape, h);
        }
    }
    let shortcut = match vars.proj {
        Some((w, b)) => tape.conv_temporal(x, w, b, 0)?,
        None => x,
    };
    let sum = tape.add(h, shortcut)?;
    let act = cfg.activation.apply(tape, sum);
    tape.maxpool_temporal(act, cfg.pool_window)
}

/// Runs all blocks in sequence on `[B, C, T, slots]` and returns every
/// block's output.
pub fn stage_features(tape: &mut Tape, x: Var, blocks: &[BlockVars], cfg: &ResTcnConfig) -> Result<Vec<Var>> {
    let mut h = x;
    let mut out = Vec::with_capacity(blocks.len());
    for block in blocks {
        h = res_tcn_block(tape, h, block, cfg)?;
        out.push(h);
    }
    Ok(out)
}
