//! Closed-form operation counts for one input sample.
//!
//! Convolutions (including shortcut projections), primary-capsule
//! projections, vote products and the routing contractions (weighted vote
//! sums every iteration, agreements on all but the last) are counted as two
//! FLOPs per multiply-add. Activations, pooling, squashing, softmax and
//! normalization are not counted.

use std::fmt;

use crate::error::Result;
use crate::model::{capsule_prefix, CapsulePath, ModelConfig};

/// Published totals for the NTU configuration: table and prose values.
pub const REPORTED_NTU_GFLOPS: [f64; 2] = [3.48, 3.84];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    pub name: String,
    pub macs: u64,
}

impl LayerFlops {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
}

impl FlopReport {
    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(LayerFlops::flops).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops() as f64 / 1e9
    }
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>16}", "layer", "flops")?;
        for l in &self.layers {
            writeln!(f, "{:<width$}  {:>16}", l.name, l.flops())?;
        }
        write!(f, "{:<width$}  {:>16}  ({:.4} GFLOPs)", "total", self.total_flops(), self.gflops())
    }
}

/// Multiply-adds of a same-padded `k x 1` convolution.
pub fn conv_macs(c_in: usize, c_out: usize, k: usize, frames: usize, slots: usize) -> u64 {
    (c_in * c_out * k * frames * slots) as u64
}

pub fn flop_count(cfg: &ModelConfig) -> Result<FlopReport> {
    cfg.validate()?;
    let tcn = &cfg.tcn;
    let slots = cfg.slots();
    let mut layers = Vec::new();
    let mut push = |name: String, macs: u64| layers.push(LayerFlops { name, macs });

    let mut frames = cfg.frames;
    let mut stage_frames = Vec::new();
    for (i, &c_out) in tcn.channels.iter().enumerate() {
        let c_in = tcn.block_input(i, cfg.in_channels);
        push(format!("tcn{i}.conv0"), conv_macs(c_in, c_out, tcn.k, frames, slots));
        push(format!("tcn{i}.conv1"), conv_macs(c_out, c_out, tcn.k, frames, slots));
        push(format!("tcn{i}.conv2"), conv_macs(c_out, c_out, tcn.k, frames, slots));
        if c_in != c_out {
            push(format!("tcn{i}.proj"), conv_macs(c_in, c_out, 1, frames, slots));
        }
        frames /= tcn.pool_window;
        stage_frames.push(frames);
    }

    let (n, p, d, r) = (cfg.classes, cfg.primary_dim, cfg.capsule_dim, cfg.routing_iters);
    for blk in cfg.stage_blocks() {
        let column = tcn.channels[blk] * stage_frames[blk];
        // Both paths see every slot once: the global path all together, the
        // personalized path one body at a time.
        for path in [CapsulePath::Personalized, CapsulePath::Global] {
            let prefix = capsule_prefix(blk, path);
            push(format!("{prefix}.proj"), (slots * column * p) as u64);
            push(format!("{prefix}.votes"), (slots * n * p * d) as u64);
            push(format!("{prefix}.routing"), ((2 * r - 1) * slots * n * d) as u64);
        }
    }
    Ok(FlopReport { layers })
}
