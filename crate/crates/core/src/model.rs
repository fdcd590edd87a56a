//! The multi-stage action capsule network.
//!
//! Input is `[B, C, T, V * M]` where joint slot `m * V + v` holds joint `v`
//! of body `m`. Res-TCN blocks encode every slot with shared weights. Each of
//! the last `S` blocks feeds a capsule stage with two paths:
//!
//! * personalized: primary capsules of one body's `V` slots, routed to `N`
//!   action capsules; parameters are shared by all bodies;
//! * global: primary capsules of all `V * M` slots routed together. Vote
//!   matrices and initial log priors are indexed by joint and shared across
//!   body slots, so the path does not depend on which body is listed first.
//!
//! Per body, the personalized and global action capsules are concatenated
//! along the instantiation axis. A stage scores class `j` by the mean over
//! bodies of the concatenated capsule length; the final score is the sum of
//! the stage scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsule::{compute_votes, dynamic_routing_grouped, form_primary_capsules, CapsuleConfig, RoutingState};
use crate::error::{Error, Result};
use crate::params::{he_uniform, uniform, ParamSet, ParamVars};
use crate::restcn::{init_res_tcn, stage_features, BlockVars, ResTcnConfig};
use crate::skeleton::SkeletonTensor;
use crate::tensor::{Tape, Tensor, Var};

pub const MARGIN_POS: f64 = 0.9;
pub const MARGIN_NEG: f64 = 0.1;
pub const MARGIN_NEG_WEIGHT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Margin,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapsulePath {
    Personalized,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub classes: usize,
    pub joints: usize,
    pub bodies: usize,
    pub frames: usize,
    pub in_channels: usize,
    /// Number of capsule stages, attached to the last blocks.
    pub stages: usize,
    pub tcn: ResTcnConfig,
    pub primary_dim: usize,
    pub capsule_dim: usize,
    pub routing_iters: usize,
    pub alpha: f64,
    pub loss: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 60,
            joints: 25,
            bodies: 2,
            frames: 128,
            in_channels: 3,
            stages: 4,
            tcn: ResTcnConfig::default(),
            primary_dim: 8,
            capsule_dim: 16,
            routing_iters: 2,
            alpha: 0.5,
            loss: LossKind::Margin,
        }
    }
}

impl ModelConfig {
    /// Small widths for desk-scale experiments on full-size inputs.
    pub fn tiny(classes: usize) -> Self {
        ModelConfig {
            classes,
            tcn: ResTcnConfig {
                k: 3,
                channels: vec![4, 4, 8, 8],
                ..ResTcnConfig::default()
            },
            primary_dim: 4,
            capsule_dim: 4,
            ..ModelConfig::default()
        }
    }

    pub fn slots(&self) -> usize {
        self.joints * self.bodies
    }

    pub fn capsule_config(&self) -> CapsuleConfig {
        CapsuleConfig {
            primary_dim: self.primary_dim,
            capsule_dim: self.capsule_dim,
            classes: self.classes,
            routing_iters: self.routing_iters,
            alpha: self.alpha,
        }
    }

    /// Indices of the blocks that carry a capsule stage.
    pub fn stage_blocks(&self) -> std::ops::Range<usize> {
        let l = self.tcn.channels.len();
        l - self.stages.min(l)..l
    }

    pub fn validate(&self) -> Result<()> {
        self.tcn.validate()?;
        self.capsule_config().validate()?;
        if self.joints == 0 || self.bodies == 0 || self.in_channels == 0 {
            return Err(Error::contract("joints, bodies and input channels must be at least 1"));
        }
        let blocks = self.tcn.channels.len();
        if self.stages == 0 || self.stages > blocks {
            return Err(Error::contract(format!("stage count {} not in 1..={blocks}", self.stages)));
        }
        if self.tcn.stage_frames(self.frames).last().copied().unwrap_or(0) == 0 {
            return Err(Error::contract(format!(
                "{} input frames do not survive {blocks} pooling steps of {}",
                self.frames, self.tcn.pool_window
            )));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for i in 0..self.tcn.channels.len() {
            out.extend(crate::restcn::block_param_shapes(&self.tcn, i, self.tcn.block_input(i, self.in_channels)));
        }
        let frames = self.tcn.stage_frames(self.frames);
        for blk in self.stage_blocks() {
            let column = self.tcn.channels[blk] * frames[blk];
            for path in [CapsulePath::Personalized, CapsulePath::Global] {
                let p = capsule_prefix(blk, path);
                out.push((format!("{p}.proj.weight"), vec![column, self.primary_dim]));
                out.push((format!("{p}.proj.bias"), vec![self.primary_dim]));
                out.push((format!("{p}.votes"), vec![self.joints, self.classes, self.primary_dim, self.capsule_dim]));
                out.push((format!("{p}.b_init"), vec![self.joints, self.classes]));
            }
        }
        out
    }
}

pub fn capsule_prefix(block: usize, path: CapsulePath) -> String {
    match path {
        CapsulePath::Personalized => format!("caps{block}.personalized"),
        CapsulePath::Global => format!("caps{block}.global"),
    }
}

/// Fresh parameters: He-uniform convolutions and projections, vote
/// matrices uniform in `±sqrt(3 / P)`, zero biases and log priors.
pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    init_res_tcn(&mut params, &cfg.tcn, cfg.in_channels, rng)?;
    let shapes = cfg.param_shapes();
    for (name, shape) in &shapes[params.len()..] {
        let value = if name.ends_with(".proj.weight") {
            he_uniform(shape, shape[0], rng)
        } else if name.ends_with(".votes") {
            uniform(shape, (3.0 / cfg.primary_dim as f64).sqrt(), rng)
        } else {
            Tensor::zeros(shape)
        };
        params.insert(name.clone(), value)?;
    }
    Ok(params)
}

/// Stacks samples of shape `(C, T, V, M)` into `[B, C, T, V * M]` with slot
/// `m * V + v`.
pub fn batch_input(samples: &[&SkeletonTensor], cfg: &ModelConfig) -> Result<Tensor> {
    let expected = [cfg.in_channels, cfg.frames, cfg.joints, cfg.bodies];
    let (c, t, v, m) = (expected[0], expected[1], expected[2], expected[3]);
    let per = c * t * v * m;
    let mut data = Vec::with_capacity(samples.len() * per);
    for s in samples {
        if s.data.shape() != expected {
            return Err(Error::dim(
                "batch_input",
                "sample",
                format!("{expected:?}"),
                format!("{:?}", s.data.shape()),
            ));
        }
        let src = s.data.data();
        for ch in 0..c {
            for tt in 0..t {
                let base = (ch * t + tt) * v * m;
                for body in 0..m {
                    for j in 0..v {
                        data.push(src[base + j * m + body]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![samples.len(), c, t, v * m], data)
}

/// Outputs of one capsule stage.
#[derive(Clone, Debug)]
pub struct StagePrediction {
    /// Res-TCN block feeding this stage.
    pub block: usize,
    /// Concatenated capsules `[B, M, N, 2D]`.
    pub capsules: Var,
    /// Stage class scores `[B, N]`.
    pub scores: Var,
    /// One routing pass per body.
    pub personalized: Vec<RoutingState>,
    pub global: RoutingState,
}

impl StagePrediction {
    pub fn routing(&self, path: CapsulePath, body: usize) -> Option<&RoutingState> {
        match path {
            CapsulePath::Personalized => self.personalized.get(body),
            CapsulePath::Global => Some(&self.global),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Final class scores `[B, N]`.
    pub scores: Var,
    pub stages: Vec<StagePrediction>,
}

struct PathVars {
    proj_w: Var,
    proj_b: Var,
    votes: Var,
    b_init: Var,
}

impl PathVars {
    fn bind(params: &ParamVars, block: usize, path: CapsulePath) -> Result<Self> {
        let p = capsule_prefix(block, path);
        Ok(PathVars {
            proj_w: params.get(&format!("{p}.proj.weight"))?,
            proj_b: params.get(&format!("{p}.proj.bias"))?,
            votes: params.get(&format!("{p}.votes"))?,
            b_init: params.get(&format!("{p}.b_init"))?,
        })
    }
}

/// Full forward pass on `input: [B, C, T, V * M]`.
pub fn forward(tape: &mut Tape, params: &ParamVars, input: Var, cfg: &ModelConfig) -> Result<ForwardOutput> {
    cfg.validate()?;
    let expected = [cfg.in_channels, cfg.frames, cfg.slots()];
    let shape = tape.shape(input).to_vec();
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::dim("forward", "input", format!("[B, {expected:?}]"), format!("{shape:?}")));
    }
    let blocks = BlockVars::bind_all(params, &cfg.tcn)?;
    let features = stage_features(tape, input, &blocks, &cfg.tcn)?;
    let mut stages = Vec::with_capacity(cfg.stages);
    for blk in cfg.stage_blocks() {
        stages.push(capsule_stage(tape, params, features[blk], blk, cfg)?);
    }
    let scores = soft_vote(tape, &stages.iter().map(|s| s.scores).collect::<Vec<_>>())?;
    Ok(ForwardOutput { scores, stages })
}

fn capsule_stage(tape: &mut Tape, params: &ParamVars, features: Var, block: usize, cfg: &ModelConfig) -> Result<StagePrediction> {
    let caps = cfg.capsule_config();
    let (v, m, n, d) = (cfg.joints, cfg.bodies, cfg.classes, cfg.capsule_dim);
    let nb = tape.shape(features)[0];

    let glob = PathVars::bind(params, block, CapsulePath::Global)?;
    let u_glob = form_primary_capsules(tape, features, glob.proj_w, glob.proj_b)?;
    let w_tiled = tape.concat(&vec![glob.votes; m], 0)?;
    let b_tiled = tape.concat(&vec![glob.b_init; m], 0)?;
    let votes_glob = compute_votes(tape, u_glob, w_tiled)?;
    let global = dynamic_routing_grouped(tape, votes_glob, b_tiled, &caps, m)?;

    let pers = PathVars::bind(params, block, CapsulePath::Personalized)?;
    let u_pers = form_primary_capsules(tape, features, pers.proj_w, pers.proj_b)?;
    let mut personalized = Vec::with_capacity(m);
    let mut per_body = Vec::with_capacity(m);
    for body in 0..m {
        let u = tape.narrow(u_pers, 1, body * v, v)?;
        let votes = compute_votes(tape, u, pers.votes)?;
        let state = dynamic_routing_grouped(tape, votes, pers.b_init, &caps, 1)?;
        let joint = tape.concat(&[state.v, global.v], 2)?;
        per_body.push(tape.reshape(joint, &[nb, 1, n, 2 * d])?);
        personalized.push(state);
    }
    let capsules = tape.concat(&per_body, 1)?;
    let lengths = tape.norm_last(capsules)?;
    let mut total = tape.narrow(lengths, 1, 0, 1)?;
    for body in 1..m {
        let next = tape.narrow(lengths, 1, body, 1)?;
        total = tape.add(total, next)?;
    }
    let mean = tape.scale(total, 1.0 / m as f64);
    let scores = tape.reshape(mean, &[nb, n])?;
    Ok(StagePrediction {
        block,
        capsules,
        scores,
        personalized,
        global,
    })
}

/// Elementwise sum of stage scores.
pub fn soft_vote(tape: &mut Tape, stage_scores: &[Var]) -> Result<Var> {
    let (&first, rest) = stage_scores
        .split_first()
        .ok_or_else(|| Error::contract("soft voting needs at least one stage"))?;
    rest.iter().try_fold(first, |acc, &s| tape.add(acc, s))
}

fn one_hot(labels: &[usize], n: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), n]);
    for (b, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(Error::contract(format!("label {l} out of range for {n} classes")));
        }
        t.set(&[b, l], 1.0);
    }
    Ok(t)
}

/// Capsule margin loss of `scale * scores`, averaged over the batch:
/// `sum_k T_k max(0, 0.9 - x_k)^2 + 0.5 (1 - T_k) max(0, x_k - 0.1)^2`.
pub fn margin_loss(tape: &mut Tape, scores: Var, labels: &[usize], scale: f64) -> Result<Var> {
    let shape = tape.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dim("margin_loss", "B", labels.len(), format!("{shape:?}")));
    }
    let target = one_hot(labels, shape[1])?;
    let other = Tensor::new(
        target.shape().to_vec(),
        target.data().iter().map(|t| MARGIN_NEG_WEIGHT * (1.0 - t)).collect(),
    )?;
    let x = tape.scale(scores, scale);
    let neg_x = tape.scale(x, -1.0);
    let short = tape.add_scalar(neg_x, MARGIN_POS);
    let short = tape.relu(short);
    let short = tape.square(short);
    let over = tape.add_scalar(x, -MARGIN_NEG);
    let over = tape.relu(over);
    let over = tape.square(over);
    let t = tape.leaf(target);
    let o = tape.leaf(other);
    let pos = tape.mul(short, t)?;
    let neg = tape.mul(over, o)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, 1.0 / labels.len() as f64))
}

/// Training loss selected by `cfg.loss`. The margin loss sees scores divided
/// by the stage count so they stay in capsule-length range.
pub fn loss(tape: &mut Tape, out: &ForwardOutput, labels: &[usize], cfg: &ModelConfig) -> Result<Var> {
    match cfg.loss {
        LossKind::Margin => margin_loss(tape, out.scores, labels, 1.0 / cfg.stages as f64),
        LossKind::CrossEntropy => tape.cross_entropy(out.scores, labels),
    }
}

/// Index of the largest score; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = k;
        }
    }
    best
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionCapsNet {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl ActionCapsNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(ActionCapsNet { config, params })
    }

    /// Checks that parameter names and shapes match the configuration.
    pub fn check_layout(&self) -> Result<()> {
        let shapes = self.config.param_shapes();
        if shapes.len() != self.params.len() {
            return Err(Error::contract(format!(
                "expected {} parameters, found {}",
                shapes.len(),
                self.params.len()
            )));
        }
        for ((name, shape), (have, t)) in shapes.iter().zip(self.params.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(Error::contract(format!(
                    "parameter {have} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::contract(format!("parameter {name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Runs the model on a batch and returns the tape with the output handles.
    pub fn run(&self, samples: &[&SkeletonTensor]) -> Result<(Tape, ForwardOutput)> {
        let mut tape = Tape::new();
        let input = batch_input(samples, &self.config)?;
        let vars = self.params.bind(&mut tape);
        let x = tape.leaf(input);
        let out = forward(&mut tape, &vars, x, &self.config)?;
        Ok((tape, out))
    }

    /// Final scores `[B, N]`.
    pub fn scores(&self, samples: &[&SkeletonTensor]) -> Result<Tensor> {
        let (tape, out) = self.run(samples)?;
        Ok(tape.value(out.scores).clone())
    }

    pub fn predict(&self, samples: &[&SkeletonTensor]) -> Result<Vec<usize>> {
        let scores = self.scores(samples)?;
        Ok(scores.data().chunks(self.config.classes).map(argmax).collect())
    }
}
