//! Primary capsules, votes and dynamic routing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsuleConfig {
    /// Primary-capsule dimension `P`.
    pub primary_dim: usize,
    /// Action-capsule dimension `D`.
    pub capsule_dim: usize,
    /// Number of action classes `N`.
    pub classes: usize,
    /// Routing iterations `r`.
    pub routing_iters: usize,
    /// Step size of the log-prior update.
    pub alpha: f64,
}

impl Default for CapsuleConfig {
    fn default() -> Self {
        CapsuleConfig {
            primary_dim: 8,
            capsule_dim: 16,
            classes: 2,
            routing_iters: 2,
            alpha: 0.5,
        }
    }
}

impl CapsuleConfig {
    /// Checks extents and `r >= 1`. `alpha = 0` is accepted so that the
    /// update can be switched off for analysis.
    pub fn validate(&self) -> Result<()> {
        if self.primary_dim == 0 || self.capsule_dim == 0 || self.classes == 0 {
            return Err(Error::contract("capsule dimensions and class count must be at least 1"));
        }
        if self.routing_iters == 0 {
            return Err(Error::contract("routing needs at least one iteration"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::contract(format!("routing step {} not in [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Values of one routing iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingSnapshot {
    /// Log priors used by this iteration, `[B, V', N]`.
    pub b: Tensor,
    /// Coupling coefficients, `[B, V', N]`.
    pub c: Tensor,
    /// Action capsules, `[B, N, D]`.
    pub v: Tensor,
}

/// Handles of a routing pass plus per-iteration snapshots.
#[derive(Clone, Debug)]
pub struct RoutingState {
    /// Votes `[B, V', N, D]`.
    pub u_hat: Var,
    /// Log priors of the last iteration.
    pub b: Var,
    /// Coupling coefficients of the last iteration.
    pub c: Var,
    /// Output action capsules `[B, N, D]`.
    pub v: Var,
    /// One entry per iteration.
    pub trace: Vec<RoutingSnapshot>,
}

/// One primary capsule per joint slot: each `C x T'` feature column of
/// `[B, C, T', V']` is flattened (channel-major), mapped to `P` dimensions by
/// `w: [C * T', P]`, `bias: [P]`, and squashed. Output `[B, V', P]`.
pub fn form_primary_capsules(tape: &mut Tape, features: Var, w: Var, bias: Var) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 4 {
        return Err(Error::dim("form_primary_capsules", "rank", 4, shape.len()));
    }
    let [nb, c, t, v] = [shape[0], shape[1], shape[2], shape[3]];
    let cols = tape.permute(features, &[0, 3, 1, 2])?;
    let flat = tape.reshape(cols, &[nb, v, c * t])?;
    let proj = tape.linear(flat, w, bias)?;
    tape.squash(proj)
}

/// Votes `u_hat[b,i,j,:] = u[b,i,:] . W[i,j,:,:]`.
pub fn compute_votes(tape: &mut Tape, u: Var, w: Var) -> Result<Var> {
    tape.votes(u, w)
}

/// Dynamic routing with a learned initial log prior `b_init: [V', N]`.
pub fn dynamic_routing(tape: &mut Tape, u_hat: Var, b_init: Var, cfg: &CapsuleConfig) -> Result<RoutingState> {
    dynamic_routing_grouped(tape, u_hat, b_init, cfg, 1)
}

/// [`dynamic_routing`] with the vote sum taken over `groups` contiguous
/// blocks of primary capsules (see [`Tape::weighted_vote_sum`]).
pub fn dynamic_routing_grouped(
    tape: &mut Tape,
    u_hat: Var,
    b_init: Var,
    cfg: &CapsuleConfig,
    groups: usize,
) -> Result<RoutingState> {
    cfg.validate()?;
    let shape = tape.shape(u_hat).to_vec();
    if shape.len() != 4 {
        return Err(Error::dim("dynamic_routing", "rank", 4, shape.len()));
    }
    if tape.shape(b_init) != [shape[1], shape[2]] {
        return Err(Error::dim(
            "dynamic_routing",
            "b_init",
            format!("{:?}", [shape[1], shape[2]]),
            format!("{:?}", tape.shape(b_init)),
        ));
    }
    let mut b = tape.broadcast_batch(b_init, shape[0]);
    let mut trace = Vec::with_capacity(cfg.routing_iters);
    let mut last = None;
    for it in 0..cfg.routing_iters {
        let c = tape.softmax(b, 2)?;
        let s = tape.weighted_vote_sum(c, u_hat, groups)?;
        let v = tape.squash(s)?;
        trace.push(RoutingSnapshot {
            b: tape.value(b).clone(),
            c: tape.value(c).clone(),
            v: tape.value(v).clone(),
        });
        last = Some((b, c, v));
        if it + 1 < cfg.routing_iters {
            let a = tape.agreement(u_hat, v)?;
            let step = tape.scale(a, cfg.alpha);
            b = tape.add(b, step)?;
        }
    }
    let (b, c, v) = last.expect("at least one iteration");
    Ok(RoutingState { u_hat, b, c, v, trace })
}

/// Euclidean norm of every capsule, `[B, N, D] -> [B, N]`.
pub fn capsule_lengths(tape: &mut Tape, v: Var) -> Result<Var> {
    tape.norm_last(v)
}
