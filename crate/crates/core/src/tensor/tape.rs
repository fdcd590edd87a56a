use super::{strides_of, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    ConvTemporal { x: Var, w: Var, b: Var, padding: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Squash { x: Var },
    Softmax { x: Var, axis: usize },
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    Relu { x: Var },
    Square { x: Var },
    Sum { x: Var },
    NormLast { x: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    BroadcastBatch { x: Var },
    Votes { u: Var, w: Var },
    WeightedSum { c: Var, u_hat: Var },
    Agreement { u_hat: Var, v: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { x: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is single-threaded and append-only. Build one per forward pass,
/// call [`Tape::backward`] once, then drop it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(op, "rank", rank, t.rank()));
    }
    Ok(())
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            "*",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

/// `sqrt(n2) / (1 + n2)`: the factor mapping `s` to `squash(s)` given `n2 = |s|^2`.
fn squash_factor(n2: f64) -> f64 {
    n2.sqrt() / (1.0 + n2)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Which side of every relu and which window entry of every max-pool
    /// the recorded forward pass took. Two passes with equal patterns lie on
    /// the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => out.extend(self.value(*x).data().iter().map(|&a| usize::from(a > 0.0))),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Temporal convolution with a `k x 1` kernel.
    ///
    /// `x: [B, C_in, T, V]`, `w: [C_out, C_in, k, 1]`, `bias: [C_out]`.
    /// The output has `T + 2 * padding - k + 1` frames. Weights are shared
    /// across all `V` joint slots.
    pub fn conv_temporal(&mut self, x: Var, w: Var, bias: Var, padding: usize) -> Result<Var> {
        const OP: &str = "conv_temporal";
        let xt = self.value(x);
        let wt = self.value(w);
        let bt = self.value(bias);
        check_rank(OP, xt, 4)?;
        check_rank(OP, wt, 4)?;
        let [nb, ci, t, v] = [xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]];
        let [co, wci, k, kw] = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
        if wci != ci {
            return Err(Error::dim(OP, "C_in", ci, wci));
        }
        if kw != 1 {
            return Err(Error::dim(OP, "kernel width", 1, kw));
        }
        if k == 0 {
            return Err(Error::dim(OP, "k", ">= 1", 0));
        }
        if bt.shape() != [co] {
            return Err(Error::dim(OP, "C_out (bias)", co, format!("{:?}", bt.shape())));
        }
        if t + 2 * padding < k {
            return Err(Error::dim(OP, "T", format!(">= {}", k - 2 * padding), t));
        }
        let t_out = t + 2 * padding + 1 - k;
        let mut out = vec![0.0; nb * co * t_out * v];
        let (xd, wd, bd) = (xt.data(), wt.data(), bt.data());
        for b in 0..nb {
            for o in 0..co {
                let ybase = (b * co + o) * t_out * v;
                out[ybase..ybase + t_out * v].fill(bd[o]);
                for i in 0..ci {
                    let xbase = (b * ci + i) * t * v;
                    for j in 0..k {
                        let wv = wd[(o * ci + i) * k + j];
                        for to in 0..t_out {
                            let src = to + j;
                            if src < padding || src - padding >= t {
                                continue;
                            }
                            let xs = xbase + (src - padding) * v;
                            let ys = ybase + to * v;
                            for (y, xv) in out[ys..ys + v].iter_mut().zip(&xd[xs..xs + v]) {
                                *y += wv * xv;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![nb, co, t_out, v], out)?;
        Ok(self.push(value, Op::ConvTemporal { x, w, b: bias, padding }))
    }

    /// Non-overlapping temporal max-pool over `[B, C, T, V]`.
    ///
    /// Trailing frames that do not fill a window are dropped. Ties go to
    /// the first frame of the window.
    pub fn maxpool_temporal(&mut self, x: Var, window: usize) -> Result<Var> {
        const OP: &str = "maxpool_temporal";
        let xt = self.value(x);
        check_rank(OP, xt, 4)?;
        if window == 0 {
            return Err(Error::dim(OP, "window", ">= 1", 0));
        }
        let [nb, c, t, v] = [xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]];
        if t < window {
            return Err(Error::dim(OP, "T", format!(">= {window}"), t));
        }
        let t_out = t / window;
        let xd = xt.data();
        let mut out = Vec::with_capacity(nb * c * t_out * v);
        let mut argmax = Vec::with_capacity(nb * c * t_out * v);
        for bc in 0..nb * c {
            for to in 0..t_out {
                for j in 0..v {
                    let mut best = bc * t * v + to * window * v + j;
                    for w in 1..window {
                        let idx = bc * t * v + (to * window + w) * v + j;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![nb, c, t_out, v], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    /// `squash(s) = |s|^2 / (1 + |s|^2) * s / |s|` over the last axis.
    /// The zero vector maps to zero with zero gradient.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() == 0 {
            return Err(Error::dim("squash", "rank", ">= 1", 0));
        }
        let d = *xt.shape().last().unwrap();
        let mut out = xt.data().to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let n2: f64 = row.iter().map(|a| a * a).sum();
                if n2 == 0.0 {
                    row.fill(0.0);
                    continue;
                }
                let f = squash_factor(n2);
                row.iter_mut().for_each(|a| *a *= f);
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Squash { x }))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis >= xt.rank() {
            return Err(Error::dim("softmax", "axis", format!("< {}", xt.rank()), axis));
        }
        let (outer, n, inner) = split_axis(xt.shape(), axis);
        let xd = xt.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (xd[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[at(k)] /= total;
                }
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    /// Affine map over the last axis: `x: [..., P]`, `w: [P, Q]`, `b: [Q]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "linear";
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        check_rank(OP, wt, 2)?;
        if xt.rank() == 0 {
            return Err(Error::dim(OP, "rank", ">= 1", 0));
        }
        let (p, q) = (wt.shape()[0], wt.shape()[1]);
        let last = xt.rank() - 1;
        if xt.shape()[last] != p {
            return Err(Error::dim(OP, format!("{last} (inner)"), p, xt.shape()[last]));
        }
        if bt.shape() != [q] {
            return Err(Error::dim(OP, "bias", q, format!("{:?}", bt.shape())));
        }
        let rows = xt.len() / p.max(1);
        let (xd, wd, bd) = (xt.data(), wt.data(), bt.data());
        let mut out = vec![0.0; rows * q];
        for r in 0..rows {
            let y = &mut out[r * q..(r + 1) * q];
            y.copy_from_slice(bd);
            for k in 0..p {
                let xv = xd[r * p + k];
                for (yv, wv) in y.iter_mut().zip(&wd[k * q..(k + 1) * q]) {
                    *yv += xv * wv;
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        shape[last] = q;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    fn elementwise(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (at, bt) = (self.value(a), self.value(b));
        check_same_shape(op, at, bt)?;
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(at.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product of equally shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|a| a * factor).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).unwrap();
        self.push(value, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|a| a + c).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).unwrap();
        self.push(value, Op::AddScalar { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|a| a.max(0.0)).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).unwrap();
        self.push(value, Op::Relu { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|a| a * a).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).unwrap();
        self.push(value, Op::Square { x })
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x })
    }

    /// Euclidean norm over the last axis; the axis is removed.
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() == 0 {
            return Err(Error::dim("norm_last", "rank", ">= 1", 0));
        }
        let d = *xt.shape().last().unwrap();
        let shape = xt.shape()[..xt.rank() - 1].to_vec();
        let data = if d == 0 {
            vec![0.0; shape.iter().product()]
        } else {
            xt.data()
                .chunks(d)
                .map(|row| row.iter().map(|a| a * a).sum::<f64>().sqrt())
                .collect()
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::NormLast { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        let rank = xt.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", "perm", format!("permutation of 0..{rank}"), format!("{perm:?}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| xt.shape()[p]).collect();
        let map = permute_map(xt.shape(), perm);
        let xd = xt.data();
        let data = map.iter().map(|&src| xd[src]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis >= xt.rank() {
            return Err(Error::dim("narrow", "axis", format!("< {}", xt.rank()), axis));
        }
        let (outer, n, inner) = split_axis(xt.shape(), axis);
        if start + len > n {
            return Err(Error::dim("narrow", axis, format!(">= {}", start + len), n));
        }
        let xd = xt.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = xt.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }))
    }

    /// Joins values along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let first = inputs.first().ok_or_else(|| Error::contract("concat of zero inputs"))?;
        let base_shape = self.value(*first).shape().to_vec();
        if axis >= base_shape.len() {
            return Err(Error::dim(OP, "axis", format!("< {}", base_shape.len()), axis));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != base_shape.len() {
                return Err(Error::dim(OP, "rank", base_shape.len(), s.len()));
            }
            for (ax, (&a, &b)) in base_shape.iter().zip(s).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::dim(OP, ax, a, b));
                }
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Repeats `x` along a new leading batch axis.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Var {
        let xt = self.value(x);
        let mut shape = vec![batch];
        shape.extend_from_slice(xt.shape());
        let data = xt.data().repeat(batch);
        let value = Tensor::new(shape, data).unwrap();
        self.push(value, Op::BroadcastBatch { x })
    }

    /// Capsule votes `u_hat[b,i,j,:] = u[b,i,:] . W[i,j,:,:]`.
    ///
    /// `u: [B, V', P]`, `w: [V', N, P, D]`, output `[B, V', N, D]`.
    pub fn votes(&mut self, u: Var, w: Var) -> Result<Var> {
        const OP: &str = "votes";
        let (ut, wt) = (self.value(u), self.value(w));
        check_rank(OP, ut, 3)?;
        check_rank(OP, wt, 4)?;
        let [nb, nv, p] = [ut.shape()[0], ut.shape()[1], ut.shape()[2]];
        let [wv, n, wp, d] = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
        if wv != nv {
            return Err(Error::dim(OP, "V' (primary capsules)", nv, wv));
        }
        if wp != p {
            return Err(Error::dim(OP, "P (primary dimension)", p, wp));
        }
        let (ud, wd) = (ut.data(), wt.data());
        let mut out = vec![0.0; nb * nv * n * d];
        for b in 0..nb {
            for i in 0..nv {
                let urow = &ud[(b * nv + i) * p..(b * nv + i + 1) * p];
                for j in 0..n {
                    let o = ((b * nv + i) * n + j) * d;
                    let y = &mut out[o..o + d];
                    for (k, uv) in urow.iter().enumerate() {
                        let ws = ((i * n + j) * p + k) * d;
                        for (yv, wv) in y.iter_mut().zip(&wd[ws..ws + d]) {
                            *yv += uv * wv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![nb, nv, n, d], out)?;
        Ok(self.push(value, Op::Votes { u, w }))
    }

    /// `s[b,j,:] = sum_i c[b,i,j] * u_hat[b,i,j,:]`.
    ///
    /// The primary-capsule axis is split into `groups` equal contiguous
    /// blocks; each block is summed in order and the block sums are then
    /// added in order.
    pub fn weighted_vote_sum(&mut self, c: Var, u_hat: Var, groups: usize) -> Result<Var> {
        const OP: &str = "weighted_vote_sum";
        let (ct, ut) = (self.value(c), self.value(u_hat));
        check_rank(OP, ct, 3)?;
        check_rank(OP, ut, 4)?;
        let [nb, nv, n, d] = [ut.shape()[0], ut.shape()[1], ut.shape()[2], ut.shape()[3]];
        if ct.shape() != [nb, nv, n] {
            return Err(Error::dim(OP, "coupling", format!("{:?}", [nb, nv, n]), format!("{:?}", ct.shape())));
        }
        if groups == 0 || nv % groups != 0 {
            return Err(Error::dim(OP, "groups", format!("divisor of {nv}"), groups));
        }
        let per = nv / groups;
        let (cd, ud) = (ct.data(), ut.data());
        let mut out = vec![0.0; nb * n * d];
        let mut partial = vec![0.0; d];
        for b in 0..nb {
            for j in 0..n {
                let y = &mut out[(b * n + j) * d..(b * n + j + 1) * d];
                for g in 0..groups {
                    partial.fill(0.0);
                    for i in g * per..(g + 1) * per {
                        let cv = cd[(b * nv + i) * n + j];
                        let us = ((b * nv + i) * n + j) * d;
                        for (pv, uv) in partial.iter_mut().zip(&ud[us..us + d]) {
                            *pv += cv * uv;
                        }
                    }
                    if g == 0 {
                        y.copy_from_slice(&partial);
                    } else {
                        y.iter_mut().zip(&partial).for_each(|(a, p)| *a += p);
                    }
                }
            }
        }
        let value = Tensor::new(vec![nb, n, d], out)?;
        Ok(self.push(value, Op::WeightedSum { c, u_hat }))
    }

    /// Routing agreement `a[b,i,j] = <u_hat[b,i,j,:], v[b,j,:]>`.
    pub fn agreement(&mut self, u_hat: Var, v: Var) -> Result<Var> {
        const OP: &str = "agreement";
        let (ut, vt) = (self.value(u_hat), self.value(v));
        check_rank(OP, ut, 4)?;
        let [nb, nv, n, d] = [ut.shape()[0], ut.shape()[1], ut.shape()[2], ut.shape()[3]];
        if vt.shape() != [nb, n, d] {
            return Err(Error::dim(OP, "v", format!("{:?}", [nb, n, d]), format!("{:?}", vt.shape())));
        }
        let (ud, vd) = (ut.data(), vt.data());
        let mut out = vec![0.0; nb * nv * n];
        for b in 0..nb {
            for i in 0..nv {
                for j in 0..n {
                    let us = ((b * nv + i) * n + j) * d;
                    let vs = (b * n + j) * d;
                    out[(b * nv + i) * n + j] =
                        ud[us..us + d].iter().zip(&vd[vs..vs + d]).map(|(a, b)| a * b).sum();
                }
            }
        }
        let value = Tensor::new(vec![nb, nv, n], out)?;
        Ok(self.push(value, Op::Agreement { u_hat, v }))
    }

    /// Per-channel normalization of `[B, C, T, V]` with batch statistics,
    /// followed by a per-channel affine map.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        const OP: &str = "batch_norm";
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        check_rank(OP, xt, 4)?;
        let [nb, c, t, v] = [xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]];
        if gt.shape() != [c] || bt.shape() != [c] {
            return Err(Error::dim(OP, "C", c, format!("{:?}/{:?}", gt.shape(), bt.shape())));
        }
        let plane = t * v;
        let m = (nb * plane) as f64;
        let xd = xt.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            let blocks = (0..nb).map(|b| (b * c + ch) * plane);
            let mean = blocks.clone().map(|s| xd[s..s + plane].iter().sum::<f64>()).sum::<f64>() / m;
            let var = blocks
                .clone()
                .map(|s| xd[s..s + plane].iter().map(|a| (a - mean) * (a - mean)).sum::<f64>())
                .sum::<f64>()
                / m;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for s in blocks {
                for k in s..s + plane {
                    xhat[k] = (xd[k] - mean) * is;
                    out[k] = gt.data()[ch] * xhat[k] + bt.data()[ch];
                }
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Mean softmax cross-entropy of `[B, N]` scores against class labels.
    pub fn cross_entropy(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let xt = self.value(x);
        check_rank(OP, xt, 2)?;
        let (nb, n) = (xt.shape()[0], xt.shape()[1]);
        if labels.len() != nb {
            return Err(Error::dim(OP, "B (labels)", nb, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::contract(format!("label {bad} out of range for {n} classes")));
        }
        let mut probs = vec![0.0; nb * n];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &xt.data()[b * n..(b + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|a| (a - max).exp()).sum();
            for k in 0..n {
                probs[b * n + k] = (row[k] - max).exp() / total;
            }
            loss += total.ln() + max - row[label];
        }
        let value = Tensor::scalar(loss / nb as f64);
        Ok(self.push(value, Op::CrossEntropy { x, labels: labels.to_vec(), probs }))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::ConvTemporal { x, w, b, padding } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let [nb, ci, t, v] = [xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]];
                let [co, _, k, _] = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
                let t_out = node.value.shape()[2];
                let (xd, wd) = (xt.data(), wt.data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut gb = vec![0.0; co];
                for bi in 0..nb {
                    for o in 0..co {
                        let ybase = (bi * co + o) * t_out * v;
                        gb[o] += g[ybase..ybase + t_out * v].iter().sum::<f64>();
                        for i in 0..ci {
                            let xbase = (bi * ci + i) * t * v;
                            for j in 0..k {
                                let widx = (o * ci + i) * k + j;
                                let wv = wd[widx];
                                let mut gwv = 0.0;
                                for to in 0..t_out {
                                    let src = to + j;
                                    if src < *padding || src - padding >= t {
                                        continue;
                                    }
                                    let xs = xbase + (src - padding) * v;
                                    let gs = ybase + to * v;
                                    let gy = &g[gs..gs + v];
                                    gwv += gy.iter().zip(&xd[xs..xs + v]).map(|(a, b)| a * b).sum::<f64>();
                                    for (gxv, gyv) in gx[xs..xs + v].iter_mut().zip(gy) {
                                        *gxv += wv * gyv;
                                    }
                                }
                                gw[widx] += gwv;
                            }
                        }
                    }
                }
                add_into(&mut acc, *x, &gx);
                add_into(&mut acc, *w, &gw);
                add_into(&mut acc, *b, &gb);
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |gx| {
                for (gv, &src) in g.iter().zip(argmax) {
                    gx[src] += gv;
                }
            }),
            Op::Squash { x } => {
                let xt = self.value(*x);
                let d = *xt.shape().last().unwrap();
                if d == 0 {
                    return;
                }
                acc(*x, &mut |gx| {
                    for ((s, gy), gxr) in xt.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                        let n2: f64 = s.iter().map(|a| a * a).sum();
                        if n2 == 0.0 {
                            continue;
                        }
                        let f = squash_factor(n2);
                        let df = (1.0 - n2) / (2.0 * n2.sqrt() * (1.0 + n2) * (1.0 + n2));
                        let sg: f64 = s.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            gxr[k] += f * gy[k] + 2.0 * df * sg * s[k];
                        }
                    }
                })
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                })
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (p, q) = (wt.shape()[0], wt.shape()[1]);
                let rows = if p == 0 { 0 } else { xt.len() / p };
                let (xd, wd) = (xt.data(), wt.data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut gb = vec![0.0; q];
                for r in 0..rows {
                    let gy = &g[r * q..(r + 1) * q];
                    gb.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
                    for k in 0..p {
                        let wrow = &wd[k * q..(k + 1) * q];
                        gx[r * p + k] = gy.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        let xv = xd[r * p + k];
                        for (gwv, gyv) in gw[k * q..(k + 1) * q].iter_mut().zip(gy) {
                            *gwv += xv * gyv;
                        }
                    }
                }
                add_into(&mut acc, *x, &gx);
                add_into(&mut acc, *w, &gw);
                add_into(&mut acc, *b, &gb);
            }
            Op::Add(a, b) => {
                add_into(&mut acc, *a, g);
                add_into(&mut acc, *b, g);
            }
            Op::Sub(a, b) => {
                add_into(&mut acc, *a, g);
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(s, v)| *s -= v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(bd).for_each(|((s, v), o)| *s += v * o));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).zip(ad).for_each(|((s, v), o)| *s += v * o));
            }
            Op::Scale { x, factor } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(s, v)| *s += v * factor))
            }
            Op::AddScalar { x } | Op::Reshape { x } => add_into(&mut acc, *x, g),
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for ((s, v), xv) in gx.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *s += v;
                        }
                    }
                })
            }
            Op::Square { x } => {
                let xd = self.value(*x).data();
                acc(*x, &mut |gx| gx.iter_mut().zip(g).zip(xd).for_each(|((s, v), xv)| *s += 2.0 * xv * v))
            }
            Op::Sum { x } => acc(*x, &mut |gx| gx.iter_mut().for_each(|s| *s += g[0])),
            Op::NormLast { x } => {
                let xt = self.value(*x);
                let d = *xt.shape().last().unwrap();
                if d == 0 {
                    return;
                }
                acc(*x, &mut |gx| {
                    for (((row, gr), n), gv) in xt.data().chunks(d).zip(gx.chunks_mut(d)).zip(y).zip(g) {
                        if *n == 0.0 {
                            continue;
                        }
                        for (s, a) in gr.iter_mut().zip(row) {
                            *s += gv * a / n;
                        }
                    }
                })
            }
            Op::Permute { x, perm } => {
                let map = permute_map(self.value(*x).shape(), perm);
                acc(*x, &mut |gx| {
                    for (gv, &src) in g.iter().zip(&map) {
                        gx[src] += gv;
                    }
                })
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.value(*x).shape(), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for (s, v) in gx[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                            *s += v;
                        }
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.value(v).shape()[*axis];
                    acc(v, &mut |gx| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for (s, gv) in gx[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                                *s += gv;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::BroadcastBatch { x } => {
                let n = self.value(*x).len();
                acc(*x, &mut |gx| {
                    for chunk in g.chunks(n.max(1)) {
                        gx.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                    }
                })
            }
            Op::Votes { u, w } => {
                let (ut, wt) = (self.value(*u), self.value(*w));
                let [nb, nv, p] = [ut.shape()[0], ut.shape()[1], ut.shape()[2]];
                let [_, n, _, d] = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
                let (ud, wd) = (ut.data(), wt.data());
                let mut gu = vec![0.0; ud.len()];
                let mut gw = vec![0.0; wd.len()];
                for b in 0..nb {
                    for i in 0..nv {
                        for j in 0..n {
                            let gs = ((b * nv + i) * n + j) * d;
                            let gy = &g[gs..gs + d];
                            for k in 0..p {
                                let ws = ((i * n + j) * p + k) * d;
                                let uv = ud[(b * nv + i) * p + k];
                                gu[(b * nv + i) * p + k] +=
                                    gy.iter().zip(&wd[ws..ws + d]).map(|(a, b)| a * b).sum::<f64>();
                                for (s, gv) in gw[ws..ws + d].iter_mut().zip(gy) {
                                    *s += uv * gv;
                                }
                            }
                        }
                    }
                }
                add_into(&mut acc, *u, &gu);
                add_into(&mut acc, *w, &gw);
            }
            Op::WeightedSum { c, u_hat } => {
                let (ct, ut) = (self.value(*c), self.value(*u_hat));
                let [nb, nv, n, d] = [ut.shape()[0], ut.shape()[1], ut.shape()[2], ut.shape()[3]];
                let (cd, ud) = (ct.data(), ut.data());
                let mut gc = vec![0.0; cd.len()];
                let mut gu = vec![0.0; ud.len()];
                for b in 0..nb {
                    for i in 0..nv {
                        for j in 0..n {
                            let ci = (b * nv + i) * n + j;
                            let us = ci * d;
                            let gy = &g[(b * n + j) * d..(b * n + j + 1) * d];
                            gc[ci] = gy.iter().zip(&ud[us..us + d]).map(|(a, b)| a * b).sum();
                            for (s, gv) in gu[us..us + d].iter_mut().zip(gy) {
                                *s += cd[ci] * gv;
                            }
                        }
                    }
                }
                add_into(&mut acc, *c, &gc);
                add_into(&mut acc, *u_hat, &gu);
            }
            Op::Agreement { u_hat, v } => {
                let (ut, vt) = (self.value(*u_hat), self.value(*v));
                let [nb, nv, n, d] = [ut.shape()[0], ut.shape()[1], ut.shape()[2], ut.shape()[3]];
                let (ud, vd) = (ut.data(), vt.data());
                let mut gu = vec![0.0; ud.len()];
                let mut gv = vec![0.0; vd.len()];
                for b in 0..nb {
                    for i in 0..nv {
                        for j in 0..n {
                            let gval = g[(b * nv + i) * n + j];
                            let us = ((b * nv + i) * n + j) * d;
                            let vs = (b * n + j) * d;
                            for k in 0..d {
                                gu[us + k] += gval * vd[vs + k];
                                gv[vs + k] += gval * ud[us + k];
                            }
                        }
                    }
                }
                add_into(&mut acc, *u_hat, &gu);
                add_into(&mut acc, *v, &gv);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let shape = node.value.shape();
                let [nb, c, t, v] = [shape[0], shape[1], shape[2], shape[3]];
                let plane = t * v;
                let m = (nb * plane) as f64;
                let gd = self.value(*gamma).data();
                let mut gx = vec![0.0; xhat.len()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ch in 0..c {
                    let blocks = (0..nb).map(|b| (b * c + ch) * plane);
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for s in blocks.clone() {
                        for k in s..s + plane {
                            sg += g[k];
                            sgx += g[k] * xhat[k];
                        }
                    }
                    ggamma[ch] = sgx;
                    gbeta[ch] = sg;
                    let scale = gd[ch] * inv_std[ch] / m;
                    for s in blocks {
                        for k in s..s + plane {
                            gx[k] = scale * (m * g[k] - sg - xhat[k] * sgx);
                        }
                    }
                }
                add_into(&mut acc, *x, &gx);
                add_into(&mut acc, *gamma, &ggamma);
                add_into(&mut acc, *beta, &gbeta);
            }
            Op::CrossEntropy { x, labels, probs } => {
                let nb = labels.len();
                let n = probs.len() / nb.max(1);
                acc(*x, &mut |gx| {
                    for (b, &label) in labels.iter().enumerate() {
                        for k in 0..n {
                            let target = if k == label { 1.0 } else { 0.0 };
                            gx[b * n + k] += g[0] * (probs[b * n + k] - target) / nb as f64;
                        }
                    }
                })
            }
        }
    }
}

fn add_into(acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [f64])), v: Var, g: &[f64]) {
    acc(v, &mut |slot| slot.iter_mut().zip(g).for_each(|(s, x)| *s += x));
}

/// For each output element of a permutation, the flat index of its source.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}
