//! Coupling-coefficient exports, consistency maps and heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capsule::RoutingState;
use crate::error::{Error, Result};
use crate::model::{ActionCapsNet, CapsulePath, ModelConfig};
use crate::skeleton::{SkeletonTensor, NTU_JOINTS, NTU_JOINT_NAMES};
use crate::tensor::Tensor;

/// Exact floating-point sum kept as non-overlapping partials (Shewchuk's
/// algorithm). Adding values or merging accumulators never rounds, so
/// the rounded total does not depend on summation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        ExactSum::default()
    }

    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
    }

    /// The exact sum rounded to the nearest double (ties to even).
    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let Some(mut n) = p.len().checked_sub(1) else {
            return 0.0;
        };
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // A half-way rounding of hi is corrected when the remaining
        // partials push the exact sum past the midpoint.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

/// Column labels of a coupling matrix: joint names for 25-joint bodies,
/// `joint{v}` otherwise. Global-path slots are prefixed with `b{m}.`.
pub fn joint_labels(cfg: &ModelConfig, path: CapsulePath) -> Vec<String> {
    let name = |v: usize| {
        if cfg.joints == NTU_JOINTS {
            NTU_JOINT_NAMES[v].to_string()
        } else {
            format!("joint{v}")
        }
    };
    match path {
        CapsulePath::Personalized => (0..cfg.joints).map(name).collect(),
        CapsulePath::Global => (0..cfg.bodies)
            .flat_map(|m| (0..cfg.joints).map(move |v| (m, v)))
            .map(|(m, v)| format!("b{m}.{}", name(v)))
            .collect(),
    }
}

pub fn class_labels(classes: usize) -> Vec<String> {
    (0..classes).map(|k| format!("class{k}")).collect()
}

/// Coupling coefficients of one routing iteration and batch entry,
/// transposed to `[N, V']`.
pub fn coupling_matrix(state: &RoutingState, iteration: usize, sample: usize) -> Result<Tensor> {
    let snap = state.trace.get(iteration).ok_or_else(|| {
        Error::contract(format!("iteration {iteration} out of range 0..{}", state.trace.len()))
    })?;
    let [nb, slots, classes] = [snap.c.shape()[0], snap.c.shape()[1], snap.c.shape()[2]];
    if sample >= nb {
        return Err(Error::contract(format!("sample {sample} out of range 0..{nb}")));
    }
    Ok(Tensor::from_fn(&[classes, slots], |i| snap.c.at(&[sample, i % slots, i / slots])))
}

/// CSV text of a `[rows, columns]` matrix: a `class` header followed by the
/// column labels, then one row per class. Values carry 17 significant
/// digits; lines end in LF.
pub fn matrix_csv(matrix: &Tensor, row_labels: &[String], column_labels: &[String]) -> Result<String> {
    if matrix.rank() != 2 || matrix.shape()[0] != row_labels.len() || matrix.shape()[1] != column_labels.len() {
        return Err(Error::dim(
            "matrix_csv",
            "shape",
            format!("[{}, {}]", row_labels.len(), column_labels.len()),
            format!("{:?}", matrix.shape()),
        ));
    }
    let mut out = String::from("class");
    for label in column_labels {
        write!(out, ",{label}").unwrap();
    }
    out.push('\n');
    for (r, label) in row_labels.iter().enumerate() {
        out.push_str(label);
        for c in 0..column_labels.len() {
            write!(out, ",{:.16e}", matrix.at(&[r, c])).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes the coupling matrix of `iteration` for batch entry `sample`.
pub fn export_coupling(
    state: &RoutingState,
    iteration: usize,
    sample: usize,
    column_labels: &[String],
    path: &Path,
) -> Result<Tensor> {
    let matrix = coupling_matrix(state, iteration, sample)?;
    let text = matrix_csv(&matrix, &class_labels(matrix.shape()[0]), column_labels)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(matrix)
}

/// Grayscale P5 image with one pixel per entry, `floor(255 v + 0.5)`.
pub fn heatmap_pgm(matrix: &Tensor) -> Result<Vec<u8>> {
    if matrix.rank() != 2 {
        return Err(Error::dim("render_heatmap", "rank", 2, matrix.rank()));
    }
    let (rows, cols) = (matrix.shape()[0], matrix.shape()[1]);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for &v in matrix.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::contract(format!("heatmap value {v} outside [0, 1]")));
        }
        out.push((255.0 * v + 0.5).floor() as u8);
    }
    Ok(out)
}

pub fn render_heatmap(matrix: &Tensor, path: &Path) -> Result<()> {
    let bytes = heatmap_pgm(matrix)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Which routing pass a consistency map reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleSelector {
    /// Index into the model's stages (0 = first capsule stage).
    pub stage: usize,
    pub path: CapsulePath,
    /// Body index for the personalized path.
    pub body: usize,
}

impl Default for CapsuleSelector {
    fn default() -> Self {
        CapsuleSelector {
            stage: 0,
            path: CapsulePath::Global,
            body: 0,
        }
    }
}

/// Per class, the mean final-iteration coupling row of that class over the
/// samples labelled with it. Sums are kept exactly, so merging maps of a
/// partition gives the map of the whole dataset bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyMap {
    pub selector: CapsuleSelector,
    pub class_labels: Vec<String>,
    pub joint_labels: Vec<String>,
    counts: Vec<usize>,
    sums: Vec<Vec<ExactSum>>,
}

impl ConsistencyMap {
    pub fn empty(selector: CapsuleSelector, class_labels: Vec<String>, joint_labels: Vec<String>) -> Self {
        let (n, v) = (class_labels.len(), joint_labels.len());
        ConsistencyMap {
            selector,
            counts: vec![0; n],
            sums: vec![vec![ExactSum::new(); v]; n],
            class_labels,
            joint_labels,
        }
    }

    pub fn classes(&self) -> usize {
        self.class_labels.len()
    }

    /// Samples contributing to each row.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Adds one coupling row for `class`.
    pub fn accumulate(&mut self, class: usize, row: &[f64]) -> Result<()> {
        if class >= self.classes() {
            return Err(Error::contract(format!("class {class} out of range 0..{}", self.classes())));
        }
        if row.len() != self.joint_labels.len() {
            return Err(Error::dim("consistency_map", "V'", self.joint_labels.len(), row.len()));
        }
        self.counts[class] += 1;
        for (acc, &x) in self.sums[class].iter_mut().zip(row) {
            acc.add(x);
        }
        Ok(())
    }

    /// Combines maps built over disjoint parts of a dataset.
    pub fn merge(&mut self, other: &ConsistencyMap) -> Result<()> {
        if self.selector != other.selector || self.class_labels != other.class_labels || self.joint_labels != other.joint_labels {
            return Err(Error::contract("consistency maps with different layouts cannot be merged"));
        }
        for k in 0..self.classes() {
            self.counts[k] += other.counts[k];
            for (a, b) in self.sums[k].iter_mut().zip(&other.sums[k]) {
                a.merge(b);
            }
        }
        Ok(())
    }

    /// Mean row of `class`, or `None` when no sample had that label.
    pub fn row(&self, class: usize) -> Option<Vec<f64>> {
        let n = *self.counts.get(class)?;
        (n > 0).then(|| self.sums[class].iter().map(|s| s.value() / n as f64).collect())
    }

    /// Rows as a `[N, V']` matrix; absent rows are filled with `absent`.
    pub fn matrix(&self, absent: f64) -> Tensor {
        let v = self.joint_labels.len();
        let mut data = Vec::with_capacity(self.classes() * v);
        for k in 0..self.classes() {
            match self.row(k) {
                Some(row) => data.extend(row),
                None => data.extend(std::iter::repeat_n(absent, v)),
            }
        }
        Tensor::new(vec![self.classes(), v], data).expect("consistency matrix shape")
    }

    /// CSV of the mean rows; absent classes have empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for label in &self.joint_labels {
            write!(out, ",{label}").unwrap();
        }
        out.push('\n');
        for (k, label) in self.class_labels.iter().enumerate() {
            out.push_str(label);
            match self.row(k) {
                Some(row) => row.iter().for_each(|x| write!(out, ",{x:.16e}").unwrap()),
                None => out.push_str(&",".repeat(self.joint_labels.len())),
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `net` on every sample (in batches of `batch_size`) and averages the
/// final-iteration coupling row of each sample's own class.
pub fn consistency_map(
    net: &ActionCapsNet,
    data: &[SkeletonTensor],
    selector: CapsuleSelector,
    batch_size: usize,
) -> Result<ConsistencyMap> {
    let cfg = &net.config;
    if selector.stage >= cfg.stages {
        return Err(Error::contract(format!("stage {} out of range 0..{}", selector.stage, cfg.stages)));
    }
    if selector.path == CapsulePath::Personalized && selector.body >= cfg.bodies {
        return Err(Error::contract(format!("body {} out of range 0..{}", selector.body, cfg.bodies)));
    }
    let mut map = ConsistencyMap::empty(selector, class_labels(cfg.classes), joint_labels(cfg, selector.path));
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&SkeletonTensor> = chunk.iter().collect();
        let (_, out) = net.run(&batch)?;
        let state = out.stages[selector.stage]
            .routing(selector.path, selector.body)
            .expect("selector validated");
        let last = state.trace.len() - 1;
        for (b, sample) in chunk.iter().enumerate() {
            let c = coupling_matrix(state, last, b)?;
            let cols = c.shape()[1];
            map.accumulate(sample.label, &c.data()[sample.label * cols..(sample.label + 1) * cols])?;
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_sum_cancels() {
        let mut s = ExactSum::new();
        for x in [1e100, 1.0, -1e100, 1e-100] {
            s.add(x);
        }
        assert_eq!(s.value(), 1.0 + 1e-100);
        let mut t = ExactSum::new();
        for _ in 0..10 {
            t.add(0.1);
        }
        assert_eq!(t.value(), 1.0);
    }

    #[test]
    fn pgm_rounding() {
        let m = Tensor::new(vec![1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let bytes = heatmap_pgm(&m).unwrap();
        assert_eq!(&bytes[..], b"P5\n3 1\n255\n\x00\x80\xff");
        let bad = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        assert!(heatmap_pgm(&bad).is_err());
    }
}
