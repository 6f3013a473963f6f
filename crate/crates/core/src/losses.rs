//! Source cross-entropy and the target-domain loss family.
//!
//! Every loss is a pure function of a [`ProbMap`] and returns its value
//! together with the gradient with respect to the probabilities. Composition
//! with the softmax (and the network below it) happens in the autodiff graph
//! through [`loss_node`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ScalarFn, LOG_CLAMP};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ROW_SUM_TOL: f64 = 1e-9;

/// N×C matrix of class probabilities, one simplex row per pixel or sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    n: usize,
    c: usize,
    values: Vec<f64>,
}

impl ProbMap {
    pub fn new(n: usize, c: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * c {
            return Err(Error::shape(format!(
                "probability map {n}x{c} needs {} values, got {}",
                n * c,
                values.len()
            )));
        }
        if c == 0 {
            return Err(Error::shape("probability map needs at least one class"));
        }
        for (i, row) in values.chunks(c).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::domain(format!("row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::domain(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { n, c, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::shape("ragged probability rows"));
        }
        Self::new(rows.len(), c, rows.concat())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c) = t.dims2()?;
        Self::new(n, c, t.data().to_vec())
    }

    /// Empty map with `c` classes.
    pub fn empty(c: usize) -> Self {
        Self {
            n: 0,
            c,
            values: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.c..(i + 1) * self.c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.c)
    }

    /// Argmax of row `i`; ties go to the lowest class index.
    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }

    /// Rows `start..end` as a new map.
    pub fn slice_rows(&self, start: usize, end: usize) -> ProbMap {
        ProbMap {
            n: end - start,
            c: self.c,
            values: self.values[start * self.c..end * self.c].to_vec(),
        }
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> ProbMap {
        let mut values = Vec::with_capacity(idx.len() * self.c);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        ProbMap {
            n: idx.len(),
            c: self.c,
            values,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.c], self.values.clone()).expect("consistent shape")
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel class labels; `None` marks an abstained or held-out pixel.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelMap(pub Vec<Option<usize>>);

impl LabelMap {
    pub fn new(labels: Vec<Option<usize>>) -> Self {
        Self(labels)
    }

    pub fn from_classes(labels: &[usize]) -> Self {
        Self(labels.iter().map(|&l| Some(l)).collect())
    }

    pub fn abstain(n: usize) -> Self {
        Self(vec![None; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.0
    }

    pub fn assigned(&self) -> usize {
        self.0.iter().filter(|l| l.is_some()).count()
    }

    pub fn check_range(&self, c: usize) -> Result<()> {
        match self.0.iter().flatten().find(|&&l| l >= c) {
            Some(l) => Err(Error::domain(format!(
                "label {l} out of range for {c} classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> LabelMap {
        LabelMap(self.0[start..end].to_vec())
    }
}

/// Value of a loss plus its gradient with respect to the probability map.
#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// N×C, same shape as the input map.
    pub grad: Tensor,
    /// Set when the loss had nothing to average over.
    pub degenerate: bool,
}

impl LossResult {
    fn zero(n: usize, c: usize) -> Self {
        Self {
            value: 0.0,
            grad: Tensor::zeros(&[n, c]),
            degenerate: true,
        }
    }
}

fn clamped(p: f64) -> f64 {
    p.clamp(LOG_CLAMP, 1.0)
}

/// `-(1/N) Σ log p[n, y_n]` over non-abstained pixels.
pub fn cross_entropy(p: &ProbMap, y: &LabelMap) -> Result<LossResult> {
    if y.len() != p.n {
        return Err(Error::shape(format!(
            "{} labels for {} probability rows",
            y.len(),
            p.n
        )));
    }
    y.check_range(p.c)?;
    let count = y.assigned();
    if count == 0 {
        return Ok(LossResult::zero(p.n, p.c));
    }
    let inv = 1.0 / count as f64;
    let mut grad = Tensor::zeros(&[p.n, p.c]);
    let mut total = 0.0;
    for (i, label) in y.labels().iter().enumerate() {
        let Some(label) = *label else { continue };
        let q = p.row(i)[label];
        total -= clamped(q).ln();
        if q >= LOG_CLAMP {
            grad.data_mut()[i * p.c + label] = -inv / q;
        }
    }
    Ok(LossResult {
        value: total * inv,
        grad,
        degenerate: false,
    })
}

/// Mean Shannon entropy `-(1/N) Σ_n Σ_c p log p`; zero-probability terms vanish.
pub fn entropy_loss(p: &ProbMap) -> LossResult {
    if p.n == 0 {
        return LossResult::zero(0, p.c);
    }
    let inv = 1.0 / p.n as f64;
    let mut total = 0.0;
    let grad: Vec<f64> = p
        .values
        .iter()
        .map(|&q| {
            let l = clamped(q).ln();
            total -= q * l;
            let d = if q >= LOG_CLAMP { l + 1.0 } else { l };
            -d * inv
        })
        .collect();
    LossResult {
        value: total * inv,
        grad: Tensor::new(vec![p.n, p.c], grad).expect("shape"),
        degenerate: false,
    }
}

/// `|log p - log(1 - p)|`, the magnitude of the binary entropy derivative.
pub fn binary_entropy_grad(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!(
            "binary entropy gradient needs p in (0, 1), got {p}"
        )));
    }
    Ok((p.ln() - (1.0 - p).ln()).abs())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 0.5 {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "gamma must lie in (0, 0.5), got {gamma}"
        )))
    }
}

/// Entropy of `(1 - 2γ) p + γ`.
pub fn scaled_entropy_loss(p: &ProbMap, gamma: f64) -> Result<LossResult> {
    check_gamma(gamma)?;
    let a = 1.0 - 2.0 * gamma;
    if p.n == 0 {
        return Ok(LossResult::zero(0, p.c));
    }
    let inv = 1.0 / p.n as f64;
    let mut total = 0.0;
    let grad: Vec<f64> = p
        .values
        .iter()
        .map(|&q| {
            let s = a * q + gamma;
            let l = s.ln();
            total -= s * l;
            -a * (l + 1.0) * inv
        })
        .collect();
    Ok(LossResult {
        value: total * inv,
        grad: Tensor::new(vec![p.n, p.c], grad)?,
        degenerate: false,
    })
}

/// Magnitude of d/dp of the binary entropy evaluated on scaled probabilities.
pub fn binary_scaled_entropy_grad(p: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("p must lie in [0, 1], got {p}")));
    }
    let a = 1.0 - 2.0 * gamma;
    let s = a * p + gamma;
    let t = a * (1.0 - p) + gamma;
    Ok(a * (s.ln() - t.ln()).abs())
}

/// Shared kernel: `-Σ_n Σ_c p² / denom[c]`.
fn weighted_squares(p: &ProbMap, denom: &[f64]) -> LossResult {
    let mut total = 0.0;
    let mut grad = vec![0.0; p.values.len()];
    for (row, grow) in p.values.chunks(p.c).zip(grad.chunks_mut(p.c)) {
        for ((&q, g), &d) in row.iter().zip(grow.iter_mut()).zip(denom) {
            total -= q * q / d;
            *g = -2.0 * q / d;
        }
    }
    LossResult {
        value: total,
        grad: Tensor::new(vec![p.n, p.c], grad).expect("shape"),
        degenerate: false,
    }
}

/// `-(1/2N) Σ_n Σ_c p²`.
pub fn max_squares_loss(p: &ProbMap) -> LossResult {
    if p.n == 0 {
        return LossResult::zero(0, p.c);
    }
    let denom = vec![2.0 * p.n as f64; p.c];
    weighted_squares(p, &denom)
}

/// `|4p - 2|`, the magnitude of the binary maximum squares derivative.
pub fn binary_maxsquare_grad(p: f64) -> f64 {
    (4.0 * p - 2.0).abs()
}

/// Pearson χ² divergence of every row from the uniform distribution, `C Σ p² - 1`.
pub fn pearson_chi2_uniform(p: &ProbMap) -> Vec<f64> {
    let c = p.c as f64;
    p.rows()
        .map(|row| c * row.iter().map(|q| q * q).sum::<f64>() - 1.0)
        .collect()
}

/// Predicted-class pixel counts of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub counts: Vec<usize>,
    pub total: usize,
}

pub fn class_counts(p: &ProbMap) -> ClassCounts {
    let mut counts = vec![0; p.c];
    for i in 0..p.n {
        counts[p.argmax(i)] += 1;
    }
    ClassCounts { counts, total: p.n }
}

/// Maximum squares with the image-wise class-balanced weight
/// `1 / (2 (N^c)^α N^(1-α))`, counts taken from the map's own argmax.
///
/// Counts are clamped to at least one so absent classes never divide by zero.
/// The counts are piecewise constant in `p`, so they carry no gradient.
pub fn iw_max_squares_loss(p: &ProbMap, alpha: f64) -> Result<LossResult> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if p.n == 0 {
        return Ok(LossResult::zero(0, p.c));
    }
    let counts = class_counts(p);
    let n_part = (p.n as f64).powf(1.0 - alpha);
    let denom: Vec<f64> = counts
        .counts
        .iter()
        .map(|&k| 2.0 * (k.max(1) as f64).powf(alpha) * n_part)
        .collect();
    Ok(weighted_squares(p, &denom))
}

/// Target-domain loss selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "entropy")]
    Entropy,
    #[serde(rename = "scaled")]
    Scaled,
    #[serde(rename = "maxsquare")]
    MaxSquare,
    #[serde(rename = "maxsquare_iw")]
    MaxSquareIw,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Entropy => "entropy",
            LossKind::Scaled => "scaled",
            LossKind::MaxSquare => "maxsquare",
            LossKind::MaxSquareIw => "maxsquare_iw",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(LossKind::Entropy),
            "scaled" => Ok(LossKind::Scaled),
            "maxsquare" => Ok(LossKind::MaxSquare),
            "maxsquare_iw" => Ok(LossKind::MaxSquareIw),
            other => Err(Error::config(format!(
                "unknown loss selector {other:?} (expected entropy, scaled, maxsquare or maxsquare_iw)"
            ))),
        }
    }
}

/// A fully parameterized target loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetLoss {
    Entropy,
    ScaledEntropy { gamma: f64 },
    MaxSquares,
    IwMaxSquares { alpha: f64 },
}

impl TargetLoss {
    pub fn from_kind(kind: LossKind, gamma: f64, alpha: f64) -> Result<Self> {
        let loss = match kind {
            LossKind::Entropy => TargetLoss::Entropy,
            LossKind::Scaled => {
                check_gamma(gamma)?;
                TargetLoss::ScaledEntropy { gamma }
            }
            LossKind::MaxSquare => TargetLoss::MaxSquares,
            LossKind::MaxSquareIw => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::domain(format!(
                        "alpha must lie in [0, 1], got {alpha}"
                    )));
                }
                TargetLoss::IwMaxSquares { alpha }
            }
        };
        Ok(loss)
    }

    pub fn evaluate(&self, p: &ProbMap) -> Result<LossResult> {
        match *self {
            TargetLoss::Entropy => Ok(entropy_loss(p)),
            TargetLoss::ScaledEntropy { gamma } => scaled_entropy_loss(p, gamma),
            TargetLoss::MaxSquares => Ok(max_squares_loss(p)),
            TargetLoss::IwMaxSquares { alpha } => iw_max_squares_loss(p, alpha),
        }
    }
}

/// Value and per-domain gradients of `CE(source) + λ_T L_T(target)`.
#[derive(Clone, Debug, PartialEq)]
pub struct UdaLoss {
    pub value: f64,
    pub source: LossResult,
    pub target: LossResult,
}

pub fn uda_objective(
    p_src: &ProbMap,
    y_src: &LabelMap,
    p_tgt: &ProbMap,
    target_loss: TargetLoss,
    lambda_t: f64,
) -> Result<UdaLoss> {
    if !(lambda_t >= 0.0) {
        return Err(Error::domain(format!(
            "lambda_t must be nonnegative, got {lambda_t}"
        )));
    }
    let source = cross_entropy(p_src, y_src)?;
    let mut target = target_loss.evaluate(p_tgt)?;
    let value = source.value + lambda_t * target.value;
    for g in target.grad.data_mut() {
        *g *= lambda_t;
    }
    Ok(UdaLoss {
        value,
        source,
        target,
    })
}

/// Adds a scalar node applying `loss` to consecutive groups of `group_rows`
/// rows of the N×C probability node `probs`; group losses are averaged with
/// equal weight. `group_rows == 0` treats all rows as one group.
pub fn loss_node<F>(graph: &mut Graph, probs: NodeId, group_rows: usize, loss: F) -> Result<NodeId>
where
    F: Fn(&ProbMap, usize) -> Result<LossResult> + Send + Sync + 'static,
{
    let f: ScalarFn = Arc::new(move |t: &Tensor| {
        let p = ProbMap::from_tensor(t)?;
        let group = if group_rows == 0 {
            p.n.max(1)
        } else {
            group_rows
        };
        if p.n % group != 0 {
            return Err(Error::shape(format!(
                "{} rows do not split into groups of {group}",
                p.n
            )));
        }
        let groups = (p.n / group).max(1);
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(p.values.len());
        for gi in 0..groups {
            let end = ((gi + 1) * group).min(p.n);
            let part = p.slice_rows(gi * group, end);
            let r = loss(&part, gi)?;
            value += r.value;
            grad.extend_from_slice(r.grad.data());
        }
        let inv = 1.0 / groups as f64;
        for g in &mut grad {
            *g *= inv;
        }
        Ok((value * inv, Tensor::new(t.shape().to_vec(), grad)?))
    });
    graph.custom(probs, f)
}
