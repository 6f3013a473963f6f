//! SGD training: source pretraining, joint adaptation and evaluation helpers.
//!
//! Each step draws one source batch and one target batch from round-robin
//! samplers that reshuffle every epoch. Losses are computed per image (per
//! batch for point data) and averaged with equal image weight.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::data::{Dataset, DatasetKind, Unlabeled};
use crate::error::{Error, Result};
use crate::guidance::{self_guidance, MultiLevelOutput};
use crate::losses::{cross_entropy, loss_node, LabelMap, LossKind, ProbMap, TargetLoss};
use crate::metrics::ClassReport;
use crate::models::{bind_params, BoundParams, ModelSpec, Params};
use crate::tensor::Tensor;

const PRETRAIN_STREAM: u64 = 11;
const ADAPT_SOURCE_STREAM: u64 = 12;
const ADAPT_TARGET_STREAM: u64 = 13;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// `lr0 (1 - iter / max_iter)^power`
    Poly { power: f64 },
    /// `lr0 / (1 + alpha progress)^beta`
    Anneal { alpha: f64, beta: f64 },
}

impl Schedule {
    pub fn lr(&self, lr0: f64, iter: usize, max_iter: usize) -> Result<f64> {
        match *self {
            Schedule::Poly { power } => poly_lr(lr0, iter, max_iter, power),
            Schedule::Anneal { alpha, beta } => {
                if max_iter == 0 {
                    return Err(Error::domain("max_iter must be positive"));
                }
                anneal_lr(lr0, iter as f64 / max_iter as f64, alpha, beta)
            }
        }
    }
}

pub fn poly_lr(lr0: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::domain("max_iter must be positive"));
    }
    if iter > max_iter {
        return Err(Error::domain(format!(
            "iter {iter} beyond max_iter {max_iter}"
        )));
    }
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

pub fn anneal_lr(eta0: f64, progress: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::domain(format!("progress {progress} outside [0, 1]")));
    }
    Ok(eta0 / (1.0 + alpha * progress).powf(beta))
}

fn default_lambda_t() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    0.2
}
fn default_delta() -> f64 {
    crate::guidance::DEFAULT_DELTA
}
fn default_gamma() -> f64 {
    0.1
}
fn default_lambda_low() -> f64 {
    crate::guidance::DEFAULT_LAMBDA_LOW
}
fn default_lr0() -> f64 {
    2.5e-4
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_max_iter() -> usize {
    2000
}
fn default_pretrain_iter() -> usize {
    500
}
fn default_schedule() -> Schedule {
    Schedule::Poly { power: 0.9 }
}
fn default_loss() -> LossKind {
    LossKind::MaxSquare
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lambda_t")]
    pub lambda_t: f64,
    /// Exponent of the image-wise class weighting.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Scale ratio for the scaled entropy loss.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lambda_low")]
    pub lambda_low: f64,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_pretrain_iter")]
    pub pretrain_iter: usize,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub multi_level: bool,
    #[serde(default)]
    pub seed: u64,
    /// Samples (point data) or images (segmentation) per domain per step.
    /// Defaults to 32 points or 1 image.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_t: default_lambda_t(),
            alpha: default_alpha(),
            delta: default_delta(),
            gamma: default_gamma(),
            lambda_low: default_lambda_low(),
            lr0: default_lr0(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            max_iter: default_max_iter(),
            pretrain_iter: default_pretrain_iter(),
            schedule: default_schedule(),
            loss: default_loss(),
            multi_level: false,
            seed: 0,
            batch_size: None,
        }
    }
}

impl TrainConfig {
    /// Point-cloud protocol: annealed lr from 0.01 and the per-loss λ_T
    /// (0.3 for maximum squares, 0.03 for entropy).
    pub fn classification(loss: LossKind) -> Self {
        let lambda_t = match loss {
            LossKind::Entropy | LossKind::Scaled => 0.03,
            LossKind::MaxSquare | LossKind::MaxSquareIw => 0.3,
        };
        Self {
            lambda_t,
            lr0: 0.01,
            schedule: Schedule::Anneal {
                alpha: 10.0,
                beta: 0.75,
            },
            loss,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_t", self.lambda_t),
            ("lambda_low", self.lambda_low),
            ("lr0", self.lr0),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        match self.schedule {
            Schedule::Poly { power } if !(power > 0.0) => {
                return Err(Error::config("schedule power must be positive"))
            }
            Schedule::Anneal { alpha, beta } if !(beta > 0.0 && alpha >= 0.0) => {
                return Err(Error::config("anneal needs beta > 0 and alpha >= 0"))
            }
            _ => {}
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("batch_size must be positive"));
        }
        self.target_loss()
            .map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }

    pub fn target_loss(&self) -> Result<TargetLoss> {
        TargetLoss::from_kind(self.loss, self.gamma, self.alpha)
    }

    fn batch_for(&self, kind: DatasetKind) -> usize {
        self.batch_size.unwrap_or(match kind {
            DatasetKind::Classification => 32,
            DatasetKind::Segmentation => 1,
        })
    }
}

/// Per-parameter momentum buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub velocity: BTreeMap<String, Tensor>,
    pub iteration: u64,
}

/// `g' = g + wd w; v = μ v + g'; w = w - lr v`.
pub fn sgd_step(
    params: &mut Params,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        let w = params
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("gradient for unknown parameter {name}")))?;
        if w.shape() != g.shape() {
            return Err(Error::shape(format!(
                "parameter {name} is {:?} but its gradient is {:?}",
                w.shape(),
                g.shape()
            )));
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let step = gi + weight_decay * *wi;
            *vi = momentum * *vi + step;
            *wi -= lr * *vi;
        }
    }
    state.iteration += 1;
    Ok(())
}

/// Round-robin index sampler, reshuffled at the start of every epoch.
struct EpochSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl EpochSampler {
    fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut s = Self {
            n,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            seed: crate::data::synth::derive_seed(seed, stream, 0),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(crate::data::synth::derive_seed(self.seed, 0, self.epoch));
        self.order.shuffle(&mut rng);
        self.pos = 0;
        self.epoch += 1;
    }

    fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.n {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    /// Unweighted target loss (before λ_T).
    pub loss_target: f64,
}

pub fn render_loss_log(rows: &[LogRow]) -> String {
    let mut out = String::from("iter,lr,loss_total,loss_ce,loss_target\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.10},{:.10},{:.10}",
            r.iter, r.lr, r.loss_total, r.loss_ce, r.loss_target
        );
    }
    out
}

pub fn write_loss_log(rows: &[LogRow], path: &Path) -> Result<()> {
    std::fs::write(path, render_loss_log(rows))?;
    Ok(())
}

/// Probability nodes `(final, low)` for a batch; `low` only for the seg net.
pub fn model_probs(
    g: &mut Graph,
    model: &ModelSpec,
    bound: &BoundParams,
    name: &str,
    x: Tensor,
) -> Result<(NodeId, Option<NodeId>)> {
    match model {
        ModelSpec::Mlp(spec) => {
            let b = x.shape()[0];
            let d = x.len().checked_div(b).unwrap_or(spec.input_dim);
            let xi = g.input(name, x.reshape(vec![b, d])?)?;
            let z = spec.logits(g, bound, xi)?;
            Ok((g.softmax_rows(z)?, None))
        }
        ModelSpec::Seg(spec) => {
            let xi = g.input(name, x)?;
            let (zf, zl) = spec.logits(g, bound, xi)?;
            Ok((g.softmax_rows(zf)?, Some(g.softmax_rows(zl)?)))
        }
    }
}

/// Rows per independently normalized group: the whole batch for point data,
/// one image for segmentation.
fn group_rows(kind: DatasetKind, pixels_per_sample: usize) -> usize {
    match kind {
        DatasetKind::Classification => 0,
        DatasetKind::Segmentation => pixels_per_sample,
    }
}

/// Losses of one step and the graph node of their weighted total.
#[derive(Clone, Debug)]
pub struct StepGraph {
    pub graph: Graph,
    pub total: NodeId,
    /// Source cross-entropy, including the low-level head term on a seg net.
    pub ce: NodeId,
    pub target: Option<NodeId>,
}

/// Builds `CE(source) + λ_T L_T(target)` for one source and one target batch.
///
/// On a seg net the source CE also supervises the low-level head, weighted by
/// λ_low. With `multi_level` on, the target loss gains the self-guided
/// low-level term; guidance masks are computed from the current head outputs
/// and frozen into the graph as constants.
pub fn build_step(
    model: &ModelSpec,
    params: &Params,
    source: (Tensor, LabelMap, DatasetKind, usize),
    target: Option<(Tensor, DatasetKind, usize)>,
    cfg: &TrainConfig,
) -> Result<StepGraph> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params)?;
    let multi = cfg.multi_level && matches!(model, ModelSpec::Seg(_));
    if cfg.multi_level && !multi {
        return Err(Error::config("multi_level needs a segmentation model"));
    }

    let (xs, ys, kind_s, pps_s) = source;
    let group_s = group_rows(kind_s, pps_s);
    let (pf_s, pl_s) = model_probs(&mut g, model, &bound, "source", xs)?;
    let labels = split_labels(&ys, group_s);
    let l = labels.clone();
    let mut ce = loss_node(&mut g, pf_s, group_s, move |p, gi| cross_entropy(p, &l[gi]))?;
    if let Some(pl_s) = pl_s {
        let lambda_low = cfg.lambda_low;
        let low = loss_node(&mut g, pl_s, group_s, move |p, gi| {
            let mut r = cross_entropy(p, &labels[gi])?;
            r.value *= lambda_low;
            for v in r.grad.data_mut() {
                *v *= lambda_low;
            }
            Ok(r)
        })?;
        ce = g.add(ce, low)?;
    }

    let mut total = ce;
    let mut target_node = None;
    if let Some((xt, kind_t, pps_t)) = target {
        let group_t = group_rows(kind_t, pps_t);
        let loss = cfg.target_loss()?;
        let (pf_t, pl_t) = model_probs(&mut g, model, &bound, "target", xt)?;
        let mut lt = loss_node(&mut g, pf_t, group_t, move |p, _| loss.evaluate(p))?;
        if let Some(pl_t) = pl_t.filter(|_| multi) {
            let heads = MultiLevelOutput::new(
                ProbMap::from_tensor(g.value(pf_t))?,
                ProbMap::from_tensor(g.value(pl_t))?,
            )?;
            let n = heads.final_map.n();
            let group = if group_t == 0 { n.max(1) } else { group_t };
            let masks = (0..n.div_ceil(group))
                .map(|gi| {
                    self_guidance(
                        &heads.slice_rows(gi * group, ((gi + 1) * group).min(n)),
                        cfg.delta,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let lambda_low = cfg.lambda_low;
            let low = loss_node(&mut g, pl_t, group_t, move |p, gi| {
                let mut r = cross_entropy(p, &masks[gi])?;
                r.value *= lambda_low;
                for v in r.grad.data_mut() {
                    *v *= lambda_low;
                }
                Ok(r)
            })?;
            lt = g.add(lt, low)?;
        }
        let weighted = g.scale(lt, cfg.lambda_t)?;
        total = g.add(total, weighted)?;
        target_node = Some(lt);
    }
    Ok(StepGraph {
        graph: g,
        total,
        ce,
        target: target_node,
    })
}

fn split_labels(labels: &LabelMap, group: usize) -> Vec<LabelMap> {
    let n = labels.len();
    let group = if group == 0 { n.max(1) } else { group };
    (0..n.div_ceil(group).max(1))
        .map(|gi| labels.slice(gi * group, ((gi + 1) * group).min(n)))
        .collect()
}

fn run_loop(
    model: &ModelSpec,
    mut params: Params,
    source: &Dataset,
    target: Option<Unlabeled<'_>>,
    cfg: &TrainConfig,
    iters: usize,
    source_stream: u64,
) -> Result<(Params, Vec<LogRow>)> {
    cfg.validate()?;
    model.check_params(&params)?;
    if source.num_samples() == 0 {
        return Err(Error::config("source dataset is empty"));
    }
    let use_target = target.is_some() && cfg.lambda_t > 0.0;
    if let Some(t) = target.filter(|_| use_target) {
        if t.num_samples() == 0 {
            return Err(Error::config("target dataset is empty"));
        }
    }
    let mut src_sampler = EpochSampler::new(source.num_samples(), cfg.seed, source_stream);
    let mut tgt_sampler =
        target.map(|t| EpochSampler::new(t.num_samples(), cfg.seed, ADAPT_TARGET_STREAM));
    let bs = cfg.batch_for(source.kind());
    let mut state = OptimizerState::default();
    let mut log = Vec::with_capacity(iters);
    for iter in 0..iters {
        let lr = cfg.schedule.lr(cfg.lr0, iter, iters)?;
        let idx = src_sampler.next_batch(bs);
        let src = (
            source.batch_features(&idx),
            source.batch_labels(&idx),
            source.kind(),
            source.pixels_per_sample(),
        );
        let tgt = match (target, tgt_sampler.as_mut()) {
            (Some(t), Some(sampler)) if use_target => {
                let tidx = sampler.next_batch(cfg.batch_for(t.kind()));
                Some((t.batch_features(&tidx), t.kind(), t.pixels_per_sample()))
            }
            _ => None,
        };
        let step = build_step(model, &params, src, tgt, cfg)?;
        let grads = step.graph.backward(step.total)?;
        let value = |id: NodeId| step.graph.value(id).item();
        let row = LogRow {
            iter,
            lr,
            loss_total: value(step.total)?,
            loss_ce: value(step.ce)?,
            loss_target: step.target.map(value).transpose()?.unwrap_or(0.0),
        };
        if !row.loss_total.is_finite() {
            return Err(Error::Contract(format!(
                "loss diverged at iteration {iter}"
            )));
        }
        log.push(row);
        sgd_step(
            &mut params,
            &grads,
            &mut state,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;
    }
    Ok((params, log))
}

/// Cross-entropy-only training on the labeled source for `pretrain_iter` steps.
pub fn pretrain_source(
    model: &ModelSpec,
    params: Params,
    source: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Params, Vec<LogRow>)> {
    run_loop(
        model,
        params,
        source,
        None,
        cfg,
        cfg.pretrain_iter,
        PRETRAIN_STREAM,
    )
}

/// Joint training on `CE(source) + λ_T L_T(target)` for `max_iter` steps.
/// The target is seen only through its features.
pub fn adapt(
    model: &ModelSpec,
    params: Params,
    source: &Dataset,
    target: Unlabeled<'_>,
    cfg: &TrainConfig,
) -> Result<(Params, Vec<LogRow>)> {
    run_loop(
        model,
        params,
        source,
        Some(target),
        cfg,
        cfg.max_iter,
        ADAPT_SOURCE_STREAM,
    )
}

/// The adaptation schedule with the target term removed.
pub fn continue_source_only(
    model: &ModelSpec,
    params: Params,
    source: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Params, Vec<LogRow>)> {
    run_loop(
        model,
        params,
        source,
        None,
        cfg,
        cfg.max_iter,
        ADAPT_SOURCE_STREAM,
    )
}

/// Final-head probabilities for every pixel (or point) of `features`,
/// evaluated one sample at a time for segmentation.
pub fn predict(model: &ModelSpec, params: &Params, features: &Tensor) -> Result<ProbMap> {
    let (s, c, h, w) = features.dims4()?;
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params)?;
    match model {
        ModelSpec::Mlp(_) => {
            let (p, _) = model_probs(&mut g, model, &bound, "x", features.clone())?;
            ProbMap::from_tensor(g.value(p))
        }
        ModelSpec::Seg(_) => {
            let per = c * h * w;
            let mut values = Vec::with_capacity(s * h * w * model.num_classes());
            for i in 0..s {
                let mut g = Graph::new();
                let bound = bind_params(&mut g, params)?;
                let x = Tensor::new(
                    vec![1, c, h, w],
                    features.data()[i * per..(i + 1) * per].to_vec(),
                )?;
                let (p, _) = model_probs(&mut g, model, &bound, "x", x)?;
                values.extend_from_slice(g.value(p).data());
            }
            ProbMap::new(s * h * w, model.num_classes(), values)
        }
    }
}

/// Indices of the `⌊fraction N⌋` most and least confident rows, where
/// confidence is the row maximum. Ties go to the lower index in both sets.
pub fn confidence_split(p: &ProbMap, fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::domain(format!(
            "fraction must lie in (0, 0.5], got {fraction}"
        )));
    }
    let conf: Vec<f64> = p
        .rows()
        .map(|r| r.iter().copied().fold(f64::MIN, f64::max))
        .collect();
    let k = (fraction * p.n() as f64 + 1e-9).floor() as usize;
    let mut idx: Vec<usize> = (0..p.n()).collect();
    idx.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    let top = idx[..k].to_vec();
    idx.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));
    let bottom = idx[..k].to_vec();
    Ok((top, bottom))
}

/// Accuracy of `p` on the chosen rows; 0 for an empty selection.
pub fn subset_accuracy(p: &ProbMap, truth: &LabelMap, idx: &[usize]) -> f64 {
    let scored: Vec<bool> = idx
        .iter()
        .filter_map(|&i| truth.labels()[i].map(|t| p.argmax(i) == t))
        .collect();
    if scored.is_empty() {
        0.0
    } else {
        scored.iter().filter(|&&ok| ok).count() as f64 / scored.len() as f64
    }
}

/// Report over a dataset's evaluation labels; point data also gets overall,
/// top-30% and bottom-30% confidence accuracies, with the sets chosen by
/// `split_by` (or by `p` itself when absent).
pub fn evaluate(
    model: &ModelSpec,
    params: &Params,
    dataset: &Dataset,
    split_by: Option<&ProbMap>,
) -> Result<(ClassReport, ProbMap)> {
    if model.num_classes() != dataset.num_classes() {
        return Err(Error::config(format!(
            "model has {} classes, dataset {}",
            model.num_classes(),
            dataset.num_classes()
        )));
    }
    let p = predict(model, params, dataset.features()).map_err(|e| match e {
        Error::Shape(m) => Error::config(m),
        other => other,
    })?;
    let truth = dataset.eval_labels();
    let mut report = ClassReport::evaluate(&p, truth)?;
    if dataset.kind() == DatasetKind::Classification {
        let all: Vec<usize> = (0..p.n()).collect();
        let (top, bottom) = confidence_split(split_by.unwrap_or(&p), 0.3)?;
        report
            .extra
            .push(("accuracy".into(), subset_accuracy(&p, truth, &all)));
        report
            .extra
            .push(("accuracy_top30".into(), subset_accuracy(&p, truth, &top)));
        report.extra.push((
            "accuracy_bottom30".into(),
            subset_accuracy(&p, truth, &bottom),
        ));
    }
    Ok((report, p))
}
