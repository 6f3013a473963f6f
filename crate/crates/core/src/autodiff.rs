//! Reverse-mode differentiation over a recorded graph of tensor operations.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward simply walks it in reverse. The graph keeps
//! every intermediate value; [`Graph::forward`] replays all nodes with new leaf
//! values, which is what the finite-difference oracle relies on.
//!
//! Op catalog: matmul, conv3x3 (zero padded, stride 1), relu, add, mul,
//! scalar scale, row softmax, clamped log, sum, mean, plus the layout and bias
//! helpers the models need and a custom scalar node for analytic losses.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied before any logarithm.
pub const LOG_CLAMP: f64 = 1e-7;

/// Scalar function of one tensor returning `(value, d value / d input)`.
pub type ScalarFn = Arc<dyn Fn(&Tensor) -> Result<(f64, Tensor)> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Input(String),
    Param(String),
    MatMul(NodeId, NodeId),
    Conv3x3 { input: NodeId, kernel: NodeId },
    AddRowBias(NodeId, NodeId),
    AddChannelBias(NodeId, NodeId),
    ChannelsToRows(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Custom { input: NodeId, f: ScalarFn },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Input(n) => write!(f, "Input({n})"),
            Op::Param(n) => write!(f, "Param({n})"),
            Op::MatMul(a, b) => write!(f, "MatMul({}, {})", a.0, b.0),
            Op::Conv3x3 { input, kernel } => write!(f, "Conv3x3({}, {})", input.0, kernel.0),
            Op::AddRowBias(a, b) => write!(f, "AddRowBias({}, {})", a.0, b.0),
            Op::AddChannelBias(a, b) => write!(f, "AddChannelBias({}, {})", a.0, b.0),
            Op::ChannelsToRows(a) => write!(f, "ChannelsToRows({})", a.0),
            Op::Add(a, b) => write!(f, "Add({}, {})", a.0, b.0),
            Op::Mul(a, b) => write!(f, "Mul({}, {})", a.0, b.0),
            Op::Scale(a, s) => write!(f, "Scale({}, {s})", a.0),
            Op::Relu(a) => write!(f, "Relu({})", a.0),
            Op::SoftmaxRows(a) => write!(f, "SoftmaxRows({})", a.0),
            Op::Log(a) => write!(f, "Log({})", a.0),
            Op::Sum(a) => write!(f, "Sum({})", a.0),
            Op::Mean(a) => write!(f, "Mean({})", a.0),
            Op::Custom { input, .. } => write!(f, "Custom({})", input.0),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Local derivative cached by custom scalar nodes.
    local_grad: Option<Tensor>,
}

/// Gradients of a scalar output with respect to every parameter, by name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn param_ids(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|id| self.value(*id))
    }

    /// Declares a non-differentiated leaf. Replaced by name in [`Graph::forward`].
    pub fn input(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.inputs.contains_key(name) || self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate leaf name {name:?}")));
        }
        let id = self.leaf(Op::Input(name.to_string()), value);
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declares a differentiated leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.inputs.contains_key(name) || self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate leaf name {name:?}")));
        }
        let id = self.leaf(Op::Param(name.to_string()), value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    fn leaf(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            local_grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let (value, local_grad) = self.eval(&op)?;
        self.nodes.push(Node {
            op,
            value,
            local_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    /// `input` is B×Cin×H×W, `kernel` is Cout×Cin×3×3.
    pub fn conv3x3(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.push(Op::Conv3x3 { input, kernel })
    }

    /// Adds a length-C bias to every row of an N×C tensor.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddRowBias(a, bias))
    }

    /// Adds a length-C bias to every channel plane of a B×C×H×W tensor.
    pub fn add_channel_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddChannelBias(a, bias))
    }

    /// B×C×H×W to (B·H·W)×C, one row per pixel.
    pub fn channels_to_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::ChannelsToRows(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SoftmaxRows(a))
    }

    /// Natural log of the input clamped to `[LOG_CLAMP, 1]`.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    /// Scalar node backed by a function that supplies its own derivative.
    pub fn custom(&mut self, input: NodeId, f: ScalarFn) -> Result<NodeId> {
        self.push(Op::Custom { input, f })
    }

    /// Replaces named inputs and re-evaluates every node.
    pub fn forward(&mut self, inputs: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in inputs {
            let id = *self
                .inputs
                .get(name)
                .ok_or_else(|| Error::shape(format!("graph has no input named {name:?}")))?;
            let old = &self.nodes[id.0].value;
            if old.shape() != value.shape() {
                return Err(Error::shape(format!(
                    "input {name:?} declared with shape {:?}, got {:?}",
                    old.shape(),
                    value.shape()
                )));
            }
            self.nodes[id.0].value = value.clone();
        }
        self.replay_from(0)
    }

    /// Overwrites a parameter value in place. Call [`Graph::forward`] afterwards.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = *self
            .params
            .get(name)
            .ok_or_else(|| Error::shape(format!("graph has no parameter named {name:?}")))?;
        if self.nodes[id.0].value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "shape mismatch for parameter {name:?}"
            )));
        }
        self.nodes[id.0].value = value;
        Ok(())
    }

    fn replay_from(&mut self, start: usize) -> Result<()> {
        for i in start..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input(_) | Op::Param(_)) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, local_grad) = self.eval(&op)?;
            self.nodes[i].value = value;
            self.nodes[i].local_grad = local_grad;
        }
        Ok(())
    }

    fn eval(&self, op: &Op) -> Result<(Tensor, Option<Tensor>)> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let out = match op {
            Op::Input(_) | Op::Param(_) => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => matmul(v(a), v(b))?,
            Op::Conv3x3 { input, kernel } => conv3x3(v(input), v(kernel))?,
            Op::AddRowBias(a, b) => add_row_bias(v(a), v(b))?,
            Op::AddChannelBias(a, b) => add_channel_bias(v(a), v(b))?,
            Op::ChannelsToRows(a) => channels_to_rows(v(a))?,
            Op::Add(a, b) => zip_same(v(a), v(b), |x, y| x + y)?,
            Op::Mul(a, b) => zip_same(v(a), v(b), |x, y| x * y)?,
            Op::Scale(a, s) => map(v(a), |x| x * s),
            Op::Relu(a) => map(v(a), |x| if x > 0.0 { x } else { 0.0 }),
            Op::SoftmaxRows(a) => softmax_rows(v(a))?,
            Op::Log(a) => map(v(a), |x| x.clamp(LOG_CLAMP, 1.0).ln()),
            Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
            Op::Mean(a) => {
                let t = v(a);
                if t.is_empty() {
                    return Err(Error::shape("mean of an empty tensor"));
                }
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Op::Custom { input, f } => {
                let x = v(input);
                let (value, grad) = f(x)?;
                if grad.shape() != x.shape() {
                    return Err(Error::shape(
                        "custom node gradient shape differs from input",
                    ));
                }
                return Ok((Tensor::scalar(value), Some(grad)));
            }
        };
        Ok((out, None))
    }

    /// Gradient of the scalar `output` with respect to every parameter.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, node {} has shape {:?}",
                output.0,
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let v = |id: &NodeId| &self.nodes[id.0].value;
            match &node.op {
                Op::Input(_) => {}
                Op::Param(_) => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = matmul_backward(v(a), v(b), &g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Conv3x3 { input, kernel } => {
                    let (gi, gk) = conv3x3_backward(v(input), v(kernel), &g);
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *kernel, gk);
                }
                Op::AddRowBias(a, b) => {
                    let c = v(b).len();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c.max(1)) {
                        for (acc, x) in gb.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::new(vec![c], gb)?);
                    accumulate(&mut grads, *a, g);
                }
                Op::AddChannelBias(a, b) => {
                    let (batch, ch, h, w) = g.dims4()?;
                    let mut gb = vec![0.0; ch];
                    for bi in 0..batch {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            let base = (bi * ch + c) * h * w;
                            *acc += g.data()[base..base + h * w].iter().sum::<f64>();
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::new(vec![ch], gb)?);
                    accumulate(&mut grads, *a, g);
                }
                Op::ChannelsToRows(a) => {
                    let shape = v(a).shape().to_vec();
                    accumulate(&mut grads, *a, rows_to_channels(&g, &shape)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_same(&g, v(b), |x, y| x * y)?;
                    let gb = zip_same(&g, v(a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, map(&g, |x| x * s)),
                Op::Relu(a) => {
                    let ga = zip_same(&g, v(a), |gx, x| if x > 0.0 { gx } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let (_, c) = p.dims2()?;
                    let mut ga = vec![0.0; p.len()];
                    for ((gr, pr), out) in g
                        .data()
                        .chunks(c)
                        .zip(p.data().chunks(c))
                        .zip(ga.chunks_mut(c))
                    {
                        let dot: f64 = gr.iter().zip(pr).map(|(x, y)| x * y).sum();
                        for ((o, gx), px) in out.iter_mut().zip(gr).zip(pr) {
                            *o = px * (gx - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(p.shape().to_vec(), ga)?);
                }
                Op::Log(a) => {
                    let ga = zip_same(&g, v(a), |gx, x| {
                        if (LOG_CLAMP..=1.0).contains(&x) {
                            gx / x
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(v(a).shape(), s));
                }
                Op::Mean(a) => {
                    let t = v(a);
                    let s = g.data()[0] / t.len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(t.shape(), s));
                }
                Op::Custom { input, .. } => {
                    let local = node
                        .local_grad
                        .as_ref()
                        .expect("custom nodes always cache their derivative");
                    accumulate(&mut grads, *input, map(local, |x| x * g.data()[0]));
                }
            }
        }

        let mut out = Gradients::new();
        for (name, id) in &self.params {
            let g = match grads.get_mut(id.0).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros(self.value(*id).shape()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "elementwise op on shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!("matmul {n}x{k} by {k2}x{m}")));
    }
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = ad[i * k + p];
            for (o, y) in row.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += x * y;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (n, k) = a.dims2().expect("checked in forward");
    let (_, m) = b.dims2().expect("checked in forward");
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut ga = vec![0.0; n * k];
    let mut gb = vec![0.0; k * m];
    for i in 0..n {
        let grow = &gd[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &bd[p * m..(p + 1) * m];
            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            let x = ad[i * k + p];
            for (o, gx) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                *o += x * gx;
            }
        }
    }
    (
        Tensor::new(vec![n, k], ga).expect("shape"),
        Tensor::new(vec![k, m], gb).expect("shape"),
    )
}

/// Valid output range along one axis for kernel offset `k` in `0..3`.
fn tap_range(k: usize, len: usize) -> (usize, usize) {
    // output index y reads input y + k - 1
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { len.saturating_sub(1) } else { len };
    (lo, hi)
}

fn conv3x3(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (batch, cin, h, w) = input.dims4()?;
    let (cout, kcin, kh, kw) = kernel.dims4()?;
    if kcin != cin || kh != 3 || kw != 3 {
        return Err(Error::shape(format!(
            "conv3x3 kernel {:?} does not fit input {:?}",
            kernel.shape(),
            input.shape()
        )));
    }
    let mut out = vec![0.0; batch * cout * h * w];
    let (xd, kd) = (input.data(), kernel.data());
    for b in 0..batch {
        for o in 0..cout {
            let obase = (b * cout + o) * h * w;
            for i in 0..cin {
                let ibase = (b * cin + i) * h * w;
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ky, h);
                    for kx in 0..3 {
                        let (x0, x1) = tap_range(kx, w);
                        let wgt = kd[((o * cin + i) * 3 + ky) * 3 + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        for y in y0..y1 {
                            let src = ibase + (y + ky - 1) * w;
                            let dst = obase + y * w;
                            for x in x0..x1 {
                                out[dst + x] += wgt * xd[src + x + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, cout, h, w], out)
}

fn conv3x3_backward(input: &Tensor, kernel: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (batch, cin, h, w) = input.dims4().expect("checked in forward");
    let (cout, _, _, _) = kernel.dims4().expect("checked in forward");
    let (xd, kd, gd) = (input.data(), kernel.data(), g.data());
    let mut gi = vec![0.0; xd.len()];
    let mut gk = vec![0.0; kd.len()];
    for b in 0..batch {
        for o in 0..cout {
            let obase = (b * cout + o) * h * w;
            for i in 0..cin {
                let ibase = (b * cin + i) * h * w;
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ky, h);
                    for kx in 0..3 {
                        let (x0, x1) = tap_range(kx, w);
                        let kidx = ((o * cin + i) * 3 + ky) * 3 + kx;
                        let wgt = kd[kidx];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let src = ibase + (y + ky - 1) * w;
                            let dst = obase + y * w;
                            for x in x0..x1 {
                                let go = gd[dst + x];
                                acc += go * xd[src + x + kx - 1];
                                gi[src + x + kx - 1] += wgt * go;
                            }
                        }
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gi).expect("shape"),
        Tensor::new(kernel.shape().to_vec(), gk).expect("shape"),
    )
}

fn add_row_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, c) = a.dims2()?;
    if bias.shape() != [c] {
        return Err(Error::shape(format!(
            "row bias {:?} for {:?}",
            bias.shape(),
            a.shape()
        )));
    }
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        for (x, b) in row.iter_mut().zip(bias.data()) {
            *x += b;
        }
    }
    Ok(out)
}

fn add_channel_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, ch, h, w) = a.dims4()?;
    if bias.shape() != [ch] {
        return Err(Error::shape(format!(
            "channel bias {:?} for {:?}",
            bias.shape(),
            a.shape()
        )));
    }
    let mut out = a.clone();
    let data = out.data_mut();
    for b in 0..batch {
        for c in 0..ch {
            let base = (b * ch + c) * h * w;
            let bv = bias.data()[c];
            for x in &mut data[base..base + h * w] {
                *x += bv;
            }
        }
    }
    Ok(out)
}

fn channels_to_rows(a: &Tensor) -> Result<Tensor> {
    let (batch, ch, h, w) = a.dims4()?;
    let hw = h * w;
    let mut out = vec![0.0; a.len()];
    for b in 0..batch {
        for c in 0..ch {
            let src = &a.data()[(b * ch + c) * hw..(b * ch + c + 1) * hw];
            for (p, &x) in src.iter().enumerate() {
                out[(b * hw + p) * ch + c] = x;
            }
        }
    }
    Tensor::new(vec![batch * hw, ch], out)
}

fn rows_to_channels(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let [batch, ch, h, w] = shape[..] else {
        return Err(Error::shape("rows_to_channels needs a 4D target shape"));
    };
    let hw = h * w;
    let mut out = vec![0.0; g.len()];
    for b in 0..batch {
        for c in 0..ch {
            for p in 0..hw {
                out[(b * ch + c) * hw + p] = g.data()[(b * hw + p) * ch + c];
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Row-wise softmax of an N×C tensor with per-row max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (_, c) = logits.dims2()?;
    if c < 2 {
        return Err(Error::shape(format!(
            "softmax needs at least 2 columns, got {c}"
        )));
    }
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    Ok(out)
}

/// Central-difference gradient check of `output` against [`Graph::backward`].
///
/// For each parameter tensor the error is
/// `max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, 1e-8)`;
/// the result is the largest such error over all parameters. The graph is
/// left evaluated at the unperturbed parameters.
pub fn finite_diff_check(
    graph: &mut Graph,
    output: NodeId,
    inputs: &BTreeMap<String, Tensor>,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::domain(format!(
            "epsilon {epsilon} outside (0, 1e-3]"
        )));
    }
    graph.forward(inputs)?;
    let analytic = graph.backward(output)?;
    let numeric = numeric_gradients(graph, output, epsilon)?;
    Ok(analytic
        .iter()
        .map(|(name, a)| relative_error(a, &numeric[name]))
        .fold(0.0, f64::max))
}

/// Central differences of `output` with respect to every parameter element.
pub fn numeric_gradients(graph: &mut Graph, output: NodeId, epsilon: f64) -> Result<Gradients> {
    let params: Vec<(String, NodeId)> = graph.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
    let mut out = Gradients::new();
    for (name, id) in params {
        let len = graph.nodes[id.0].value.len();
        let mut g = Tensor::zeros(graph.nodes[id.0].value.shape());
        for j in 0..len {
            let orig = graph.nodes[id.0].value.data()[j];
            graph.nodes[id.0].value.data_mut()[j] = orig + epsilon;
            graph.replay_from(id.0 + 1)?;
            let plus = graph.value(output).item()?;
            graph.nodes[id.0].value.data_mut()[j] = orig - epsilon;
            graph.replay_from(id.0 + 1)?;
            let minus = graph.value(output).item()?;
            graph.nodes[id.0].value.data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * epsilon);
        }
        out.insert(name, g);
    }
    graph.replay_from(0)?;
    Ok(out)
}

/// `max |a - n| / max(max |n|, 1e-8)` over one tensor pair.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    diff / numeric.max_abs().max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_known_rows() {
        let p = softmax_rows(&t(&[2, 2], &[0.0, 0.0, 2f64.ln(), 0.0])).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
        assert!((p.row(1)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.row(1)[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let a = softmax_rows(&t(&[1, 3], &[0.3, -1.2, 2.0])).unwrap();
        let b = softmax_rows(&t(&[1, 3], &[100.3, 98.8, 102.0])).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_shapes() {
        assert!(matches!(
            softmax_rows(&t(&[3], &[1.0, 2.0, 3.0])),
            Err(Error::Shape(_))
        ));
        assert!(softmax_rows(&t(&[2, 1], &[1.0, 2.0])).is_err());
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g.input("eye", t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let x = g
            .param("x", t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let img: Vec<f64> = (0..20).map(|i| i as f64 * 0.5 - 3.0).collect();
        let mut g = Graph::new();
        let x = g.input("x", t(&[1, 1, 4, 5], &img)).unwrap();
        let k = g.param("k", t(&[1, 1, 3, 3], &k)).unwrap();
        let y = g.conv3x3(x, k).unwrap();
        assert_eq!(g.value(y).data(), &img[..]);
    }

    #[test]
    fn conv_ones_kernel_counts_window() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::full(&[1, 1, 4, 4], 1.0)).unwrap();
        let k = g.param("k", Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = g.conv3x3(x, k).unwrap();
        let out = g.value(y).data();
        assert_eq!(out[5], 9.0);
        assert_eq!(out[6], 9.0);
        assert_eq!(out[10], 9.0);
        // corners see a 2x2 window, edges 2x3
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn conv_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let k = g.param("k", Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        assert!(matches!(g.conv3x3(x, k), Err(Error::Shape(_))));
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap()["x"].data(), &[1.0; 4]);
    }

    #[test]
    fn mean_relu_subgradient() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[2], &[-1.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        let m = g.mean(r).unwrap();
        assert_eq!(g.backward(m).unwrap()["x"].data(), &[0.0, 0.5]);
        let mut g = Graph::new();
        let x = g.param("x", t(&[1], &[0.0])).unwrap();
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        assert_eq!(g.backward(s).unwrap()["x"].data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_replays_new_inputs() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[2], &[1.0, 2.0])).unwrap();
        let w = g.param("w", t(&[2], &[3.0, 4.0])).unwrap();
        let y = g.mul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.value(s).item().unwrap(), 11.0);
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), t(&[2], &[0.0, 1.0]));
        g.forward(&inputs).unwrap();
        assert_eq!(g.value(s).item().unwrap(), 4.0);
        inputs.insert("x".to_string(), t(&[3], &[0.0, 1.0, 2.0]));
        assert!(matches!(g.forward(&inputs), Err(Error::Shape(_))));
    }

    #[test]
    fn fd_check_linear_and_quadratic() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[4], &[0.1, -0.7, 2.0, 3.3])).unwrap();
        let s = g.sum(x).unwrap();
        assert!(finite_diff_check(&mut g, s, &BTreeMap::new(), 1e-5).unwrap() <= 1e-10);

        let mut g = Graph::new();
        let x = g.param("x", t(&[4], &[0.1, -0.7, 2.0, 3.3])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        assert!(finite_diff_check(&mut g, s, &BTreeMap::new(), 1e-5).unwrap() <= 1e-7);
        assert!(finite_diff_check(&mut g, s, &BTreeMap::new(), 2e-3).is_err());
        assert!(finite_diff_check(&mut g, s, &BTreeMap::new(), 0.0).is_err());
    }

    /// Builds one composition touching every op in the catalog.
    fn catalog_graph(rng: &mut ChaCha8Rng) -> (Graph, NodeId) {
        let mut r = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let mut g = Graph::new();
        let img = g.input("img", r(&[1, 2, 3, 4])).unwrap();
        let k = g.param("k", r(&[3, 2, 3, 3])).unwrap();
        let kb = g.param("kb", r(&[3])).unwrap();
        let w = g.param("w", r(&[3, 3])).unwrap();
        let b = g.param("b", r(&[3])).unwrap();
        let other = g.param("other", r(&[12, 3])).unwrap();

        let c = g.conv3x3(img, k).unwrap();
        let c = g.add_channel_bias(c, kb).unwrap();
        let h = g.relu(c).unwrap();
        let rows = g.channels_to_rows(h).unwrap();
        let z = g.matmul(rows, w).unwrap();
        let z = g.add_row_bias(z, b).unwrap();
        let z = g.add(z, other).unwrap();
        let z = g.scale(z, 1.7).unwrap();
        let p = g.softmax_rows(z).unwrap();
        let lp = g.log(p).unwrap();
        let plp = g.mul(p, lp).unwrap();
        let ent = g.mean(plp).unwrap();
        let sq = g.mul(p, p).unwrap();
        let ms = g.sum(sq).unwrap();
        let out = g.add(ent, ms).unwrap();
        (g, out)
    }

    #[test]
    fn fd_check_catalog_sweep() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut g, out) = catalog_graph(&mut rng);
            let err = finite_diff_check(&mut g, out, &BTreeMap::new(), 1e-5).unwrap();
            assert!(err <= 1e-6, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (g, out) = catalog_graph(&mut rng);
        let a = g.backward(out).unwrap();
        let b = g.backward(out).unwrap();
        for (name, ga) in &a {
            let bits_a: Vec<u64> = ga.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b[name].data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn custom_node_chains_through_softmax() {
        let mut g = Graph::new();
        let z = g
            .param("z", t(&[2, 3], &[0.2, -0.4, 1.0, 0.0, 0.3, -0.1]))
            .unwrap();
        let p = g.softmax_rows(z).unwrap();
        let f: ScalarFn = Arc::new(|x: &Tensor| {
            let v = x.data().iter().map(|a| a * a).sum::<f64>();
            let grad = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|a| 2.0 * a).collect(),
            )?;
            Ok((v, grad))
        });
        let l = g.custom(p, f).unwrap();
        let err = finite_diff_check(&mut g, l, &BTreeMap::new(), 1e-5).unwrap();
        assert!(err <= 1e-7, "{err}");
    }
}
