//! Toy models on top of the autodiff graph.
//!
//! * [`MlpSpec`]: relu MLP classifier for point-cloud experiments.
//! * [`SegNetSpec`]: full-resolution conv3x3 trunk with a low-level head fed
//!   from an intermediate trunk layer and a final head on the last layer.
//!
//! Parameters live in a name-ordered map so iteration order (and therefore
//! initialization, checkpoints and optimizer updates) is deterministic.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::guidance::MultiLevelOutput;
use crate::losses::ProbMap;
use crate::tensor::Tensor;

pub type Params = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegNetSpec {
    pub in_channels: usize,
    pub trunk_channels: usize,
    pub trunk_depth: usize,
    pub num_classes: usize,
    /// Number of trunk layers feeding the low-level head.
    pub tap_depth: usize,
    #[serde(default)]
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    Mlp(MlpSpec),
    Seg(SegNetSpec),
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::config("mlp needs at least one hidden layer"));
        }
        if self.input_dim == 0 || self.num_classes < 2 || self.hidden_dims.contains(&0) {
            return Err(Error::config(
                "mlp dimensions must be positive and num_classes >= 2",
            ));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Logits node for an N×input_dim input node.
    pub fn logits(&self, g: &mut Graph, params: &BoundParams, x: NodeId) -> Result<NodeId> {
        let (_, d) = g.value(x).dims2()?;
        if d != self.input_dim {
            return Err(Error::shape(format!(
                "mlp expects {} input features, got {d}",
                self.input_dim
            )));
        }
        let layers = self.layer_dims().len();
        let mut h = x;
        for i in 0..layers {
            h = g.matmul(h, params.get(&format!("fc{i}.weight"))?)?;
            h = g.add_row_bias(h, params.get(&format!("fc{i}.bias"))?)?;
            if i + 1 < layers {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

impl SegNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.trunk_channels == 0 || self.num_classes < 2 {
            return Err(Error::config(
                "segnet channel counts must be positive and num_classes >= 2",
            ));
        }
        if !(1 <= self.tap_depth && self.tap_depth < self.trunk_depth) {
            return Err(Error::config(format!(
                "tap_depth {} must satisfy 1 <= tap_depth < trunk_depth ({})",
                self.tap_depth, self.trunk_depth
            )));
        }
        Ok(())
    }

    /// Per-pixel logits rows `(final, low)` for a B×C_in×H×W input node.
    pub fn logits(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "segnet expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h < 3 || w < 3 {
            return Err(Error::shape(format!(
                "segnet needs spatial dims >= 3, got {h}x{w}"
            )));
        }
        let mut feat = x;
        let mut tap = None;
        for i in 0..self.trunk_depth {
            feat = g.conv3x3(feat, params.get(&format!("trunk{i}.weight"))?)?;
            feat = g.add_channel_bias(feat, params.get(&format!("trunk{i}.bias"))?)?;
            feat = g.relu(feat)?;
            if i + 1 == self.tap_depth {
                tap = Some(feat);
            }
        }
        let tap = tap.expect("tap_depth < trunk_depth");
        let head = |g: &mut Graph, name: &str, input: NodeId| -> Result<NodeId> {
            let z = g.conv3x3(input, params.get(&format!("{name}.weight"))?)?;
            let z = g.add_channel_bias(z, params.get(&format!("{name}.bias"))?)?;
            g.channels_to_rows(z)
        };
        let final_logits = head(g, "final", feat)?;
        let low_logits = head(g, "low", tap)?;
        Ok((final_logits, low_logits))
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp(s) => s.validate(),
            ModelSpec::Seg(s) => s.validate(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::Mlp(s) => s.num_classes,
            ModelSpec::Seg(s) => s.num_classes,
        }
    }

    pub fn init_seed(&self) -> u64 {
        match self {
            ModelSpec::Mlp(s) => s.init_seed,
            ModelSpec::Seg(s) => s.init_seed,
        }
    }

    /// Parameter names and shapes with their fan-in; biases report fan-in 0.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        match self {
            ModelSpec::Mlp(s) => {
                for (i, (din, dout)) in s.layer_dims().into_iter().enumerate() {
                    out.push((format!("fc{i}.weight"), vec![din, dout], din));
                    out.push((format!("fc{i}.bias"), vec![dout], 0));
                }
            }
            ModelSpec::Seg(s) => {
                let mut cin = s.in_channels;
                for i in 0..s.trunk_depth {
                    let ch = s.trunk_channels;
                    out.push((format!("trunk{i}.weight"), vec![ch, cin, 3, 3], cin * 9));
                    out.push((format!("trunk{i}.bias"), vec![ch], 0));
                    cin = ch;
                }
                for head in ["low", "final"] {
                    let ch = s.trunk_channels;
                    out.push((
                        format!("{head}.weight"),
                        vec![s.num_classes, ch, 3, 3],
                        ch * 9,
                    ));
                    out.push((format!("{head}.bias"), vec![s.num_classes], 0));
                }
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)), biases zero.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let t = if fan_in == 0 {
                    Tensor::zeros(&shape)
                } else {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("layout shape")
                };
                (name, t)
            })
            .collect()
    }

    pub fn check_params(&self, params: &Params) -> Result<()> {
        let layout = self.layout();
        if layout.len() != params.len() {
            return Err(Error::shape(format!(
                "model expects {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in layout {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::shape(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::shape(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    /// Recovers the architecture from parameter names and shapes.
    pub fn infer(params: &Params) -> Result<ModelSpec> {
        let dims = |name: &str| -> Result<&[usize]> {
            params
                .get(name)
                .map(Tensor::shape)
                .ok_or_else(|| Error::config(format!("checkpoint lacks {name}")))
        };
        if params.contains_key("fc0.weight") {
            let layers = (0..)
                .take_while(|i| params.contains_key(&format!("fc{i}.weight")))
                .count();
            let first = dims("fc0.weight")?;
            let mut hidden = Vec::new();
            for i in 0..layers - 1 {
                hidden.push(dims(&format!("fc{i}.weight"))?[1]);
            }
            let num_classes = dims(&format!("fc{}.weight", layers - 1))?[1];
            let spec = ModelSpec::Mlp(MlpSpec {
                input_dim: first[0],
                hidden_dims: hidden,
                num_classes,
                init_seed: 0,
            });
            spec.check_params(params)
                .map_err(|e| Error::config(e.to_string()))?;
            Ok(spec)
        } else if params.contains_key("trunk0.weight") {
            let depth = (0..)
                .take_while(|i| params.contains_key(&format!("trunk{i}.weight")))
                .count();
            let t0 = dims("trunk0.weight")?;
            let low = dims("low.weight")?;
            // tap depth is not recoverable from shapes; checkpoints carry it as metadata
            let tap = params
                .get("meta.tap_depth")
                .and_then(|t| t.data().first().copied())
                .ok_or_else(|| Error::config("checkpoint lacks meta.tap_depth"))?;
            let spec = SegNetSpec {
                in_channels: t0[1],
                trunk_channels: t0[0],
                trunk_depth: depth,
                num_classes: low[0],
                tap_depth: tap as usize,
                init_seed: 0,
            };
            spec.validate()?;
            let spec = ModelSpec::Seg(spec);
            let mut core = params.clone();
            core.remove("meta.tap_depth");
            spec.check_params(&core)
                .map_err(|e| Error::config(e.to_string()))?;
            Ok(spec)
        } else {
            Err(Error::config("checkpoint matches no known architecture"))
        }
    }

    /// Non-trainable entries stored next to the weights in checkpoints.
    pub fn metadata(&self) -> Params {
        let mut meta = Params::new();
        if let ModelSpec::Seg(s) = self {
            meta.insert(
                "meta.tap_depth".to_string(),
                Tensor::new(vec![1], vec![s.tap_depth as f64]).expect("shape"),
            );
        }
        meta
    }
}

/// Parameter leaves registered in one graph.
#[derive(Clone, Debug, Default)]
pub struct BoundParams(BTreeMap<String, NodeId>);

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::shape(format!("parameter {name} is not bound")))
    }
}

pub fn bind_params(g: &mut Graph, params: &Params) -> Result<BoundParams> {
    let mut out = BTreeMap::new();
    for (name, t) in params {
        out.insert(name.clone(), g.param(name, t.clone())?);
    }
    Ok(BoundParams(out))
}

pub fn mlp_forward(spec: &MlpSpec, params: &Params, x: &Tensor) -> Result<ProbMap> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params)?;
    let xi = g.input("x", x.clone())?;
    let z = spec.logits(&mut g, &bound, xi)?;
    let p = g.softmax_rows(z)?;
    ProbMap::from_tensor(g.value(p))
}

/// Both heads' per-pixel probabilities, rows ordered image-major then raster.
pub fn seg_forward(spec: &SegNetSpec, params: &Params, x: &Tensor) -> Result<MultiLevelOutput> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params)?;
    let xi = g.input("x", x.clone())?;
    let (zf, zl) = spec.logits(&mut g, &bound, xi)?;
    let pf = g.softmax_rows(zf)?;
    let pl = g.softmax_rows(zl)?;
    MultiLevelOutput::new(
        ProbMap::from_tensor(g.value(pf))?,
        ProbMap::from_tensor(g.value(pl))?,
    )
}

const CKPT_MAGIC: &[u8; 4] = b"MSQP";
const CKPT_VERSION: u32 = 1;

/// Little-endian checkpoint: magic, version, count, then per tensor
/// `u16 name length, name, u8 rank, u32 dims, f64 data`.
pub fn encode_checkpoint(params: &Params) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        let len =
            u16::try_from(name.len()).map_err(|_| Error::config("parameter name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::config("tensor rank too large"))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated: wanted {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Params> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != CKPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad checkpoint magic".into(),
        });
    }
    let at = cur.pos as u64;
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format {
            offset: at,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = cur.u32()?;
    let mut params = Params::new();
    for _ in 0..count {
        let at = cur.pos as u64;
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format {
                offset: at,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = cur.u8()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        params.insert(name, Tensor::new(shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            message: "trailing bytes after last tensor".into(),
        });
    }
    Ok(params)
}

pub fn write_checkpoint(params: &Params, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Params> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::losses::{loss_node, max_squares_loss};

    fn mlp() -> MlpSpec {
        MlpSpec {
            input_dim: 2,
            hidden_dims: vec![5, 4],
            num_classes: 3,
            init_seed: 1,
        }
    }

    fn seg() -> SegNetSpec {
        SegNetSpec {
            in_channels: 3,
            trunk_channels: 4,
            trunk_depth: 3,
            num_classes: 3,
            tap_depth: 1,
            init_seed: 2,
        }
    }

    fn zeroed(p: &Params) -> Params {
        p.iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect()
    }

    #[test]
    fn spec_validation() {
        let mut s = mlp();
        s.hidden_dims.clear();
        assert!(s.validate().is_err());
        let mut s = seg();
        s.tap_depth = 3;
        assert!(s.validate().is_err());
        s.tap_depth = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_weights_give_uniform() {
        let spec = ModelSpec::Mlp(mlp());
        let params = zeroed(&spec.init_params(0));
        let x = Tensor::new(vec![2, 2], vec![1.0, -3.0, 0.5, 2.0]).unwrap();
        let p = mlp_forward(&mlp(), &params, &x).unwrap();
        assert!(p.values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let spec = ModelSpec::Seg(seg());
        let params = zeroed(&spec.init_params(0));
        let x = Tensor::full(&[1, 3, 4, 5], 0.7);
        let out = seg_forward(&seg(), &params, &x).unwrap();
        assert_eq!(out.final_map.n(), 20);
        for v in out.final_map.values().iter().chain(out.low_map.values()) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_batch() {
        let params = ModelSpec::Mlp(mlp()).init_params(0);
        let p = mlp_forward(&mlp(), &params, &Tensor::zeros(&[0, 2])).unwrap();
        assert_eq!(p.n(), 0);
    }

    #[test]
    fn input_width_checked() {
        let params = ModelSpec::Mlp(mlp()).init_params(0);
        assert!(matches!(
            mlp_forward(&mlp(), &params, &Tensor::zeros(&[1, 3])),
            Err(Error::Shape(_))
        ));
        let params = ModelSpec::Seg(seg()).init_params(0);
        assert!(seg_forward(&seg(), &params, &Tensor::zeros(&[1, 3, 2, 5])).is_err());
        assert!(seg_forward(&seg(), &params, &Tensor::zeros(&[1, 2, 4, 4])).is_err());
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let spec = ModelSpec::Seg(seg());
        let a = spec.init_params(5);
        assert_eq!(a, spec.init_params(5));
        assert_ne!(a, spec.init_params(6));
        for (name, t) in &a {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let fan_in = t.len() / t.shape()[0];
                let bound = (1.0 / fan_in as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound));
            }
        }
        let spec = ModelSpec::Mlp(mlp());
        let p = spec.init_params(0);
        let bound = (1.0f64 / 2.0).sqrt();
        assert!(p["fc0.weight"].data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = seg();
        let params = ModelSpec::Seg(spec.clone()).init_params(3);
        let x = Tensor::new(
            vec![1, 3, 4, 4],
            (0..48).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let a = seg_forward(&spec, &params, &x).unwrap();
        let b = seg_forward(&spec, &params, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn segnet_gradient_check() {
        let spec = seg();
        let params = ModelSpec::Seg(spec.clone()).init_params(9);
        let x = Tensor::new(
            vec![1, 3, 4, 4],
            (0..48).map(|i| (i as f64 * 0.91).cos()).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &params).unwrap();
        let xi = g.input("x", x).unwrap();
        let (zf, zl) = spec.logits(&mut g, &bound, xi).unwrap();
        let pf = g.softmax_rows(zf).unwrap();
        let pl = g.softmax_rows(zl).unwrap();
        let lf = loss_node(&mut g, pf, 0, |p, _| Ok(max_squares_loss(p))).unwrap();
        let ll = loss_node(&mut g, pl, 0, |p, _| Ok(crate::losses::entropy_loss(p))).unwrap();
        let out = g.add(lf, ll).unwrap();
        let err = finite_diff_check(&mut g, out, &BTreeMap::new(), 1e-6).unwrap();
        assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn checkpoint_roundtrip_and_inference() {
        for spec in [ModelSpec::Mlp(mlp()), ModelSpec::Seg(seg())] {
            let mut params = spec.init_params(4);
            params.extend(spec.metadata());
            let bytes = encode_checkpoint(&params).unwrap();
            assert_eq!(&bytes[..4], b"MSQP");
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back, params);
            let inferred = ModelSpec::infer(&back).unwrap();
            assert_eq!(inferred.num_classes(), spec.num_classes());
            match (&inferred, &spec) {
                (ModelSpec::Mlp(a), ModelSpec::Mlp(b)) => assert_eq!(a.hidden_dims, b.hidden_dims),
                (ModelSpec::Seg(a), ModelSpec::Seg(b)) => {
                    assert_eq!(a.tap_depth, b.tap_depth);
                    assert_eq!(a.trunk_depth, b.trunk_depth);
                }
                _ => panic!("architecture changed"),
            }
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let params = ModelSpec::Mlp(mlp()).init_params(4);
        let mut bytes = encode_checkpoint(&params).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_checkpoint(truncated),
            Err(Error::Format { .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
