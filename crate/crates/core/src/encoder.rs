//! Fully-convolutional encoder.
//!
//! `conv → relu` blocks with same-padding and stride 1, a global mean over
//! time, and a dense map to the embedding width. An optional
//! `dense → relu → dense` projection head is applied to the contrastive
//! loss only; evaluation always reads the pre-head embedding.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Padding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 8] = b"DICOTM1\0";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub channels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub embed_dim: usize,
    /// Hidden width of the projection head, if any.
    pub projection: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            channels: vec![32, 64, 128],
            kernel_sizes: vec![8, 5, 3],
            embed_dim: 64,
            projection: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.kernel_sizes.len() {
            return Err(Error::Config(format!(
                "{} channel counts but {} kernel sizes",
                self.channels.len(),
                self.kernel_sizes.len()
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("encoder needs at least one conv layer".into()));
        }
        if self.input_channels == 0
            || self.embed_dim == 0
            || self.channels.contains(&0)
            || self.kernel_sizes.contains(&0)
            || self.projection == Some(0)
        {
            return Err(Error::Config("encoder extents must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out×in`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `out×in×kernel`.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Encoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub convs: Vec<ConvLayer>,
    pub embed: Linear,
    pub head: Option<(Linear, Linear)>,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).unwrap()
}

/// Scale applied to the layer that produces the contrasted embedding, so
/// that initial logits are small and the initial loss sits near `ln k`.
pub const OUTPUT_INIT_GAIN: f64 = 0.07;

/// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`) and zero biases;
/// the output layer is further scaled by [`OUTPUT_INIT_GAIN`].
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c_in = config.input_channels;
    let mut convs = Vec::with_capacity(config.channels.len());
    for (&c_out, &k) in config.channels.iter().zip(&config.kernel_sizes) {
        convs.push(ConvLayer {
            weight: uniform(&[c_out, c_in, k], c_in * k, &mut rng),
            bias: Tensor::zeros(&[c_out]),
        });
        c_in = c_out;
    }
    let f = config.embed_dim;
    let mut linear = |out: usize, inp: usize| Linear {
        weight: uniform(&[out, inp], inp, &mut rng),
        bias: Tensor::zeros(&[out]),
    };
    let mut embed = linear(f, c_in);
    let mut head = config.projection.map(|h| (linear(h, f), linear(f, h)));
    let last = match head.as_mut() {
        Some((_, out)) => &mut out.weight,
        None => &mut embed.weight,
    };
    last.data_mut().iter_mut().for_each(|w| *w *= OUTPUT_INIT_GAIN);
    Ok(ModelParams { convs, embed, head })
}

impl ModelParams {
    /// The architecture these weights describe.
    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            input_channels: self.convs[0].weight.shape()[1],
            channels: self.convs.iter().map(|c| c.weight.shape()[0]).collect(),
            kernel_sizes: self.convs.iter().map(|c| c.weight.shape()[2]).collect(),
            embed_dim: self.embed.weight.shape()[0],
            projection: self.head.as_ref().map(|(h, _)| h.weight.shape()[0]),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.weight.shape()[0]
    }

    /// Every tensor with its stable name, in serialization order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &c.weight));
            out.push((format!("conv{i}.bias"), &c.bias));
        }
        out.push(("embed.weight".into(), &self.embed.weight));
        out.push(("embed.bias".into(), &self.embed.bias));
        if let Some((a, b)) = &self.head {
            out.push(("head.0.weight".into(), &a.weight));
            out.push(("head.0.bias".into(), &a.bias));
            out.push(("head.1.weight".into(), &b.weight));
            out.push(("head.1.bias".into(), &b.bias));
        }
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.embed.weight);
        out.push(&mut self.embed.bias);
        if let Some((a, b)) = &mut self.head {
            out.extend([&mut a.weight, &mut a.bias, &mut b.weight, &mut b.bias]);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Rebuilds parameters from named tensors, checking that the shapes
    /// form a consistent encoder.
    pub fn from_named(mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Tensor> {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            Ok(tensors.swap_remove(pos).1)
        };
        let mut convs = Vec::new();
        let mut i = 0;
        loop {
            let name = format!("conv{i}.weight");
            let weight = match take(&name) {
                Ok(w) => w,
                Err(_) if i > 0 => break,
                Err(e) => return Err(e),
            };
            let bias = take(&format!("conv{i}.bias"))?;
            convs.push(ConvLayer { weight, bias });
            i += 1;
        }
        let embed = Linear {
            weight: take("embed.weight")?,
            bias: take("embed.bias")?,
        };
        let head = match take("head.0.weight") {
            Ok(w0) => Some((
                Linear {
                    weight: w0,
                    bias: take("head.0.bias")?,
                },
                Linear {
                    weight: take("head.1.weight")?,
                    bias: take("head.1.bias")?,
                },
            )),
            Err(_) => None,
        };
        if let Some((name, _)) = tensors.first() {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        }
        let params = Self { convs, embed, head };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        let bad = |what: String| Error::Format(format!("inconsistent model: {what}"));
        let mut c_in = None;
        for (i, c) in self.convs.iter().enumerate() {
            let &[o, ci, _] = c.weight.shape() else {
                return Err(bad(format!("conv{i}.weight rank")));
            };
            if c_in.is_some_and(|prev| prev != ci) || c.bias.shape() != [o] {
                return Err(bad(format!("conv{i} shapes")));
            }
            c_in = Some(o);
        }
        let check_linear = |l: &Linear, inp: usize, name: &str| -> Result<usize> {
            match l.weight.shape() {
                &[o, i] if i == inp && l.bias.shape() == [o] => Ok(o),
                _ => Err(bad(format!("{name} shapes"))),
            }
        };
        let f = check_linear(&self.embed, c_in.unwrap(), "embed")?;
        if let Some((a, b)) = &self.head {
            let h = check_linear(a, f, "head.0")?;
            if check_linear(b, h, "head.1")? != f {
                return Err(bad("head output width".into()));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Parameters registered on a graph, in [`ModelParams::named`] order.
#[derive(Clone, Debug)]
pub struct ParamNodes(pub Vec<NodeId>);

impl ParamNodes {
    pub fn register(graph: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        Self(
            params
                .tensors()
                .into_iter()
                .map(|t| {
                    if trainable {
                        graph.param(t.clone())
                    } else {
                        graph.constant(t.clone())
                    }
                })
                .collect(),
        )
    }
}

/// Records the encoder on `graph` for an `N×L×D` input node.
///
/// Returns the `N×F` embedding; with `with_head` the projection head (if
/// present) is applied on top.
pub fn forward(
    graph: &mut Graph,
    nodes: &ParamNodes,
    n_convs: usize,
    input: NodeId,
    with_head: bool,
) -> Result<NodeId> {
    let ids = &nodes.0;
    let mut h = input;
    for i in 0..n_convs {
        h = graph.conv1d(h, ids[2 * i], Padding::Same)?;
        h = graph.bias_add(h, ids[2 * i + 1])?;
        h = graph.relu(h);
    }
    let pooled = graph.mean_pool_time(h)?;
    let base = 2 * n_convs;
    let z = graph.dense(pooled, ids[base])?;
    let mut z = graph.bias_add(z, ids[base + 1])?;
    if with_head && ids.len() > base + 2 {
        let h = graph.dense(z, ids[base + 2])?;
        let h = graph.bias_add(h, ids[base + 3])?;
        let h = graph.relu(h);
        let out = graph.dense(h, ids[base + 4])?;
        z = graph.bias_add(out, ids[base + 5])?;
    }
    Ok(z)
}

const ENCODE_CHUNK: usize = 64;

/// Embeds `N×L×D` inputs without the projection head.
pub fn encode(inputs: &Tensor, params: &ModelParams) -> Result<Tensor> {
    encode_impl(inputs, params, false)
}

/// Embeds through the projection head when one exists.
pub fn encode_with_head(inputs: &Tensor, params: &ModelParams) -> Result<Tensor> {
    encode_impl(inputs, params, true)
}

fn encode_impl(inputs: &Tensor, params: &ModelParams, with_head: bool) -> Result<Tensor> {
    let &[n, l, d] = inputs.shape() else {
        return Err(Error::shape("encode", format!("expected N×L×D, got {:?}", inputs.shape())));
    };
    let expected = params.convs[0].weight.shape()[1];
    if d != expected {
        return Err(Error::shape("encode", format!("input has {d} channels, encoder expects {expected}")));
    }
    let f = params.embed_dim();
    let mut out = Vec::with_capacity(n * f);
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let rows = ENCODE_CHUNK.min(n - start);
        let chunk = Tensor::new(&[rows, l, d], inputs.data()[start * l * d..(start + rows) * l * d].to_vec())?;
        let mut g = Graph::new();
        let nodes = ParamNodes::register(&mut g, params, false);
        let x = g.constant(chunk);
        let z = forward(&mut g, &nodes, params.convs.len(), x, with_head)?;
        out.extend_from_slice(g.value(z).data());
    }
    Tensor::new(&[n, f], out)
}

/// Serializes to the `DICOTM1` format.
pub fn write_model(params: &ModelParams) -> Vec<u8> {
    let named = params.named();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated model file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_model(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MODEL_MAGIC.as_slice()) {
        return Err(Error::Format("missing DICOTM1 header".into()));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in model file", bytes.len() - r.pos)));
    }
    ModelParams::from_named(tensors)
}

pub fn save_model(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_model(params))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(projection: Option<usize>) -> EncoderConfig {
        EncoderConfig {
            input_channels: 2,
            channels: vec![4, 6],
            kernel_sizes: vec![3, 2],
            embed_dim: 5,
            projection,
        }
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_bounded_weights() {
        let cfg = EncoderConfig {
            input_channels: 3,
            channels: vec![4],
            kernel_sizes: vec![8],
            embed_dim: 3,
            projection: None,
        };
        let a = init_params(&cfg, 7).unwrap();
        assert_eq!(a, init_params(&cfg, 7).unwrap());
        assert_ne!(a, init_params(&cfg, 8).unwrap());
        // fan_in = 3 * 8 = 24, bound 0.5
        assert!(a.convs[0].weight.data().iter().all(|v| v.abs() <= 0.5));
        assert!(a.convs[0].weight.data().iter().any(|v| v.abs() > 0.4));
        assert!(a.convs[0].bias.data().iter().all(|&v| v == 0.0));
        assert!(a.embed.bias.data().iter().all(|&v| v == 0.0));
        // output layer: fan_in 4, bound gain * sqrt(1.5)
        let bound = OUTPUT_INIT_GAIN * 1.5f64.sqrt();
        assert!(a.embed.weight.data().iter().all(|v| v.abs() <= bound));
        assert!(a.embed.weight.data().iter().any(|v| v.abs() > 0.5 * bound));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(None);
        cfg.kernel_sizes.pop();
        assert!(matches!(init_params(&cfg, 0), Err(Error::Config(_))));
        let cfg = EncoderConfig {
            embed_dim: 0,
            ..small(None)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_input_gives_zero_embedding() {
        let p = init_params(&small(None), 1).unwrap();
        let z = encode(&Tensor::zeros(&[3, 10, 2]), &p).unwrap();
        assert_eq!(z.shape(), &[3, 5]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_width_is_independent_of_length() {
        let p = init_params(&small(None), 1).unwrap();
        for l in [1, 16, 32] {
            assert_eq!(encode(&random_input(&[2, l, 2], 3), &p).unwrap().shape(), &[2, 5]);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let p = init_params(&small(None), 1).unwrap();
        assert!(matches!(encode(&Tensor::zeros(&[1, 8, 3]), &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn head_is_bypassed_at_evaluation() {
        let with = init_params(&small(Some(7)), 4).unwrap();
        let without = ModelParams {
            head: None,
            ..with.clone()
        };
        let x = random_input(&[3, 12, 2], 5);
        let a = encode(&x, &with).unwrap();
        let b = encode(&x, &without).unwrap();
        assert_eq!(a, b);
        assert_ne!(encode_with_head(&x, &with).unwrap(), a);
        assert_eq!(encode_with_head(&x, &without).unwrap(), b);
    }

    #[test]
    fn chunking_does_not_change_rows() {
        let p = init_params(&small(None), 2).unwrap();
        let x = random_input(&[ENCODE_CHUNK + 5, 9, 2], 6);
        let all = encode(&x, &p).unwrap();
        let last = Tensor::new(&[1, 9, 2], x.data()[(ENCODE_CHUNK + 4) * 18..].to_vec()).unwrap();
        let single = encode(&last, &p).unwrap();
        assert_eq!(&all.data()[(ENCODE_CHUNK + 4) * 5..], single.data());
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        for projection in [None, Some(3)] {
            let p = init_params(&small(projection), 11).unwrap();
            let bytes = write_model(&p);
            let back = read_model(&bytes).unwrap();
            assert_eq!(back, p);
            assert_eq!(write_model(&back), bytes);
            assert_eq!(back.config(), small(projection));
        }
    }

    #[test]
    fn model_layout_header() {
        let p = init_params(&small(None), 0).unwrap();
        let bytes = write_model(&p);
        assert_eq!(&bytes[..8], b"DICOTM1\0");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 6);
        // first entry: name "conv0.weight", rank 3, extents 4,2,3
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 12);
        assert_eq!(&bytes[14..26], b"conv0.weight");
        assert_eq!(bytes[26], 3);
        assert_eq!(u32::from_le_bytes(bytes[27..31].try_into().unwrap()), 4);
        let first = f64::from_le_bytes(bytes[39..47].try_into().unwrap());
        assert_eq!(first.to_bits(), p.convs[0].weight.data()[0].to_bits());
    }

    #[test]
    fn corrupt_models_are_rejected() {
        let p = init_params(&small(None), 0).unwrap();
        let bytes = write_model(&p);
        assert!(matches!(read_model(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(matches!(read_model(&extra), Err(Error::Format(_))));
        assert!(matches!(read_model(b"NOTAMODEL"), Err(Error::Format(_))));
        let mut named: Vec<(String, Tensor)> = p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        named.retain(|(n, _)| n != "embed.bias");
        assert!(ModelParams::from_named(named).is_err());
    }

    #[test]
    fn encoder_loss_composite_grad_check() {
        use crate::objective::{loss_node, targets, PositiveMode};
        let p = init_params(&small(None), 3).unwrap();
        let x = random_input(&[2, 8, 2], 9);
        let t = targets::<ChaCha8Rng>(2, PositiveMode::Preceding, None).unwrap();
        let check = |which: usize| {
            let p = p.clone();
            let x = x.clone();
            let t = t.clone();
            let target = p.tensors()[which].clone();
            crate::autodiff::grad_check(
                move |g, w| {
                    let mut nodes = ParamNodes::register(g, &p, false);
                    nodes.0[which] = w;
                    let xi = g.constant(x.clone().reshape(&[4, 4, 2])?);
                    let z = forward(g, &nodes, 2, xi, false)?;
                    loss_node(g, z, 2, 2, 0.5, &t)
                },
                &target,
                1e-6,
            )
            .unwrap()
        };
        for which in 0..p.tensors().len() {
            let err = check(which);
            assert!(err < 1e-4, "tensor {which}: {err}");
        }
    }
}
