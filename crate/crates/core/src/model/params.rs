//! Learnable arrays of the network, their initialization, and their
//! registration on a tape.
//!
//! All 18 conv branches read the same arrays; the 22->10 reduction is
//! shared too unless the config asks for per-sensor copies. The `named`
//! listing fixes the canonical parameter order used by the optimizer,
//! the checkpoint format, and gradient reporting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::config::HctConfig;
use crate::numerics::{
    AttentionParams, EncoderNodes, EncoderParams, NodeId, Real, Tape, Tensor,
};
use crate::Result;

#[derive(Debug, Clone)]
pub struct ConvParams<F: Real = f32> {
    pub kernel: Tensor<F>,
    pub bias: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct DenseParams<F: Real = f32> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Every learnable array of the HCT network.
#[derive(Debug, Clone)]
pub struct HctParams<F: Real = f32> {
    pub conv: Vec<ConvParams<F>>,
    /// Lifts branch scalars to temporal tokens: `[1, temporal_width]`.
    pub temporal_embed: DenseParams<F>,
    pub temporal_encoder: EncoderParams<F>,
    /// Projects temporal tokens back to scalars: `[temporal_width, 1]`.
    pub temporal_unembed: DenseParams<F>,
    /// One entry when shared across sensors, otherwise one per sensor.
    pub reduce: Vec<DenseParams<F>>,
    pub spatial_embed: DenseParams<F>,
    pub spatial_encoder: EncoderParams<F>,
    pub head: Vec<DenseParams<F>>,
    pub output: DenseParams<F>,
}

/// Tape node ids of registered [`HctParams`], mirrored field by field.
#[derive(Debug, Clone)]
pub struct HctNodes {
    pub conv: Vec<(NodeId, NodeId)>,
    pub temporal_embed: (NodeId, NodeId),
    pub temporal_encoder: EncoderNodes,
    pub temporal_unembed: (NodeId, NodeId),
    pub reduce: Vec<(NodeId, NodeId)>,
    pub spatial_embed: (NodeId, NodeId),
    pub spatial_encoder: EncoderNodes,
    pub head: Vec<(NodeId, NodeId)>,
    pub output: (NodeId, NodeId),
}

fn lecun_uniform<F: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::lit(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn init_dense<F: Real>(n: usize, m: usize, rng: &mut ChaCha8Rng) -> DenseParams<F> {
    DenseParams {
        weight: lecun_uniform(vec![n, m], n, rng),
        bias: Tensor::zeros(vec![m]),
    }
}

fn init_attention<F: Real>(width: usize, rng: &mut ChaCha8Rng) -> AttentionParams<F> {
    let mut proj = || lecun_uniform(vec![width, width], width, rng);
    let wq = proj();
    let wk = proj();
    let wv = proj();
    let wo = proj();
    AttentionParams {
        wq,
        bq: Tensor::zeros(vec![width]),
        wk,
        bk: Tensor::zeros(vec![width]),
        wv,
        bv: Tensor::zeros(vec![width]),
        wo,
        bo: Tensor::zeros(vec![width]),
    }
}

fn init_encoder<F: Real>(width: usize, rng: &mut ChaCha8Rng) -> EncoderParams<F> {
    let inner = 4 * width;
    EncoderParams {
        attn: init_attention(width, rng),
        ln1_gain: Tensor::new(vec![width], vec![F::one(); width]).expect("shape"),
        ln1_bias: Tensor::zeros(vec![width]),
        ff_w1: lecun_uniform(vec![width, inner], width, rng),
        ff_b1: Tensor::zeros(vec![inner]),
        ff_w2: lecun_uniform(vec![inner, width], inner, rng),
        ff_b2: Tensor::zeros(vec![width]),
        ln2_gain: Tensor::new(vec![width], vec![F::one(); width]).expect("shape"),
        ln2_bias: Tensor::zeros(vec![width]),
    }
}

fn zero_dense<F: Real>(n: usize, m: usize) -> DenseParams<F> {
    DenseParams {
        weight: Tensor::zeros(vec![n, m]),
        bias: Tensor::zeros(vec![m]),
    }
}

impl<F: Real> HctParams<F> {
    /// Zero-valued arrays with the shapes the config dictates; the
    /// checkpoint loader fills these in by name.
    pub fn with_shapes(config: &HctConfig) -> Result<Self> {
        config.validate()?;
        let mut conv = Vec::new();
        let mut cin = 1;
        for &cout in &config.conv_channels {
            conv.push(ConvParams {
                kernel: Tensor::zeros(vec![config.conv_kernel, cin, cout]),
                bias: Tensor::zeros(vec![cout]),
            });
            cin = cout;
        }
        let reduce_copies = if config.shared_reduce { 1 } else { config.sensor_count };
        let mut head = Vec::new();
        let mut width = config.head_input_width();
        for &h in &config.head_widths {
            head.push(zero_dense(width, h));
            width = h;
        }
        Ok(HctParams {
            conv,
            temporal_embed: zero_dense(1, config.temporal_width),
            temporal_encoder: EncoderParams::zeros(config.temporal_width),
            temporal_unembed: zero_dense(config.temporal_width, 1),
            reduce: (0..reduce_copies)
                .map(|_| zero_dense(config.branch_output_len, config.reduced_length))
                .collect(),
            spatial_embed: zero_dense(config.reduced_length, config.spatial_width),
            spatial_encoder: EncoderParams::zeros(config.spatial_width),
            head,
            output: zero_dense(width, config.task.output_units()),
        })
    }

    /// Canonical `(name, array)` listing; the order is the parameter
    /// order everywhere else.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            out.push((format!("conv{i}.kernel"), &c.kernel));
            out.push((format!("conv{i}.bias"), &c.bias));
        }
        out.push(("temporal_embed.weight".into(), &self.temporal_embed.weight));
        out.push(("temporal_embed.bias".into(), &self.temporal_embed.bias));
        named_encoder(&mut out, "temporal_encoder", &self.temporal_encoder);
        out.push(("temporal_unembed.weight".into(), &self.temporal_unembed.weight));
        out.push(("temporal_unembed.bias".into(), &self.temporal_unembed.bias));
        for (i, r) in self.reduce.iter().enumerate() {
            out.push((format!("reduce{i}.weight"), &r.weight));
            out.push((format!("reduce{i}.bias"), &r.bias));
        }
        out.push(("spatial_embed.weight".into(), &self.spatial_embed.weight));
        out.push(("spatial_embed.bias".into(), &self.spatial_embed.bias));
        named_encoder(&mut out, "spatial_encoder", &self.spatial_encoder);
        for (i, h) in self.head.iter().enumerate() {
            out.push((format!("head{i}.weight"), &h.weight));
            out.push((format!("head{i}.bias"), &h.bias));
        }
        out.push(("output.weight".into(), &self.output.weight));
        out.push(("output.bias".into(), &self.output.bias));
        out
    }

    /// Mutable variant of [`HctParams::named`], same names, same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = Vec::new();
        for (i, c) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{i}.kernel"), &mut c.kernel));
            out.push((format!("conv{i}.bias"), &mut c.bias));
        }
        out.push(("temporal_embed.weight".into(), &mut self.temporal_embed.weight));
        out.push(("temporal_embed.bias".into(), &mut self.temporal_embed.bias));
        named_encoder_mut(&mut out, "temporal_encoder", &mut self.temporal_encoder);
        out.push(("temporal_unembed.weight".into(), &mut self.temporal_unembed.weight));
        out.push(("temporal_unembed.bias".into(), &mut self.temporal_unembed.bias));
        for (i, r) in self.reduce.iter_mut().enumerate() {
            out.push((format!("reduce{i}.weight"), &mut r.weight));
            out.push((format!("reduce{i}.bias"), &mut r.bias));
        }
        out.push(("spatial_embed.weight".into(), &mut self.spatial_embed.weight));
        out.push(("spatial_embed.bias".into(), &mut self.spatial_embed.bias));
        named_encoder_mut(&mut out, "spatial_encoder", &mut self.spatial_encoder);
        for (i, h) in self.head.iter_mut().enumerate() {
            out.push((format!("head{i}.weight"), &mut h.weight));
            out.push((format!("head{i}.bias"), &mut h.bias));
        }
        out.push(("output.weight".into(), &mut self.output.weight));
        out.push(("output.bias".into(), &mut self.output.bias));
        out
    }

    /// Registers every array on the tape in canonical order.
    pub fn register(&self, tape: &mut Tape<F>) -> HctNodes {
        HctNodes {
            conv: self
                .conv
                .iter()
                .map(|c| (tape.param(&c.kernel), tape.param(&c.bias)))
                .collect(),
            temporal_embed: (
                tape.param(&self.temporal_embed.weight),
                tape.param(&self.temporal_embed.bias),
            ),
            temporal_encoder: self.temporal_encoder.register(tape),
            temporal_unembed: (
                tape.param(&self.temporal_unembed.weight),
                tape.param(&self.temporal_unembed.bias),
            ),
            reduce: self
                .reduce
                .iter()
                .map(|r| (tape.param(&r.weight), tape.param(&r.bias)))
                .collect(),
            spatial_embed: (
                tape.param(&self.spatial_embed.weight),
                tape.param(&self.spatial_embed.bias),
            ),
            spatial_encoder: self.spatial_encoder.register(tape),
            head: self
                .head
                .iter()
                .map(|h| (tape.param(&h.weight), tape.param(&h.bias)))
                .collect(),
            output: (tape.param(&self.output.weight), tape.param(&self.output.bias)),
        }
    }

    /// Widens all arrays to another precision (exact for f32 -> f64).
    pub fn cast<G: Real>(&self) -> HctParams<G> {
        let cast_dense = |d: &DenseParams<F>| DenseParams::<G> {
            weight: d.weight.cast(),
            bias: d.bias.cast(),
        };
        let cast_attn = |a: &AttentionParams<F>| AttentionParams::<G> {
            wq: a.wq.cast(),
            bq: a.bq.cast(),
            wk: a.wk.cast(),
            bk: a.bk.cast(),
            wv: a.wv.cast(),
            bv: a.bv.cast(),
            wo: a.wo.cast(),
            bo: a.bo.cast(),
        };
        let cast_enc = |e: &EncoderParams<F>| EncoderParams::<G> {
            attn: cast_attn(&e.attn),
            ln1_gain: e.ln1_gain.cast(),
            ln1_bias: e.ln1_bias.cast(),
            ff_w1: e.ff_w1.cast(),
            ff_b1: e.ff_b1.cast(),
            ff_w2: e.ff_w2.cast(),
            ff_b2: e.ff_b2.cast(),
            ln2_gain: e.ln2_gain.cast(),
            ln2_bias: e.ln2_bias.cast(),
        };
        HctParams {
            conv: self
                .conv
                .iter()
                .map(|c| ConvParams {
                    kernel: c.kernel.cast(),
                    bias: c.bias.cast(),
                })
                .collect(),
            temporal_embed: cast_dense(&self.temporal_embed),
            temporal_encoder: cast_enc(&self.temporal_encoder),
            temporal_unembed: cast_dense(&self.temporal_unembed),
            reduce: self.reduce.iter().map(cast_dense).collect(),
            spatial_embed: cast_dense(&self.spatial_embed),
            spatial_encoder: cast_enc(&self.spatial_encoder),
            head: self.head.iter().map(cast_dense).collect(),
            output: cast_dense(&self.output),
        }
    }
}

fn named_encoder<'a, F: Real>(
    out: &mut Vec<(String, &'a Tensor<F>)>,
    prefix: &str,
    e: &'a EncoderParams<F>,
) {
    out.push((format!("{prefix}.attn.wq"), &e.attn.wq));
    out.push((format!("{prefix}.attn.bq"), &e.attn.bq));
    out.push((format!("{prefix}.attn.wk"), &e.attn.wk));
    out.push((format!("{prefix}.attn.bk"), &e.attn.bk));
    out.push((format!("{prefix}.attn.wv"), &e.attn.wv));
    out.push((format!("{prefix}.attn.bv"), &e.attn.bv));
    out.push((format!("{prefix}.attn.wo"), &e.attn.wo));
    out.push((format!("{prefix}.attn.bo"), &e.attn.bo));
    out.push((format!("{prefix}.ln1.gain"), &e.ln1_gain));
    out.push((format!("{prefix}.ln1.bias"), &e.ln1_bias));
    out.push((format!("{prefix}.ff.w1"), &e.ff_w1));
    out.push((format!("{prefix}.ff.b1"), &e.ff_b1));
    out.push((format!("{prefix}.ff.w2"), &e.ff_w2));
    out.push((format!("{prefix}.ff.b2"), &e.ff_b2));
    out.push((format!("{prefix}.ln2.gain"), &e.ln2_gain));
    out.push((format!("{prefix}.ln2.bias"), &e.ln2_bias));
}

fn named_encoder_mut<'a, F: Real>(
    out: &mut Vec<(String, &'a mut Tensor<F>)>,
    prefix: &str,
    e: &'a mut EncoderParams<F>,
) {
    out.push((format!("{prefix}.attn.wq"), &mut e.attn.wq));
    out.push((format!("{prefix}.attn.bq"), &mut e.attn.bq));
    out.push((format!("{prefix}.attn.wk"), &mut e.attn.wk));
    out.push((format!("{prefix}.attn.bk"), &mut e.attn.bk));
    out.push((format!("{prefix}.attn.wv"), &mut e.attn.wv));
    out.push((format!("{prefix}.attn.bv"), &mut e.attn.bv));
    out.push((format!("{prefix}.attn.wo"), &mut e.attn.wo));
    out.push((format!("{prefix}.attn.bo"), &mut e.attn.bo));
    out.push((format!("{prefix}.ln1.gain"), &mut e.ln1_gain));
    out.push((format!("{prefix}.ln1.bias"), &mut e.ln1_bias));
    out.push((format!("{prefix}.ff.w1"), &mut e.ff_w1));
    out.push((format!("{prefix}.ff.b1"), &mut e.ff_b1));
    out.push((format!("{prefix}.ff.w2"), &mut e.ff_w2));
    out.push((format!("{prefix}.ff.b2"), &mut e.ff_b2));
    out.push((format!("{prefix}.ln2.gain"), &mut e.ln2_gain));
    out.push((format!("{prefix}.ln2.bias"), &mut e.ln2_bias));
}

/// Draws fresh parameters: fan-in-scaled uniform weights (the LeCun
/// scheme SeLU self-normalization assumes), zero biases, unit layer-norm
/// gains. Deterministic per seed; the draw sequence follows the
/// canonical parameter order.
pub fn init_params<F: Real>(config: &HctConfig, seed: u64) -> Result<HctParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;

    let mut conv = Vec::new();
    let mut cin = 1;
    for &cout in &config.conv_channels {
        conv.push(ConvParams {
            kernel: lecun_uniform(
                vec![config.conv_kernel, cin, cout],
                config.conv_kernel * cin,
                rng,
            ),
            bias: Tensor::zeros(vec![cout]),
        });
        cin = cout;
    }

    let temporal_embed = init_dense(1, config.temporal_width, rng);
    let temporal_encoder = init_encoder(config.temporal_width, rng);
    let temporal_unembed = init_dense(config.temporal_width, 1, rng);

    let reduce_copies = if config.shared_reduce { 1 } else { config.sensor_count };
    let reduce = (0..reduce_copies)
        .map(|_| init_dense(config.branch_output_len, config.reduced_length, rng))
        .collect();

    let spatial_embed = init_dense(config.reduced_length, config.spatial_width, rng);
    let spatial_encoder = init_encoder(config.spatial_width, rng);

    let mut head = Vec::new();
    let mut width = config.head_input_width();
    for &h in &config.head_widths {
        head.push(init_dense(width, h, rng));
        width = h;
    }
    let output = init_dense(width, config.task.output_units(), rng);

    Ok(HctParams {
        conv,
        temporal_embed,
        temporal_encoder,
        temporal_unembed,
        reduce,
        spatial_embed,
        spatial_encoder,
        head,
        output,
    })
}
