//! Layer primitives as plain functions plus the attention / encoder
//! composites used to assemble transformer blocks on a tape.
//!
//! The plain functions build a throwaway tape internally, so every
//! primitive has exactly one forward implementation — the one `backward`
//! differentiates.

use rand_chacha::ChaCha8Rng;

use super::tape::{NodeId, Tape};
use super::{Real, Tensor};
use crate::{HctError, Result};

/// Activation applied by [`dense`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Selu,
    Sigmoid,
    Softmax,
    Identity,
}

/// Applies an activation to a tape node; softmax acts row-wise.
pub fn activate_on_tape<F: Real>(
    tape: &mut Tape<F>,
    x: NodeId,
    activation: Activation,
) -> Result<NodeId> {
    match activation {
        Activation::Selu => tape.selu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Softmax => tape.softmax_rows(x),
        Activation::Identity => Ok(x),
    }
}

/// Fully connected layer on a tape: `act(x W + b)` for `x [m,n]`,
/// `w [n,p]`, `b [p]`.
pub fn dense_on_tape<F: Real>(
    tape: &mut Tape<F>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    activation: Activation,
) -> Result<NodeId> {
    let z = tape.matmul(x, w)?;
    let z = tape.add_row(z, b)?;
    activate_on_tape(tape, z, activation)
}

/// Valid 1-D convolution with stride 1 and fused bias.
pub fn conv1d<F: Real>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let i = tape.constant(input.clone());
    let k = tape.constant(kernels.clone());
    let b = tape.constant(bias.clone());
    let out = tape.conv1d(i, k, b)?;
    Ok(tape.value(out).clone())
}

/// Non-overlapping width-2 max pooling; a trailing odd sample is dropped.
pub fn maxpool1d<F: Real>(input: &Tensor<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let i = tape.constant(input.clone());
    let out = tape.maxpool1d(i)?;
    Ok(tape.value(out).clone())
}

/// Fully connected layer `act(Wᵀx + b)` over a vector input.
pub fn dense<F: Real>(
    input: &Tensor<F>,
    weights: &Tensor<F>,
    bias: &Tensor<F>,
    activation: Activation,
) -> Result<Tensor<F>> {
    let n = input.numel();
    let mut tape = Tape::new();
    let x = tape.constant(input.reshaped(vec![1, n])?);
    let w = tape.constant(weights.clone());
    let b = tape.constant(bias.clone());
    let out = dense_on_tape(&mut tape, x, w, b, activation)?;
    let m = tape.value(out).numel();
    tape.value(out).reshaped(vec![m])
}

/// Projection weights of one multi-head attention layer.
#[derive(Debug, Clone)]
pub struct AttentionParams<F: Real = f32> {
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
}

/// Tape node ids of one registered [`AttentionParams`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

impl<F: Real> AttentionParams<F> {
    pub fn zeros(width: usize) -> Self {
        AttentionParams {
            wq: Tensor::zeros(vec![width, width]),
            bq: Tensor::zeros(vec![width]),
            wk: Tensor::zeros(vec![width, width]),
            bk: Tensor::zeros(vec![width]),
            wv: Tensor::zeros(vec![width, width]),
            bv: Tensor::zeros(vec![width]),
            wo: Tensor::zeros(vec![width, width]),
            bo: Tensor::zeros(vec![width]),
        }
    }

    /// Registers all arrays as parameters, in field order.
    pub fn register(&self, tape: &mut Tape<F>) -> AttentionNodes {
        AttentionNodes {
            wq: tape.param(&self.wq),
            bq: tape.param(&self.bq),
            wk: tape.param(&self.wk),
            bk: tape.param(&self.bk),
            wv: tape.param(&self.wv),
            bv: tape.param(&self.bv),
            wo: tape.param(&self.wo),
            bo: tape.param(&self.bo),
        }
    }
}

/// Scaled dot-product multi-head self-attention over `x [L,d]`.
///
/// Heads split the feature axis; per-head scores are scaled by
/// `1/sqrt(d/heads)`, softmaxed row-wise, applied to the values, then the
/// concatenated heads go through the output projection.
pub fn attention_on_tape<F: Real>(
    tape: &mut Tape<F>,
    x: NodeId,
    p: &AttentionNodes,
    heads: usize,
) -> Result<NodeId> {
    let d = tape.value(x).cols();
    if heads == 0 || d % heads != 0 {
        return Err(HctError::Config(format!(
            "token width {d} not divisible by {heads} heads"
        )));
    }
    let head_dim = d / heads;
    let scale = F::one() / F::lit(head_dim as f64).sqrt();

    let q = dense_on_tape(tape, x, p.wq, p.bq, Activation::Identity)?;
    let k = dense_on_tape(tape, x, p.wk, p.bk, Activation::Identity)?;
    let v = dense_on_tape(tape, x, p.wv, p.bv, Activation::Identity)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let start = h * head_dim;
        let qh = tape.slice_cols(q, start, head_dim)?;
        let kh = tape.slice_cols(k, start, head_dim)?;
        let vh = tape.slice_cols(v, start, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores)?;
        head_outputs.push(tape.matmul(weights, vh)?);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    dense_on_tape(tape, concat, p.wo, p.bo, Activation::Identity)
}

/// Multi-head self-attention as a plain function.
pub fn multi_head_attention<F: Real>(
    seq: &Tensor<F>,
    params: &AttentionParams<F>,
    heads: usize,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let x = tape.constant(seq.clone());
    let nodes = params.register(&mut tape);
    let out = attention_on_tape(&mut tape, x, &nodes, heads)?;
    Ok(tape.value(out).clone())
}

/// Weights of one transformer encoder block: attention plus a
/// position-wise feed-forward (`d -> 4d -> d`, SeLU inside), each with a
/// residual connection and layer normalization.
#[derive(Debug, Clone)]
pub struct EncoderParams<F: Real = f32> {
    pub attn: AttentionParams<F>,
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    pub ff_w1: Tensor<F>,
    pub ff_b1: Tensor<F>,
    pub ff_w2: Tensor<F>,
    pub ff_b2: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
}

/// Tape node ids of one registered [`EncoderParams`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub attn: AttentionNodes,
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub ff_w1: NodeId,
    pub ff_b1: NodeId,
    pub ff_w2: NodeId,
    pub ff_b2: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
}

impl<F: Real> EncoderParams<F> {
    /// Zero weights with unit layer-norm gains.
    pub fn zeros(width: usize) -> Self {
        let inner = 4 * width;
        EncoderParams {
            attn: AttentionParams::zeros(width),
            ln1_gain: Tensor::new(vec![width], vec![F::one(); width]).expect("shape"),
            ln1_bias: Tensor::zeros(vec![width]),
            ff_w1: Tensor::zeros(vec![width, inner]),
            ff_b1: Tensor::zeros(vec![inner]),
            ff_w2: Tensor::zeros(vec![inner, width]),
            ff_b2: Tensor::zeros(vec![width]),
            ln2_gain: Tensor::new(vec![width], vec![F::one(); width]).expect("shape"),
            ln2_bias: Tensor::zeros(vec![width]),
        }
    }

    pub fn register(&self, tape: &mut Tape<F>) -> EncoderNodes {
        EncoderNodes {
            attn: self.attn.register(tape),
            ln1_gain: tape.param(&self.ln1_gain),
            ln1_bias: tape.param(&self.ln1_bias),
            ff_w1: tape.param(&self.ff_w1),
            ff_b1: tape.param(&self.ff_b1),
            ff_w2: tape.param(&self.ff_w2),
            ff_b2: tape.param(&self.ff_b2),
            ln2_gain: tape.param(&self.ln2_gain),
            ln2_bias: tape.param(&self.ln2_bias),
        }
    }
}

/// One encoder block on a tape. When `dropout_rate > 0` and an RNG is
/// supplied, dropout is applied to the attention output before the first
/// residual sum.
pub fn encoder_block_on_tape<F: Real>(
    tape: &mut Tape<F>,
    x: NodeId,
    p: &EncoderNodes,
    heads: usize,
    dropout_rate: F,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let mut a = attention_on_tape(tape, x, &p.attn, heads)?;
    if dropout_rate > F::zero() {
        if let Some(rng) = rng {
            a = tape.dropout(a, dropout_rate, rng)?;
        }
    }
    let r1 = tape.add(x, a)?;
    let n1 = tape.layer_norm_rows(r1, p.ln1_gain, p.ln1_bias)?;

    let f = dense_on_tape(tape, n1, p.ff_w1, p.ff_b1, Activation::Selu)?;
    let f = dense_on_tape(tape, f, p.ff_w2, p.ff_b2, Activation::Identity)?;
    let r2 = tape.add(n1, f)?;
    tape.layer_norm_rows(r2, p.ln2_gain, p.ln2_bias)
}

/// Transformer encoder block as a plain function (no dropout).
pub fn encoder_block<F: Real>(
    seq: &Tensor<F>,
    params: &EncoderParams<F>,
    heads: usize,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let x = tape.constant(seq.clone());
    let nodes = params.register(&mut tape);
    let out = encoder_block_on_tape(&mut tape, x, &nodes, heads, F::zero(), None)?;
    Ok(tape.value(out).clone())
}
