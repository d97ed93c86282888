//! Forward pass of the HCT network.
//!
//! Per segment: 18 shared-weight conv branches squeeze each 100-sample
//! window to 22 features, a fixed index encoding is added, a temporal
//! encoder block attends across the 22 positions, a fully connected layer
//! reduces them to 10, the 18 sensor vectors stack into tokens for the
//! spatial encoder block, and the flattened tokens feed the task head.

use rand_chacha::ChaCha8Rng;

use super::config::{HctConfig, ModelTask};
use super::params::{HctNodes, HctParams};
use crate::dataio::SegmentSet;
use crate::numerics::{
    dense_on_tape, encoder_block_on_tape, Activation, NodeId, Real, Tape, Tensor,
};
use crate::{HctError, Result};

/// Where an index-based positional encoding is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeMode {
    /// Element position inside one branch output vector.
    Temporal,
    /// Sensor index, added to each token's features.
    Spatial,
}

/// Index encoding values `0, 1, .., len-1`, scaled by `1/len` unless raw
/// indices are requested.
pub fn positional_values<F: Real>(len: usize, raw: bool) -> Vec<F> {
    (0..len)
        .map(|i| {
            if raw {
                F::lit(i as f64)
            } else {
                F::lit(i as f64 / len as f64)
            }
        })
        .collect()
}

/// Adds the fixed positional encoding: elementwise for a temporal vector,
/// per-token (row) for a spatial matrix.
pub fn add_positional_encoding<F: Real>(
    input: &Tensor<F>,
    mode: PeMode,
    raw: bool,
) -> Result<Tensor<F>> {
    match mode {
        PeMode::Temporal => {
            if input.shape().len() > 2 || input.rows() != 1 && input.shape().len() != 1 {
                return Err(HctError::Shape(format!(
                    "temporal encoding expects a vector, got {:?}",
                    input.shape()
                )));
            }
            let pe = positional_values::<F>(input.numel(), raw);
            let data = input.iter().zip(pe.iter()).map(|(&x, &p)| x + p).collect();
            Tensor::new(input.shape().to_vec(), data)
        }
        PeMode::Spatial => {
            if input.shape().len() != 2 {
                return Err(HctError::Shape(format!(
                    "spatial encoding expects [tokens, features], got {:?}",
                    input.shape()
                )));
            }
            let (m, n) = (input.rows(), input.cols());
            let pe = positional_values::<F>(m, raw);
            let mut data = input.data().to_vec();
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] += pe[i];
                }
            }
            Tensor::new(vec![m, n], data)
        }
    }
}

/// Conv branch on a tape: `[n,1]` in, `[1, branch_output_len]` out.
/// Convolution then SeLU per layer, max pooling after every second layer.
pub fn conv_branch_on_tape<F: Real>(
    tape: &mut Tape<F>,
    x: NodeId,
    nodes: &HctNodes,
    config: &HctConfig,
) -> Result<NodeId> {
    if tape.value(x).shape() != [config.segment_length, 1] {
        return Err(HctError::Shape(format!(
            "conv branch expects [{}, 1], got {:?}",
            config.segment_length,
            tape.value(x).shape()
        )));
    }
    let mut cur = x;
    for (i, &(kernel, bias)) in nodes.conv.iter().enumerate() {
        cur = tape.conv1d(cur, kernel, bias)?;
        cur = tape.selu(cur)?;
        if (i + 1) % 2 == 0 {
            cur = tape.maxpool1d(cur)?;
        }
    }
    let len = tape.value(cur).rows();
    tape.reshape(cur, vec![1, len])
}

/// Temporal encoding on a tape: lifts the `[1,k]` branch vector to `k`
/// tokens of `temporal_width` features via the shared embedding, runs the
/// encoder block, and projects back to `[1,k]` scalars.
pub fn temporal_encode_on_tape<F: Real>(
    tape: &mut Tape<F>,
    z: NodeId,
    nodes: &HctNodes,
    config: &HctConfig,
    dropout: F,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    if tape.value(z).numel() != config.branch_output_len {
        return Err(HctError::Shape(format!(
            "temporal encoder expects {} elements, got {}",
            config.branch_output_len,
            tape.value(z).numel()
        )));
    }
    let tokens = tape.transpose(z)?;
    let (ew, eb) = nodes.temporal_embed;
    let embedded = dense_on_tape(tape, tokens, ew, eb, Activation::Identity)?;
    let encoded = encoder_block_on_tape(
        tape,
        embedded,
        &nodes.temporal_encoder,
        config.heads,
        dropout,
        rng,
    )?;
    let (uw, ub) = nodes.temporal_unembed;
    let scalars = dense_on_tape(tape, encoded, uw, ub, Activation::Identity)?;
    tape.transpose(scalars)
}

/// Spatial encoding on a tape: embeds the `[sensors, reduced]` matrix to
/// `spatial_width` features per token, adds the sensor-index encoding,
/// and runs the encoder block.
pub fn spatial_encode_on_tape<F: Real>(
    tape: &mut Tape<F>,
    c: NodeId,
    nodes: &HctNodes,
    config: &HctConfig,
    dropout: F,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let shape = tape.value(c).shape().to_vec();
    if shape != [config.sensor_count, config.reduced_length] {
        return Err(HctError::Shape(format!(
            "spatial encoder expects [{}, {}], got {shape:?}",
            config.sensor_count, config.reduced_length
        )));
    }
    let (ew, eb) = nodes.spatial_embed;
    let embedded = dense_on_tape(tape, c, ew, eb, Activation::Identity)?;
    let pe = Tensor::new(
        vec![config.sensor_count],
        positional_values::<F>(config.sensor_count, config.raw_positional_index),
    )?;
    let pe = tape.constant(pe);
    let positioned = tape.add_col(embedded, pe)?;
    encoder_block_on_tape(
        tape,
        positioned,
        &nodes.spatial_encoder,
        config.heads,
        dropout,
        rng,
    )
}

/// Node ids of the pipeline stages of one segment's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// Branch outputs, one `[1, branch_output_len]` node per sensor.
    pub branches: Vec<NodeId>,
    /// Temporal encoder outputs, `[1, branch_output_len]` each.
    pub temporal: Vec<NodeId>,
    /// Reduced vectors, `[1, reduced_length]` each.
    pub reduced: Vec<NodeId>,
    /// Stacked sensor tokens `[sensors, reduced_length]`.
    pub concat: NodeId,
    /// Spatial encoder output `[sensors, spatial_width]`.
    pub spatial: NodeId,
    /// Head output: `[1,1]` sigmoid or `[1,3]` softmax probabilities.
    pub output: NodeId,
}

/// Builds the full forward pass of one segment on the tape.
///
/// Dropout draws from `rng` only when `training` is set; inference is a
/// pure function of parameters and input.
pub fn forward_on_tape<F: Real>(
    tape: &mut Tape<F>,
    nodes: &HctNodes,
    config: &HctConfig,
    segment: &SegmentSet,
    training: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardNodes> {
    if segment.channels().len() != config.sensor_count {
        return Err(HctError::Shape(format!(
            "segment has {} channels, model expects {}",
            segment.channels().len(),
            config.sensor_count
        )));
    }
    if segment.len() != config.segment_length {
        return Err(HctError::Shape(format!(
            "segment windows hold {} samples, model expects {}",
            segment.len(),
            config.segment_length
        )));
    }
    let drop = if training { F::from_f32(config.dropout) } else { F::zero() };
    let encoder_drop = if config.dropout_after_attention { drop } else { F::zero() };

    let temporal_pe = Tensor::new(
        vec![1, config.branch_output_len],
        positional_values::<F>(config.branch_output_len, config.raw_positional_index),
    )?;
    let temporal_pe = tape.constant(temporal_pe);

    let mut branches = Vec::with_capacity(config.sensor_count);
    let mut temporal = Vec::with_capacity(config.sensor_count);
    let mut reduced = Vec::with_capacity(config.sensor_count);
    for (i, channel) in segment.channels().iter().enumerate() {
        let x = tape.constant(Tensor::new(
            vec![config.segment_length, 1],
            channel.iter().map(|&v| F::from_f32(v)).collect(),
        )?);
        let y = conv_branch_on_tape(tape, x, nodes, config)?;
        branches.push(y);
        let z = tape.add(y, temporal_pe)?;
        let v = temporal_encode_on_tape(tape, z, nodes, config, encoder_drop, rng.as_deref_mut())?;
        temporal.push(v);
        let (rw, rb) = nodes.reduce[if config.shared_reduce { 0 } else { i }];
        reduced.push(dense_on_tape(tape, v, rw, rb, Activation::Selu)?);
    }

    let concat = tape.concat_rows(&reduced)?;
    let spatial = spatial_encode_on_tape(tape, concat, nodes, config, encoder_drop, rng.as_deref_mut())?;
    let mut h = tape.reshape(spatial, vec![1, config.head_input_width()])?;
    for &(w, b) in &nodes.head {
        h = dense_on_tape(tape, h, w, b, Activation::Selu)?;
        if training && config.dropout_after_head_fc && drop > F::zero() {
            if let Some(r) = rng.as_deref_mut() {
                h = tape.dropout(h, drop, r)?;
            }
        }
    }
    let (ow, ob) = nodes.output;
    let activation = match config.task {
        ModelTask::TwoClass => Activation::Sigmoid,
        ModelTask::MultiClass => Activation::Softmax,
    };
    let output = dense_on_tape(tape, h, ow, ob, activation)?;

    Ok(ForwardNodes {
        branches,
        temporal,
        reduced,
        concat,
        spatial,
        output,
    })
}

/// Runs one segment through the network and returns the class
/// probabilities: `[p_pd]` for the two-class head, a softmax triple for
/// the multi-class head.
pub fn forward<F: Real>(
    segment: &SegmentSet,
    params: &HctParams<F>,
    config: &HctConfig,
    training: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<F>> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let fwd = forward_on_tape(&mut tape, &nodes, config, segment, training, rng)?;
    Ok(tape.value(fwd.output).data().to_vec())
}

/// Values and shapes at every pipeline stage of one inference pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F: Real = f32> {
    pub branches: Vec<Tensor<F>>,
    pub temporal: Vec<Tensor<F>>,
    pub reduced: Vec<Tensor<F>>,
    pub concat: Tensor<F>,
    pub spatial: Tensor<F>,
    pub output: Vec<F>,
}

/// Inference pass that keeps the intermediate stage values.
pub fn forward_trace<F: Real>(
    segment: &SegmentSet,
    params: &HctParams<F>,
    config: &HctConfig,
) -> Result<ForwardTrace<F>> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let fwd = forward_on_tape(&mut tape, &nodes, config, segment, false, None)?;
    Ok(ForwardTrace {
        branches: fwd.branches.iter().map(|&n| tape.value(n).clone()).collect(),
        temporal: fwd.temporal.iter().map(|&n| tape.value(n).clone()).collect(),
        reduced: fwd.reduced.iter().map(|&n| tape.value(n).clone()).collect(),
        concat: tape.value(fwd.concat).clone(),
        spatial: tape.value(fwd.spatial).clone(),
        output: tape.value(fwd.output).data().to_vec(),
    })
}

/// Class index from head probabilities. The two-class head thresholds at
/// 0.5; the multi-class head takes the argmax. Ties go to the more severe
/// class (PD over healthy, higher stage over lower).
pub fn class_from_probs<F: Real>(task: ModelTask, probs: &[F]) -> usize {
    match task {
        ModelTask::TwoClass => usize::from(probs[0] >= F::lit(0.5)),
        ModelTask::MultiClass => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p >= probs[best] {
                    best = i;
                }
            }
            best
        }
    }
}

/// Conv branch as a plain function over one window: `[n]` in, `[k]` out.
pub fn conv_branch<F: Real>(
    window: &Tensor<F>,
    params: &HctParams<F>,
    config: &HctConfig,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let x = tape.constant(window.reshaped(vec![window.numel(), 1])?);
    let y = conv_branch_on_tape(&mut tape, x, &nodes, config)?;
    tape.value(y).reshaped(vec![config.branch_output_len])
}

/// Temporal encoder as a plain function: `[k]` in, `[k]` out.
pub fn temporal_encode<F: Real>(
    z: &Tensor<F>,
    params: &HctParams<F>,
    config: &HctConfig,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let x = tape.constant(z.reshaped(vec![1, z.numel()])?);
    let v = temporal_encode_on_tape(&mut tape, x, &nodes, config, F::zero(), None)?;
    tape.value(v).reshaped(vec![config.branch_output_len])
}

/// Fully connected reduction as a plain function: `[k]` in, `[l]` out,
/// SeLU activation. `sensor` picks the per-sensor copy when the reduction
/// is not shared.
pub fn reduce_fc<F: Real>(
    v: &Tensor<F>,
    params: &HctParams<F>,
    config: &HctConfig,
    sensor: usize,
) -> Result<Tensor<F>> {
    if v.numel() != config.branch_output_len {
        return Err(HctError::Shape(format!(
            "reduction expects {} elements, got {}",
            config.branch_output_len,
            v.numel()
        )));
    }
    let idx = if config.shared_reduce { 0 } else { sensor };
    let layer = params.reduce.get(idx).ok_or_else(|| {
        HctError::Shape(format!("no reduction weights for sensor {sensor}"))
    })?;
    crate::numerics::dense(v, &layer.weight, &layer.bias, Activation::Selu)
}

/// Spatial encoder as a plain function: `[sensors, reduced]` in,
/// `[sensors, spatial_width]` out.
pub fn spatial_encode<F: Real>(
    c: &Tensor<F>,
    params: &HctParams<F>,
    config: &HctConfig,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let x = tape.constant(c.clone());
    let s = spatial_encode_on_tape(&mut tape, x, &nodes, config, F::zero(), None)?;
    Ok(tape.value(s).clone())
}
