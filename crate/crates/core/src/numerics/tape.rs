//! Reverse-mode differentiation over a linear operation tape.
//!
//! Values live in an arena of nodes; every primitive records the node ids
//! it read and wrote. The forward pass happens eagerly at record time,
//! `backward` replays the records in reverse and accumulates gradients
//! into every reachable node, then reports them for the registered
//! parameters in registration order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{selu as selu_scalar, selu_grad, sigmoid as sigmoid_scalar, Real, Tensor};
use super::loss::PROB_CLAMP_EPS;
use crate::{HctError, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Index of a value node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<F: Real> {
    MatMul { a: NodeId, b: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    /// `[m,n] + [n]`, the row vector broadcast over rows.
    AddRow { a: NodeId, b: NodeId, out: NodeId },
    /// `[m,n] + [m]`, the column vector broadcast over columns.
    AddCol { a: NodeId, b: NodeId, out: NodeId },
    Scale { a: NodeId, factor: F, out: NodeId },
    Selu { a: NodeId, out: NodeId },
    Sigmoid { a: NodeId, out: NodeId },
    SoftmaxRows { a: NodeId, out: NodeId },
    Conv1d { input: NodeId, kernels: NodeId, bias: NodeId, out: NodeId },
    MaxPool1d { input: NodeId, switches: Vec<usize>, out: NodeId },
    LayerNormRows {
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        means: Vec<F>,
        inv_stds: Vec<F>,
        out: NodeId,
    },
    Transpose { a: NodeId, out: NodeId },
    SliceCols { a: NodeId, start: usize, out: NodeId },
    ConcatRows { parts: Vec<NodeId>, out: NodeId },
    ConcatCols { parts: Vec<NodeId>, out: NodeId },
    Reshape { a: NodeId, out: NodeId },
    Dropout { a: NodeId, mask: Vec<bool>, keep: F, out: NodeId },
    BceLoss { pred: NodeId, labels: Vec<F>, out: NodeId },
    CceLoss { pred: NodeId, labels: Vec<F>, classes: usize, out: NodeId },
}

/// Gradients of a scalar root with respect to the registered parameters,
/// in registration order. Parameters the root does not reach get zeros.
#[derive(Debug, Clone)]
pub struct Gradients<F: Real> {
    grads: Vec<Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<F> {
        &self.grads[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Tensor<F>> {
        self.grads.iter()
    }
}

/// Record of primitive operations with eager forward evaluation.
#[derive(Debug, Default)]
pub struct Tape<F: Real> {
    nodes: Vec<Tensor<F>>,
    ops: Vec<Op<F>>,
    params: Vec<NodeId>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, t: Tensor<F>) -> NodeId {
        self.nodes.push(t);
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf node without gradient reporting.
    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t)
    }

    /// Leaf node registered as a trainable parameter.
    pub fn param(&mut self, t: &Tensor<F>) -> NodeId {
        let id = self.push(t.clone());
        self.params.push(id);
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0]
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Registered parameter nodes in registration order.
    pub fn param_nodes(&self) -> &[NodeId] {
        &self.params
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        let (k2, n) = (self.nodes[b.0].rows(), self.nodes[b.0].cols());
        if k != k2 {
            return Err(HctError::Shape(format!(
                "matmul inner dims differ: [{m},{k}] x [{k2},{n}]"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        {
            let av = self.nodes[a.0].data();
            let bv = self.nodes[b.0].data();
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == F::zero() {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        let out = self.push(Tensor::new(vec![m, n], out)?);
        self.ops.push(Op::MatMul { a, b, out });
        Ok(out)
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape() != self.nodes[b.0].shape() {
            return Err(HctError::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.nodes[a.0].shape(),
                self.nodes[b.0].shape()
            )));
        }
        let data = self.nodes[a.0]
            .iter()
            .zip(self.nodes[b.0].iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape().to_vec();
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    /// `[m,n] + [n]` broadcast.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        if self.nodes[b.0].numel() != n {
            return Err(HctError::Shape(format!(
                "row-broadcast add: [{m},{n}] + [{}]",
                self.nodes[b.0].numel()
            )));
        }
        let mut data = self.nodes[a.0].data().to_vec();
        let bv = self.nodes[b.0].data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bv[j];
            }
        }
        let shape = self.nodes[a.0].shape().to_vec();
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::AddRow { a, b, out });
        Ok(out)
    }

    /// `[m,n] + [m]` broadcast.
    pub fn add_col(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        if self.nodes[b.0].numel() != m {
            return Err(HctError::Shape(format!(
                "column-broadcast add: [{m},{n}] + [{}]",
                self.nodes[b.0].numel()
            )));
        }
        let mut data = self.nodes[a.0].data().to_vec();
        let bv = self.nodes[b.0].data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bv[i];
            }
        }
        let shape = self.nodes[a.0].shape().to_vec();
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::AddCol { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: NodeId, factor: F) -> Result<NodeId> {
        let data = self.nodes[a.0].iter().map(|&x| x * factor).collect();
        let shape = self.nodes[a.0].shape().to_vec();
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::Scale { a, factor, out });
        Ok(out)
    }

    pub fn selu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.nodes[a.0].iter().map(|&x| selu_scalar(x)).collect();
        let shape = self.nodes[a.0].shape().to_vec();
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::Selu { a, out });
        Ok(out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.nodes[a.0].iter().map(|&x| sigmoid_scalar(x)).collect();
        let shape = self.nodes[a.0].shape().to_vec();
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::Sigmoid { a, out });
        Ok(out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        let av = self.nodes[a.0].data();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let shape = self.nodes[a.0].shape().to_vec();
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::SoftmaxRows { a, out });
        Ok(out)
    }

    /// Valid 1-D convolution, stride 1, fused bias.
    ///
    /// `input [L,Cin]`, `kernels [K,Cin,Cout]`, `bias [Cout]` to
    /// `[L-K+1, Cout]`.
    pub fn conv1d(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let ishape = self.nodes[input.0].shape().to_vec();
        let kshape = self.nodes[kernels.0].shape().to_vec();
        if ishape.len() != 2 || kshape.len() != 3 {
            return Err(HctError::Shape(format!(
                "conv1d expects input [L,Cin] and kernels [K,Cin,Cout], got {ishape:?} and {kshape:?}"
            )));
        }
        let (l, cin) = (ishape[0], ishape[1]);
        let (k, kcin, cout) = (kshape[0], kshape[1], kshape[2]);
        if cin != kcin {
            return Err(HctError::Shape(format!(
                "conv1d channel mismatch: input has {cin}, kernels expect {kcin}"
            )));
        }
        if self.nodes[bias.0].numel() != cout {
            return Err(HctError::Shape(format!(
                "conv1d bias length {} != output channels {cout}",
                self.nodes[bias.0].numel()
            )));
        }
        if l < k {
            return Err(HctError::Shape(format!(
                "conv1d input length {l} shorter than kernel {k}"
            )));
        }
        let lout = l - k + 1;
        let mut data = vec![F::zero(); lout * cout];
        {
            let iv = self.nodes[input.0].data();
            let kv = self.nodes[kernels.0].data();
            let bv = self.nodes[bias.0].data();
            for t in 0..lout {
                for o in 0..cout {
                    let mut acc = bv[o];
                    for kk in 0..k {
                        for c in 0..cin {
                            acc += iv[(t + kk) * cin + c] * kv[(kk * cin + c) * cout + o];
                        }
                    }
                    data[t * cout + o] = acc;
                }
            }
        }
        let out = self.push(Tensor::new(vec![lout, cout], data)?);
        self.ops.push(Op::Conv1d { input, kernels, bias, out });
        Ok(out)
    }

    /// Non-overlapping width-2 max pooling along the time axis; a trailing
    /// odd sample is dropped.
    pub fn maxpool1d(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.nodes[input.0].shape().to_vec();
        if ishape.len() != 2 {
            return Err(HctError::Shape(format!(
                "maxpool1d expects [L,C], got {ishape:?}"
            )));
        }
        let (l, c) = (ishape[0], ishape[1]);
        if l < 2 {
            return Err(HctError::Shape(format!(
                "maxpool1d input length {l} shorter than window 2"
            )));
        }
        let lout = l / 2;
        let mut data = vec![F::zero(); lout * c];
        let mut switches = vec![0usize; lout * c];
        {
            let iv = self.nodes[input.0].data();
            for t in 0..lout {
                for ch in 0..c {
                    let i0 = (2 * t) * c + ch;
                    let i1 = (2 * t + 1) * c + ch;
                    // ties keep the earlier sample
                    let (v, w) = if iv[i1] > iv[i0] { (iv[i1], i1) } else { (iv[i0], i0) };
                    data[t * c + ch] = v;
                    switches[t * c + ch] = w;
                }
            }
        }
        let out = self.push(Tensor::new(vec![lout, c], data)?);
        self.ops.push(Op::MaxPool1d { input, switches, out });
        Ok(out)
    }

    /// Per-row layer normalization with affine parameters.
    pub fn layer_norm_rows(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        if self.nodes[gain.0].numel() != n || self.nodes[bias.0].numel() != n {
            return Err(HctError::Shape(format!(
                "layer norm affine length {} / {} != feature width {n}",
                self.nodes[gain.0].numel(),
                self.nodes[bias.0].numel()
            )));
        }
        let eps = F::lit(LAYER_NORM_EPS);
        let mut data = vec![F::zero(); m * n];
        let mut means = vec![F::zero(); m];
        let mut inv_stds = vec![F::zero(); m];
        {
            let av = self.nodes[a.0].data();
            let gv = self.nodes[gain.0].data();
            let bv = self.nodes[bias.0].data();
            let nf = F::lit(n as f64);
            for i in 0..m {
                let row = &av[i * n..(i + 1) * n];
                let mean = row.iter().cloned().sum::<F>() / nf;
                let var = row
                    .iter()
                    .map(|&x| (x - mean) * (x - mean))
                    .sum::<F>()
                    / nf;
                let inv_std = F::one() / (var + eps).sqrt();
                means[i] = mean;
                inv_stds[i] = inv_std;
                for j in 0..n {
                    let xhat = (row[j] - mean) * inv_std;
                    data[i * n + j] = gv[j] * xhat + bv[j];
                }
            }
        }
        let shape = self.nodes[a.0].shape().to_vec();
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::LayerNormRows { a, gain, bias, means, inv_stds, out });
        Ok(out)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        let av = self.nodes[a.0].data();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av[i * n + j];
            }
        }
        let out = self.push(Tensor::new(vec![n, m], data)?);
        self.ops.push(Op::Transpose { a, out });
        Ok(out)
    }

    /// Copies columns `start..start+len` of a matrix node.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        if start + len > n {
            return Err(HctError::Shape(format!(
                "column slice {start}..{} out of width {n}",
                start + len
            )));
        }
        let av = self.nodes[a.0].data();
        let mut data = vec![F::zero(); m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&av[i * n + start..i * n + start + len]);
        }
        let out = self.push(Tensor::new(vec![m, len], data)?);
        self.ops.push(Op::SliceCols { a, start, out });
        Ok(out)
    }

    /// Vertically stacks matrix nodes of equal width.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(HctError::Shape("concat of zero parts".into()));
        }
        let n = self.nodes[parts[0].0].cols();
        let mut rows = 0;
        for p in parts {
            if self.nodes[p.0].cols() != n {
                return Err(HctError::Shape(format!(
                    "row concat widths differ: {} vs {n}",
                    self.nodes[p.0].cols()
                )));
            }
            rows += self.nodes[p.0].rows();
        }
        let mut data = Vec::with_capacity(rows * n);
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].data());
        }
        let out = self.push(Tensor::new(vec![rows, n], data)?);
        self.ops.push(Op::ConcatRows { parts: parts.to_vec(), out });
        Ok(out)
    }

    /// Horizontally stacks matrix nodes of equal row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(HctError::Shape("concat of zero parts".into()));
        }
        let m = self.nodes[parts[0].0].rows();
        let mut width = 0;
        for p in parts {
            if self.nodes[p.0].rows() != m {
                return Err(HctError::Shape(format!(
                    "column concat heights differ: {} vs {m}",
                    self.nodes[p.0].rows()
                )));
            }
            width += self.nodes[p.0].cols();
        }
        let mut data = vec![F::zero(); m * width];
        let mut offset = 0;
        for p in parts {
            let pn = self.nodes[p.0].cols();
            let pv = self.nodes[p.0].data();
            for i in 0..m {
                data[i * width + offset..i * width + offset + pn]
                    .copy_from_slice(&pv[i * pn..(i + 1) * pn]);
            }
            offset += pn;
        }
        let out = self.push(Tensor::new(vec![m, width], data)?);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out });
        Ok(out)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.nodes[a.0].reshaped(shape)?;
        let out = self.push(t);
        self.ops.push(Op::Reshape { a, out });
        Ok(out)
    }

    /// Inverted dropout: kept activations are rescaled by `1/(1-rate)` so
    /// inference needs no compensation.
    pub fn dropout(&mut self, a: NodeId, rate: F, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        let r = rate.to_f64();
        if !(0.0..1.0).contains(&r) {
            return Err(HctError::Config(format!("dropout rate {r} outside [0,1)")));
        }
        let numel = self.nodes[a.0].numel();
        let mask: Vec<bool> = (0..numel).map(|_| rng.gen::<f64>() >= r).collect();
        let keep = F::one() - rate;
        let data = self.nodes[a.0]
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { x / keep } else { F::zero() })
            .collect();
        let shape = self.nodes[a.0].shape().to_vec();
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::Dropout { a, mask, keep, out });
        Ok(out)
    }

    /// Mean binary cross-entropy of predicted probabilities against 0/1
    /// labels; predictions are clamped to `[eps, 1-eps]`.
    pub fn bce_loss(&mut self, pred: NodeId, labels: &[f64]) -> Result<NodeId> {
        let m = self.nodes[pred.0].numel();
        if labels.len() != m {
            return Err(HctError::Shape(format!(
                "bce: {m} predictions vs {} labels",
                labels.len()
            )));
        }
        if labels.iter().any(|&a| a != 0.0 && a != 1.0) {
            return Err(HctError::Validation("bce labels must be 0 or 1".into()));
        }
        let eps = F::lit(PROB_CLAMP_EPS);
        let one = F::one();
        let mf = F::lit(m as f64);
        let mut total = F::zero();
        {
            let pv = self.nodes[pred.0].data();
            for (i, &a) in labels.iter().enumerate() {
                let p = pv[i].max(eps).min(one - eps);
                let af = F::lit(a);
                total -= af * p.ln() + (one - af) * (one - p).ln();
            }
        }
        let out = self.push(Tensor::scalar(total / mf));
        self.ops.push(Op::BceLoss {
            pred,
            labels: labels.iter().map(|&a| F::lit(a)).collect(),
            out,
        });
        Ok(out)
    }

    /// Mean categorical cross-entropy of probability rows against one-hot
    /// labels. Each prediction row must sum to 1 within 1e-5.
    pub fn cce_loss(&mut self, pred: NodeId, one_hot: &[f64], classes: usize) -> Result<NodeId> {
        let (m, b) = (self.nodes[pred.0].rows(), self.nodes[pred.0].cols());
        if b != classes || one_hot.len() != m * b {
            return Err(HctError::Shape(format!(
                "cce: predictions [{m},{b}] vs {} one-hot values for {classes} classes",
                one_hot.len()
            )));
        }
        for i in 0..m {
            let row = &one_hot[i * b..(i + 1) * b];
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(HctError::Validation(format!(
                    "cce label row {i} is not one-hot"
                )));
            }
        }
        let eps = F::lit(PROB_CLAMP_EPS);
        let one = F::one();
        let mf = F::lit(m as f64);
        let mut total = F::zero();
        {
            let pv = self.nodes[pred.0].data();
            for i in 0..m {
                let row = &pv[i * b..(i + 1) * b];
                let sum: F = row.iter().cloned().sum();
                if (sum - one).abs().to_f64() > 1e-5 {
                    return Err(HctError::Validation(format!(
                        "cce prediction row {i} sums to {sum}, expected 1"
                    )));
                }
                for j in 0..b {
                    if one_hot[i * b + j] == 1.0 {
                        let p = row[j].max(eps).min(one - eps);
                        total -= p.ln();
                    }
                }
            }
        }
        let out = self.push(Tensor::scalar(total / mf));
        self.ops.push(Op::CceLoss {
            pred,
            labels: one_hot.iter().map(|&v| F::lit(v)).collect(),
            classes,
            out,
        });
        Ok(out)
    }

    /// Gradients of the scalar `root` with respect to every registered
    /// parameter. Parameters not on a path to the root get zero gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<F>> {
        if !self.nodes[root.0].is_scalar() {
            return Err(HctError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![F::one()]);

        for op in self.ops.iter().rev() {
            self.backprop_op(op, &mut grads);
        }

        let out = self
            .params
            .iter()
            .map(|&id| {
                let shape = self.nodes[id.0].shape().to_vec();
                match grads[id.0].take() {
                    Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backprop_op(&self, op: &Op<F>, grads: &mut [Option<Vec<F>>]) {
        fn ensure<F: Real>(slot: &mut Option<Vec<F>>, n: usize) -> &mut Vec<F> {
            slot.get_or_insert_with(|| vec![F::zero(); n])
        }

        macro_rules! out_grad {
            ($out:expr) => {
                match &grads[$out.0] {
                    Some(g) => g.clone(),
                    None => return,
                }
            };
        }

        match op {
            Op::MatMul { a, b, out } => {
                let g = out_grad!(out);
                let (m, k) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                let n = self.nodes[b.0].cols();
                {
                    let bv = self.nodes[b.0].data();
                    let da = ensure(&mut grads[a.0], m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = F::zero();
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[p * n..(p + 1) * n];
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                }
                {
                    let av = self.nodes[a.0].data();
                    let db = ensure(&mut grads[b.0], k * n);
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == F::zero() {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += x * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b, out } => {
                let g = out_grad!(out);
                {
                    let da = ensure(&mut grads[a.0], g.len());
                    for (d, &gv) in da.iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                }
                let db = ensure(&mut grads[b.0], g.len());
                for (d, &gv) in db.iter_mut().zip(g.iter()) {
                    *d += gv;
                }
            }
            Op::AddRow { a, b, out } => {
                let g = out_grad!(out);
                let (m, n) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                {
                    let da = ensure(&mut grads[a.0], m * n);
                    for (d, &gv) in da.iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                }
                let db = ensure(&mut grads[b.0], n);
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
            }
            Op::AddCol { a, b, out } => {
                let g = out_grad!(out);
                let (m, n) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                {
                    let da = ensure(&mut grads[a.0], m * n);
                    for (d, &gv) in da.iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                }
                let db = ensure(&mut grads[b.0], m);
                for i in 0..m {
                    for j in 0..n {
                        db[i] += g[i * n + j];
                    }
                }
            }
            Op::Scale { a, factor, out } => {
                let g = out_grad!(out);
                let da = ensure(&mut grads[a.0], g.len());
                for (d, &gv) in da.iter_mut().zip(g.iter()) {
                    *d += gv * *factor;
                }
            }
            Op::Selu { a, out } => {
                let g = out_grad!(out);
                let av = self.nodes[a.0].data();
                let da = ensure(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * selu_grad(av[i]);
                }
            }
            Op::Sigmoid { a, out } => {
                let g = out_grad!(out);
                let yv = self.nodes[out.0].data();
                let da = ensure(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * yv[i] * (F::one() - yv[i]);
                }
            }
            Op::SoftmaxRows { a, out } => {
                let g = out_grad!(out);
                let (m, n) = (self.nodes[out.0].rows(), self.nodes[out.0].cols());
                let yv = self.nodes[out.0].data();
                let da = ensure(&mut grads[a.0], m * n);
                for i in 0..m {
                    let yrow = &yv[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let mut dot = F::zero();
                    for j in 0..n {
                        dot += yrow[j] * grow[j];
                    }
                    for j in 0..n {
                        da[i * n + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::Conv1d { input, kernels, bias, out } => {
                let g = out_grad!(out);
                let ishape = self.nodes[input.0].shape();
                let kshape = self.nodes[kernels.0].shape();
                let (cin, k, cout) = (ishape[1], kshape[0], kshape[2]);
                let lout = self.nodes[out.0].rows();
                {
                    let kv = self.nodes[kernels.0].data();
                    let di = ensure(&mut grads[input.0], self.nodes[input.0].numel());
                    for t in 0..lout {
                        for o in 0..cout {
                            let gv = g[t * cout + o];
                            if gv == F::zero() {
                                continue;
                            }
                            for kk in 0..k {
                                for c in 0..cin {
                                    di[(t + kk) * cin + c] += gv * kv[(kk * cin + c) * cout + o];
                                }
                            }
                        }
                    }
                }
                {
                    let iv = self.nodes[input.0].data();
                    let dk = ensure(&mut grads[kernels.0], self.nodes[kernels.0].numel());
                    for t in 0..lout {
                        for o in 0..cout {
                            let gv = g[t * cout + o];
                            if gv == F::zero() {
                                continue;
                            }
                            for kk in 0..k {
                                for c in 0..cin {
                                    dk[(kk * cin + c) * cout + o] += gv * iv[(t + kk) * cin + c];
                                }
                            }
                        }
                    }
                }
                let db = ensure(&mut grads[bias.0], cout);
                for t in 0..lout {
                    for o in 0..cout {
                        db[o] += g[t * cout + o];
                    }
                }
            }
            Op::MaxPool1d { input, switches, out } => {
                let g = out_grad!(out);
                let di = ensure(&mut grads[input.0], self.nodes[input.0].numel());
                for (oi, &wi) in switches.iter().enumerate() {
                    di[wi] += g[oi];
                }
            }
            Op::LayerNormRows { a, gain, bias, means, inv_stds, out } => {
                let g = out_grad!(out);
                let (m, n) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                let av = self.nodes[a.0].data();
                let gv = self.nodes[gain.0].data();
                let nf = F::lit(n as f64);
                {
                    let da = ensure(&mut grads[a.0], m * n);
                    for i in 0..m {
                        let inv_std = inv_stds[i];
                        let mean = means[i];
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &av[i * n..(i + 1) * n];
                        let mut h_mean = F::zero();
                        let mut hx_mean = F::zero();
                        for j in 0..n {
                            let xhat = (arow[j] - mean) * inv_std;
                            let h = grow[j] * gv[j];
                            h_mean += h;
                            hx_mean += h * xhat;
                        }
                        h_mean /= nf;
                        hx_mean /= nf;
                        for j in 0..n {
                            let xhat = (arow[j] - mean) * inv_std;
                            da[i * n + j] +=
                                inv_std * (grow[j] * gv[j] - h_mean - xhat * hx_mean);
                        }
                    }
                }
                {
                    let dg = ensure(&mut grads[gain.0], n);
                    for i in 0..m {
                        let inv_std = inv_stds[i];
                        let mean = means[i];
                        for j in 0..n {
                            let xhat = (av[i * n + j] - mean) * inv_std;
                            dg[j] += g[i * n + j] * xhat;
                        }
                    }
                }
                let db = ensure(&mut grads[bias.0], n);
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
            }
            Op::Transpose { a, out } => {
                let g = out_grad!(out);
                let (m, n) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                let da = ensure(&mut grads[a.0], m * n);
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::SliceCols { a, start, out } => {
                let g = out_grad!(out);
                let (m, n) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                let len = self.nodes[out.0].cols();
                let da = ensure(&mut grads[a.0], m * n);
                for i in 0..m {
                    for j in 0..len {
                        da[i * n + start + j] += g[i * len + j];
                    }
                }
            }
            Op::ConcatRows { parts, out } => {
                let g = out_grad!(out);
                let mut offset = 0;
                for p in parts {
                    let numel = self.nodes[p.0].numel();
                    let dp = ensure(&mut grads[p.0], numel);
                    for (d, &gv) in dp.iter_mut().zip(g[offset..offset + numel].iter()) {
                        *d += gv;
                    }
                    offset += numel;
                }
            }
            Op::ConcatCols { parts, out } => {
                let g = out_grad!(out);
                let m = self.nodes[out.0].rows();
                let width = self.nodes[out.0].cols();
                let mut offset = 0;
                for p in parts {
                    let pn = self.nodes[p.0].cols();
                    let dp = ensure(&mut grads[p.0], m * pn);
                    for i in 0..m {
                        for j in 0..pn {
                            dp[i * pn + j] += g[i * width + offset + j];
                        }
                    }
                    offset += pn;
                }
            }
            Op::Reshape { a, out } => {
                let g = out_grad!(out);
                let da = ensure(&mut grads[a.0], g.len());
                for (d, &gv) in da.iter_mut().zip(g.iter()) {
                    *d += gv;
                }
            }
            Op::Dropout { a, mask, keep, out } => {
                let g = out_grad!(out);
                let da = ensure(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    if mask[i] {
                        da[i] += g[i] / *keep;
                    }
                }
            }
            Op::BceLoss { pred, labels, out } => {
                let g = out_grad!(out)[0];
                let eps = F::lit(PROB_CLAMP_EPS);
                let one = F::one();
                let mf = F::lit(labels.len() as f64);
                let pv = self.nodes[pred.0].data();
                let dp = ensure(&mut grads[pred.0], labels.len());
                for (i, &a) in labels.iter().enumerate() {
                    let p = pv[i];
                    // flat inside the clamp region
                    if p <= eps || p >= one - eps {
                        continue;
                    }
                    dp[i] += g * (-a / p + (one - a) / (one - p)) / mf;
                }
            }
            Op::CceLoss { pred, labels, classes, out } => {
                let g = out_grad!(out)[0];
                let eps = F::lit(PROB_CLAMP_EPS);
                let one = F::one();
                let b = *classes;
                let m = labels.len() / b;
                let mf = F::lit(m as f64);
                let pv = self.nodes[pred.0].data();
                let dp = ensure(&mut grads[pred.0], labels.len());
                for i in 0..labels.len() {
                    if labels[i] == one {
                        let p = pv[i];
                        if p <= eps || p >= one - eps {
                            continue;
                        }
                        dp[i] -= g / (p * mf);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv1d_moving_sum() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let k = tape.constant(Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![1]));
        let out = tape.conv1d(i, k, b).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 1]);
        assert_eq!(tape.value(out).data(), &[3.0, 5.0]);
    }

    #[test]
    fn conv1d_output_length_and_zero_kernel() {
        let mut tape = Tape::<f32>::new();
        let i = tape.constant(Tensor::new(vec![100, 1], vec![0.25; 100]).unwrap());
        let k = tape.constant(Tensor::new(vec![3, 1, 4], vec![0.0; 12]).unwrap());
        let b = tape.constant(Tensor::new(vec![4], vec![7.0; 4]).unwrap());
        let out = tape.conv1d(i, k, b).unwrap();
        assert_eq!(tape.value(out).shape(), &[98, 4]);
        assert!(tape.value(out).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn conv1d_shape_errors() {
        let mut tape = Tape::<f32>::new();
        let short = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let k = tape.constant(Tensor::new(vec![3, 1, 1], vec![1.0; 3]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert!(matches!(tape.conv1d(short, k, b), Err(crate::HctError::Shape(_))));

        let two_ch = tape.constant(Tensor::new(vec![5, 2], vec![1.0; 10]).unwrap());
        assert!(matches!(tape.conv1d(two_ch, k, b), Err(crate::HctError::Shape(_))));
    }

    #[test]
    fn maxpool_pairs_and_short_input() {
        let mut tape = Tape::<f32>::new();
        let i = tape.constant(Tensor::new(vec![4, 1], vec![1.0, 3.0, 2.0, 5.0]).unwrap());
        let out = tape.maxpool1d(i).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 5.0]);

        let single = tape.constant(Tensor::new(vec![1, 1], vec![7.0]).unwrap());
        assert!(matches!(tape.maxpool1d(single), Err(crate::HctError::Shape(_))));
    }

    #[test]
    fn maxpool_monotone_takes_second_of_each_pair() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..96).map(|v| v as f32).collect();
        let i = tape.constant(Tensor::new(vec![96, 1], data).unwrap());
        let out = tape.maxpool1d(i).unwrap();
        assert_eq!(tape.value(out).shape(), &[48, 1]);
        for (t, &v) in tape.value(out).iter().enumerate() {
            assert_eq!(v, (2 * t + 1) as f32);
        }
    }

    #[test]
    fn maxpool_drops_trailing_odd_sample() {
        let mut tape = Tape::<f32>::new();
        let i = tape.constant(Tensor::new(vec![5, 1], vec![1.0, 2.0, 3.0, 4.0, 99.0]).unwrap());
        let out = tape.maxpool1d(i).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let y = tape.matmul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!((grads.get(0)[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sigmoid_at_zero_is_quarter() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y)[0], 0.5);
        let grads = tape.backward(y).unwrap();
        assert!((grads.get(0)[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(crate::HctError::Contract(_))));
    }

    #[test]
    fn unreachable_params_get_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&Tensor::scalar(2.0));
        let unused = tape.param(&Tensor::vector(vec![1.0, 1.0]));
        let y = tape.matmul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.len(), 2);
        assert!(grads.get(1).iter().all(|&v| v == 0.0));
        let _ = unused;
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![5.0, 5.0, 5.0, -1.0, 0.0, 3.0]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).data();
        for i in 0..3 {
            assert!((v[i] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((v[3..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn layer_norm_rows_standardizes_pre_affine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]).unwrap());
        let gain = tape.constant(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let bias = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.layer_norm_rows(x, gain, bias).unwrap();
        let v = tape.value(y).data();
        for r in 0..2 {
            let row = &v[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dropout_forward_and_backward_are_deterministic_per_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut tape = Tape::<f32>::new();
            let x = tape.param(&Tensor::new(vec![1, 64], vec![0.5; 64]).unwrap());
            let d = tape.dropout(x, 0.3, &mut rng).unwrap();
            let ones = tape.constant(Tensor::new(vec![64, 1], vec![1.0; 64]).unwrap());
            let s = tape.matmul(d, ones).unwrap();
            let grads = tape.backward(s).unwrap();
            (tape.value(s)[0], grads.get(0).data().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1.len(), g2.len());
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bce_loss_on_tape_matches_standalone() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap());
        let l = tape.bce_loss(p, &[0.0, 1.0]).unwrap();
        assert!((tape.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cce_loss_rejects_unnormalized_rows() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(vec![1, 3], vec![0.4, 0.4, 0.4]).unwrap());
        assert!(matches!(
            tape.cce_loss(p, &[1.0, 0.0, 0.0], 3),
            Err(crate::HctError::Validation(_))
        ));
    }

    #[test]
    fn cce_loss_uniform_is_ln_three() {
        let mut tape = Tape::<f64>::new();
        let third = 1.0 / 3.0;
        let p = tape.constant(Tensor::new(vec![1, 3], vec![third; 3]).unwrap());
        let l = tape.cce_loss(p, &[0.0, 1.0, 0.0], 3).unwrap();
        assert!((tape.value(l)[0] - 3.0_f64.ln()).abs() < 1e-12);
    }
}
