//! Tape-based reverse-mode differentiation.
//!
//! Every primitive records its inputs and whatever it needs for an exact
//! backward pass. Nodes are created in topological order, so replaying the
//! tape in reverse visits each op exactly once with its output gradient
//! fully accumulated.

use super::conv::{
    conv3d_backward, conv3d_forward, conv_output_size, conv_transpose_output_size,
    tconv3d_backward, tconv3d_forward, ConvGeom,
};
use super::tensor::Tensor;
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    ChannelBias { x: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Relu { x: usize },
    Abs { x: usize },
    Softmax { x: usize },
    LogSoftmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Dropout { x: usize, mask: Vec<f64> },
    Conv3d { x: usize, w: usize, geom: ConvGeom },
    ConvTranspose3d { x: usize, w: usize, geom: ConvGeom },
    GatherRows { table: usize, ids: Vec<usize> },
    SliceRows { x: usize, start: usize },
    ConcatRows { parts: Vec<usize> },
    Reshape { x: usize },
    Transpose2 { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    PickNegLogProb { logp: usize, ids: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one scalar with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. a node; zero tensor if the node does not influence
    /// the differentiated scalar.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => Tensor::new(self.shapes[id.0].clone(), g.clone()).unwrap(),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }
}

/// Records primitive ops and computes exact reverse-mode gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite values out of {op:?}");
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch { op, detail }
    }

    /// Insert a value as a leaf. Leaves receive gradients like any node;
    /// callers simply ignore gradients of constants.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    /// `a (m×k) · b (k×n) -> (m×n)`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Self::shape_err(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        let (av, bv) = (ta.values(), tb.values());
        for i in 0..m {
            let a_row = &av[i * k..][..k];
            let o_row = &mut out[i * n..][..n];
            for (kk, &aik) in a_row.iter().enumerate() {
                let b_row = &bv[kk * n..][..n];
                for (o, &bkj) in o_row.iter_mut().zip(b_row) {
                    *o += aik * bkj;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, value))
    }

    /// Row-broadcast bias: `x (n×m) + b (m)`
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.shape().len() != 2 || tb.shape().len() != 1 || tx.cols() != tb.len() {
            return Err(Self::shape_err(
                "add_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let m = tx.cols();
        let out: Vec<f64> = tx
            .values()
            .chunks_exact(m)
            .flat_map(|row| row.iter().zip(tb.values()).map(|(v, bv)| v + bv))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(Op::AddBias { x: x.0, b: b.0 }, value))
    }

    /// Channel-broadcast bias: `x (C, D, H, W) + b (C)`
    pub fn channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.shape().len() != 4 || tb.shape().len() != 1 || tx.shape()[0] != tb.len() {
            return Err(Self::shape_err(
                "channel_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let vol = tx.len() / tx.shape()[0];
        let mut out = tx.values().to_vec();
        for (c, &bv) in tb.values().iter().enumerate() {
            for v in &mut out[c * vol..][..vol] {
                *v += bv;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(Op::ChannelBias { x: x.0, b: b.0 }, value))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out: Vec<f64> = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, value))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let tx = self.value(x);
        let out: Vec<f64> = tx.values().iter().map(|&v| v * c).collect();
        let value = Tensor::new(tx.shape().to_vec(), out).unwrap();
        self.push(Op::Scale { x: x.0, c }, value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let out: Vec<f64> = tx.values().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(tx.shape().to_vec(), out).unwrap();
        self.push(Op::Relu { x: x.0 }, value)
    }

    /// Elementwise absolute value; subgradient 0 at exact zeros.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let out: Vec<f64> = tx.values().iter().map(|&v| v.abs()).collect();
        let value = Tensor::new(tx.shape().to_vec(), out).unwrap();
        self.push(Op::Abs { x: x.0 }, value)
    }

    fn rowwise_softmax(values: &[f64], cols: usize, log: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(values.len());
        for row in values.chunks_exact(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            if log {
                let lse = max + sum.ln();
                out.extend(row.iter().map(|&v| v - lse));
            } else {
                out.extend(row.iter().map(|&v| (v - max).exp() / sum));
            }
        }
        out
    }

    /// Row-wise softmax over the last axis of a 2-D tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Self::shape_err("softmax", format!("{:?}", tx.shape())));
        }
        let out = Self::rowwise_softmax(tx.values(), tx.cols(), false);
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(Op::Softmax { x: x.0 }, value))
    }

    /// Row-wise log-softmax over the last axis of a 2-D tensor.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Self::shape_err("log_softmax", format!("{:?}", tx.shape())));
        }
        let out = Self::rowwise_softmax(tx.values(), tx.cols(), true);
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(Op::LogSoftmax { x: x.0 }, value))
    }

    /// Layer normalization over the last axis of a 2-D tensor, with learned
    /// per-column gain and shift.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.shape().len() != 2 || tg.len() != tx.cols() || tb.len() != tx.cols() {
            return Err(Self::shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let n = tx.cols();
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.values().chunks_exact(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(
                row.iter()
                    .zip(tg.values().iter().zip(tb.values()))
                    .map(|(&v, (&g, &b))| (v - mean) * inv * g + b),
            );
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps },
            value,
        ))
    }

    /// Inverted dropout: at train time each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; the identity
    /// at `p = 0`. The mask is drawn deterministically from `seed`.
    pub fn dropout(&mut self, x: NodeId, p: f64, seed: u64) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let tx = self.value(x);
        let mut rng = SplitMix64::new(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = tx.values().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), out).unwrap();
        self.push(Op::Dropout { x: x.0, mask }, value)
    }

    /// 3-D convolution: `x (C_in, D, H, W)` with `w (C_out, C_in, k, k, k)`.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (tx, tw) = (self.value(x), self.value(w));
        let geom = Self::conv_geom("conv3d", tx, tw, stride, pad, false)?;
        let out = conv3d_forward(tx.values(), tw.values(), &geom);
        let value = Tensor::new(
            vec![geom.cout, geom.out_dims[0], geom.out_dims[1], geom.out_dims[2]],
            out,
        )?;
        Ok(self.push(Op::Conv3d { x: x.0, w: w.0, geom }, value))
    }

    /// Transposed 3-D convolution: `x (C_in, D, H, W)` with
    /// `w (C_in, C_out, k, k, k)`; output size `(in-1)·stride - 2·pad + k`.
    pub fn conv_transpose3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (tx, tw) = (self.value(x), self.value(w));
        let geom = Self::conv_geom("conv_transpose3d", tx, tw, stride, pad, true)?;
        let out = tconv3d_forward(tx.values(), tw.values(), &geom);
        let value = Tensor::new(
            vec![geom.cout, geom.out_dims[0], geom.out_dims[1], geom.out_dims[2]],
            out,
        )?;
        Ok(self.push(Op::ConvTranspose3d { x: x.0, w: w.0, geom }, value))
    }

    fn conv_geom(
        op: &'static str,
        tx: &Tensor,
        tw: &Tensor,
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<ConvGeom> {
        let xs = tx.shape();
        let ws = tw.shape();
        let ok = xs.len() == 4
            && ws.len() == 5
            && ws[2] == ws[3]
            && ws[3] == ws[4]
            && xs[0] == if transposed { ws[0] } else { ws[1] };
        if !ok {
            return Err(Self::shape_err(op, format!("x {xs:?}, w {ws:?}")));
        }
        let k = ws[2];
        let (cin, cout) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        let in_dims = [xs[1], xs[2], xs[3]];
        let size = |i: usize| {
            if transposed {
                conv_transpose_output_size(i, k, stride, pad)
            } else {
                conv_output_size(i, k, stride, pad)
            }
        };
        let out_dims = [size(xs[1]), size(xs[2]), size(xs[3])];
        if !transposed && in_dims.iter().any(|&d| d + 2 * pad < k) {
            return Err(Self::shape_err(op, format!("input {in_dims:?} smaller than kernel {k}")));
        }
        Ok(ConvGeom { cin, cout, k, stride, pad, in_dims, out_dims })
    }

    /// Embedding lookup: rows of `table (V×D)` selected by `ids`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(Self::shape_err("gather_rows", format!("{:?}", tt.shape())));
        }
        let (v, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Self::shape_err(
                "gather_rows",
                format!("id {bad} out of 0..{v}"),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tt.values()[i * d..][..d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(Op::GatherRows { table: table.0, ids: ids.to_vec() }, value))
    }

    /// Contiguous row slice of a 2-D tensor.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || start + len > tx.rows() {
            return Err(Self::shape_err(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, tx.shape()),
            ));
        }
        let d = tx.cols();
        let out = tx.values()[start * d..(start + len) * d].to_vec();
        let value = Tensor::new(vec![len, d], out)?;
        Ok(self.push(Op::SliceRows { x: x.0, start }, value))
    }

    /// Stack 2-D tensors with equal column count along axis 0.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat_rows", "no parts".into()));
        }
        let d = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.shape().len() != 2 || tp.cols() != d {
                return Err(Self::shape_err(
                    "concat_rows",
                    format!("{:?} vs expected (_, {d})", tp.shape()),
                ));
            }
            rows += tp.rows();
            out.extend_from_slice(tp.values());
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() },
            value,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape { x: x.0 }, value))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Self::shape_err("transpose", format!("{:?}", tx.shape())));
        }
        let (m, n) = (tx.rows(), tx.cols());
        let v = tx.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::Transpose2 { x: x.0 }, value))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).values().iter().sum();
        self.push(Op::Sum { x: x.0 }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let s: f64 = tx.values().iter().sum::<f64>() / tx.len() as f64;
        self.push(Op::Mean { x: x.0 }, Tensor::scalar(s))
    }

    /// `out[i] = -logp[i, ids[i]]` for row-wise log-probabilities.
    pub fn pick_neg_log_prob(&mut self, logp: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tl = self.value(logp);
        if tl.shape().len() != 2 || ids.len() != tl.rows() {
            return Err(Self::shape_err(
                "pick_neg_log_prob",
                format!("{:?} with {} ids", tl.shape(), ids.len()),
            ));
        }
        let c = tl.cols();
        if let Some(&bad) = ids.iter().find(|&&i| i >= c) {
            return Err(Self::shape_err(
                "pick_neg_log_prob",
                format!("class {bad} out of 0..{c}"),
            ));
        }
        let out: Vec<f64> = ids
            .iter()
            .enumerate()
            .map(|(r, &i)| -tl.values()[r * c + i])
            .collect();
        let value = Tensor::new(vec![ids.len()], out)?;
        Ok(self.push(Op::PickNegLogProb { logp: logp.0, ids: ids.to_vec() }, value))
    }

    /// Hash of the piecewise-linear activation pattern (ReLU and Abs signs)
    /// across the whole tape. Two evaluations with equal signatures lie in
    /// the same linear region of every kinked op, so the function is
    /// differentiable between them.
    pub fn relu_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in self.nodes.iter() {
            match node.op {
                Op::Relu { .. } => {
                    for &v in node.value.values() {
                        h = (h ^ u64::from(v > 0.0)).wrapping_mul(0x1000_0000_01b3);
                    }
                }
                Op::Abs { x } => {
                    for &v in self.nodes[x].value.values() {
                        let sign = if v > 0.0 { 2u64 } else if v < 0.0 { 3 } else { 4 };
                        h = (h ^ sign).wrapping_mul(0x1000_0000_01b3);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Exact reverse-mode gradients of a scalar node with respect to every
    /// node on the tape.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn add_to(grads: &mut Vec<Option<Vec<f64>>>, node: usize, len: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[node].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn accumulate(&self, idx: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let val = |i: usize| self.nodes[i].value.values();
        let len = |i: usize| self.nodes[i].value.len();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let n = self.nodes[*b].value.cols();
                let (av, bv) = (val(*a), val(*b));
                // dA = g · Bᵀ
                Self::add_to(grads, *a, m * k, |ga| {
                    for i in 0..m {
                        let g_row = &g[i * n..][..n];
                        let ga_row = &mut ga[i * k..][..k];
                        for kk in 0..k {
                            let b_row = &bv[kk * n..][..n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g_row[j] * b_row[j];
                            }
                            ga_row[kk] += acc;
                        }
                    }
                });
                // dB = Aᵀ · g
                Self::add_to(grads, *b, k * n, |gb| {
                    for i in 0..m {
                        let g_row = &g[i * n..][..n];
                        let a_row = &av[i * k..][..k];
                        for (kk, &aik) in a_row.iter().enumerate() {
                            let gb_row = &mut gb[kk * n..][..n];
                            for j in 0..n {
                                gb_row[j] += aik * g_row[j];
                            }
                        }
                    }
                });
            }
            Op::AddBias { x, b } => {
                let m = self.nodes[*b].value.len();
                Self::add_to(grads, *x, len(*x), |gx| {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                Self::add_to(grads, *b, m, |gb| {
                    for row in g.chunks_exact(m) {
                        for (o, &gi) in gb.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                });
            }
            Op::ChannelBias { x, b } => {
                let c = self.nodes[*b].value.len();
                let vol = len(*x) / c;
                Self::add_to(grads, *x, len(*x), |gx| {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                Self::add_to(grads, *b, c, |gb| {
                    for (ci, o) in gb.iter_mut().enumerate() {
                        *o += g[ci * vol..][..vol].iter().sum::<f64>();
                    }
                });
            }
            Op::Add { a, b } => {
                for &p in [a, b].into_iter() {
                    Self::add_to(grads, p, len(p), |gp| {
                        for (o, &gi) in gp.iter_mut().zip(g) {
                            *o += gi;
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                Self::add_to(grads, *a, len(*a), |ga| {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                Self::add_to(grads, *b, len(*b), |gb| {
                    for (o, &gi) in gb.iter_mut().zip(g) {
                        *o -= gi;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                Self::add_to(grads, *a, len(*a), |ga| {
                    for ((o, &gi), &bvv) in ga.iter_mut().zip(g).zip(&bv) {
                        *o += gi * bvv;
                    }
                });
                Self::add_to(grads, *b, len(*b), |gb| {
                    for ((o, &gi), &avv) in gb.iter_mut().zip(g).zip(&av) {
                        *o += gi * avv;
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                Self::add_to(grads, *x, len(*x), |gx| {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi * c;
                    }
                });
            }
            Op::Relu { x } => {
                let y = self.nodes[idx].value.values().to_vec();
                Self::add_to(grads, *x, len(*x), |gx| {
                    for ((o, &gi), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        if yv > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Abs { x } => {
                let xv = val(*x).to_vec();
                Self::add_to(grads, *x, len(*x), |gx| {
                    for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(&xv) {
                        *o += gi * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::Softmax { x } => {
                let y = self.nodes[idx].value.values().to_vec();
                let cols = self.nodes[idx].value.cols();
                Self::add_to(grads, *x, len(*x), |gx| {
                    for ((gx_row, g_row), y_row) in gx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let dot: f64 = g_row.iter().zip(y_row).map(|(&a, &b)| a * b).sum();
                        for ((o, &gi), &yv) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                            *o += yv * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let y = self.nodes[idx].value.values().to_vec();
                let cols = self.nodes[idx].value.cols();
                Self::add_to(grads, *x, len(*x), |gx| {
                    for ((gx_row, g_row), y_row) in gx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let gsum: f64 = g_row.iter().sum();
                        for ((o, &gi), &yv) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                            *o += gi - yv.exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = val(*x).to_vec();
                let gv = val(*gamma).to_vec();
                let n = self.nodes[*x].value.cols();
                let rows = self.nodes[*x].value.rows();
                let nf = n as f64;
                // Recompute row statistics; cheaper than saving them.
                let mut xhat = vec![0.0; xv.len()];
                let mut inv_std = vec![0.0; rows];
                for (r, row) in xv.chunks_exact(n).enumerate() {
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_std[r] = inv;
                    for (o, &v) in xhat[r * n..][..n].iter_mut().zip(row) {
                        *o = (v - mean) * inv;
                    }
                }
                Self::add_to(grads, *beta, n, |gb| {
                    for g_row in g.chunks_exact(n) {
                        for (o, &gi) in gb.iter_mut().zip(g_row) {
                            *o += gi;
                        }
                    }
                });
                Self::add_to(grads, *gamma, n, |gg| {
                    for (g_row, xh_row) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((o, &gi), &xh) in gg.iter_mut().zip(g_row).zip(xh_row) {
                            *o += gi * xh;
                        }
                    }
                });
                Self::add_to(grads, *x, xv.len(), |gx| {
                    for (r, (g_row, xh_row)) in
                        g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate()
                    {
                        let dxhat: Vec<f64> =
                            g_row.iter().zip(&gv).map(|(&gi, &ga)| gi * ga).collect();
                        let m1 = dxhat.iter().sum::<f64>() / nf;
                        let m2 = dxhat.iter().zip(xh_row).map(|(&d, &xh)| d * xh).sum::<f64>() / nf;
                        for ((o, &d), &xh) in
                            gx[r * n..][..n].iter_mut().zip(&dxhat).zip(xh_row)
                        {
                            *o += inv_std[r] * (d - m1 - xh * m2);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                let mask = mask.clone();
                Self::add_to(grads, *x, len(*x), |gx| {
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(&mask) {
                        *o += gi * m;
                    }
                });
            }
            Op::Conv3d { x, w, geom } => {
                let (gx, gw) = conv3d_backward(val(*x), val(*w), g, geom);
                Self::add_to(grads, *x, len(*x), |s| {
                    for (o, v) in s.iter_mut().zip(&gx) {
                        *o += v;
                    }
                });
                Self::add_to(grads, *w, len(*w), |s| {
                    for (o, v) in s.iter_mut().zip(&gw) {
                        *o += v;
                    }
                });
            }
            Op::ConvTranspose3d { x, w, geom } => {
                let (gx, gw) = tconv3d_backward(val(*x), val(*w), g, geom);
                Self::add_to(grads, *x, len(*x), |s| {
                    for (o, v) in s.iter_mut().zip(&gx) {
                        *o += v;
                    }
                });
                Self::add_to(grads, *w, len(*w), |s| {
                    for (o, v) in s.iter_mut().zip(&gw) {
                        *o += v;
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = self.nodes[*table].value.cols();
                let ids = ids.clone();
                Self::add_to(grads, *table, len(*table), |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, &gi) in gt[i * d..][..d].iter_mut().zip(&g[r * d..][..d]) {
                            *o += gi;
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let d = self.nodes[*x].value.cols();
                let offset = *start * d;
                Self::add_to(grads, *x, len(*x), |gx| {
                    for (o, &gi) in gx[offset..][..g.len()].iter_mut().zip(g) {
                        *o += gi;
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts.clone().iter() {
                    let n = len(p);
                    let piece = g[offset..][..n].to_vec();
                    Self::add_to(grads, p, n, |gp| {
                        for (o, &gi) in gp.iter_mut().zip(&piece) {
                            *o += gi;
                        }
                    });
                    offset += n;
                }
            }
            Op::Reshape { x } => {
                Self::add_to(grads, *x, len(*x), |gx| {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
            }
            Op::Transpose2 { x } => {
                // Output was (n, m) for input (m, n); transpose the gradient back.
                let m = self.nodes[*x].value.rows();
                let n = self.nodes[*x].value.cols();
                Self::add_to(grads, *x, m * n, |gx| {
                    for j in 0..n {
                        for i in 0..m {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let gi = g[0];
                Self::add_to(grads, *x, len(*x), |gx| {
                    for o in gx.iter_mut() {
                        *o += gi;
                    }
                });
            }
            Op::Mean { x } => {
                let gi = g[0] / len(*x) as f64;
                Self::add_to(grads, *x, len(*x), |gx| {
                    for o in gx.iter_mut() {
                        *o += gi;
                    }
                });
            }
            Op::PickNegLogProb { logp, ids } => {
                let c = self.nodes[*logp].value.cols();
                let ids = ids.clone();
                Self::add_to(grads, *logp, len(*logp), |gl| {
                    for (r, &i) in ids.iter().enumerate() {
                        gl[r * c + i] -= g[r];
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], v).unwrap()
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 2, vec![0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_positive() {
        let mut rng = SplitMix64::new(2);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(vec![7, 9], 3.0, &mut rng));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).values().chunks_exact(9) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 2, vec![-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).values(), &[0.0, 2.0]);
    }

    #[test]
    fn tconv_output_shape_4_to_8() {
        let mut tape = Tape::new();
        let mut rng = SplitMix64::new(3);
        let x = tape.leaf(Tensor::randn(vec![2, 4, 4, 4], 1.0, &mut rng));
        let w = tape.leaf(Tensor::randn(vec![2, 3, 4, 4, 4], 0.1, &mut rng));
        let y = tape.conv_transpose3d(x, w, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 8, 8, 8]);
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).values(), &[6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut rng = SplitMix64::new(4);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(vec![1, 5], 2.0, &mut rng));
        let y = tape.softmax(x).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        for &gv in grads.wrt(x).values() {
            assert!(gv.abs() < 1e-12, "gradient {gv} should vanish");
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 2, vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, vec![0.0; 6]));
        let b = tape.leaf(t2(2, 3, vec![0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn dropout_deterministic_and_inverted() {
        let mut rng = SplitMix64::new(5);
        let x = Tensor::randn(vec![4, 8], 1.0, &mut rng);
        let run = |seed| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let y = tape.dropout(xid, 0.5, seed);
            tape.value(y).values().to_vec()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        // Survivors are scaled by 1/(1-p).
        for (&xv, &yv) in x.values().iter().zip(run(7).iter()) {
            assert!(yv == 0.0 || (yv - 2.0 * xv).abs() < 1e-15);
        }
        // p = 0 is the identity.
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let y = tape.dropout(xid, 0.0, 3);
        assert_eq!(tape.value(y).values(), x.values());
    }

    #[test]
    fn gather_rows_and_backward_scatter() {
        let mut tape = Tape::new();
        let table = tape.leaf(t2(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = tape.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(picked).values(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(picked);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(table).values(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(1, 3, vec![1.0, 2.0, 3.0]));
        let b = tape.leaf(t2(2, 3, vec![4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let cat = tape.concat_rows(&[a, b]).unwrap();
        let mid = tape.slice_rows(cat, 1, 1).unwrap();
        assert_eq!(tape.value(mid).values(), &[4.0, 5.0, 6.0]);
        let s = tape.sum(mid);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(a).values(), &[0.0; 3]);
        assert_eq!(grads.wrt(b).values(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
