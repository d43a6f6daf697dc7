//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of a forward pass in creation order
//! (which is therefore a topological order), then [`Tape::backward`] sweeps
//! the records once in reverse, accumulating gradients into every node that
//! transitively feeds the loss. The op set is exactly what the classifier
//! needs: dense algebra, convolution/pooling, gated recalibrations,
//! masked softmax, batchnorm/dropout, and a binary cross-entropy head.

use rand::Rng;

use super::{Mode, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to one tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

enum Op<F> {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: F },
    OneMinus { a: Var },
    AddRowBias { m: Var, bias: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Conv2d { input: Var, kernels: Var, geom: ConvGeom },
    MaxPool2 { a: Var, argmax: Vec<usize> },
    Gap { a: Var },
    MeanRows { a: Var },
    MaskedSoftmax { a: Var, mask: Vec<bool> },
    StackRows { rows: Vec<Var> },
    Concat { parts: Vec<Var> },
    Reshape { a: Var },
    Row { a: Var, idx: usize },
    Gather { table: Var, rows: Vec<usize> },
    MulChannelGate { z: Var, gate: Var },
    MulSpatialGate { z: Var, gate: Var },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, inv_std: Vec<F> },
    BatchNormInfer { x: Var, gamma: Var, beta: Var, mean: Vec<F>, inv_std: Vec<F> },
    Dropout { a: Var, mask: Vec<F> },
    Sum { a: Var },
    Mean { a: Var },
    BceBatch { p: Var, labels: Vec<F>, eps: F },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf: participates in the forward pass, receives no gradient.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf: gradient is accumulated and readable after backward.
    pub fn param(&mut self, value: &Tensor<F>) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of a node after [`Tape::backward`]; `None` if the node does
    /// not require grad or was unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter, defaulting to zeros when the loss never
    /// touched it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<F> {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(v).shape()),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, value: Tensor<F>, op: Op<F>) -> Var {
        let rg = self.requires(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor<F>, op: Op<F>) -> Var {
        let rg = self.requires(a) || self.requires(b);
        self.push(value, op, rg)
    }

    // ── Elementwise and dense algebra ────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        let da = self.value(a).data();
        let db = self.value(b).data();
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == F::zero() {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(a, b, value, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.binary(a, b, value, op))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.unary(a, value, Op::Scale { a, c })
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| F::one() - x);
        self.unary(a, value, Op::OneMinus { a })
    }

    /// `[r x c] + [c]`, bias broadcast over rows.
    pub fn add_row_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (sm, sb) = (self.value(m).shape(), self.value(bias).shape());
        if sm.len() != 2 || sb.len() != 1 || sm[1] != sb[0] {
            return Err(Error::shape("add_row_bias", format!("{sm:?} + {sb:?}")));
        }
        let (r, c) = (sm[0], sm[1]);
        let mut data = self.value(m).data().to_vec();
        let bd = self.value(bias).data();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bd[j];
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.binary(m, bias, value, Op::AddRowBias { m, bias }))
    }

    // ── Activations ──────────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| F::one() / (F::one() + (-x).exp()));
        self.unary(a, value, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        self.unary(a, value, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(F::zero()));
        self.unary(a, value, Op::Relu { a })
    }

    pub fn activation(&mut self, a: Var, kind: ActivationKind) -> Var {
        match kind {
            ActivationKind::Sigmoid => self.sigmoid(a),
            ActivationKind::Tanh => self.tanh(a),
            ActivationKind::Relu => self.relu(a),
        }
    }

    // ── Convolution and pooling ──────────────────────────────────────

    /// Cross-correlation of `input [H x W x Cin]` with
    /// `kernels [kh x kw x Cin x Cout]`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: Padding) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernels).shape().to_vec();
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {si:?}, kernels {sk:?}")));
        }
        if si[2] != sk[2] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} != kernel channels {}", si[2], sk[2]),
            ));
        }
        if stride == 0 {
            return Err(Error::Param("conv2d stride must be >= 1".into()));
        }
        let (h, w, cin) = (si[0], si[1], si[2]);
        let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
        let geom = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape(
                        "conv2d",
                        format!("kernel {kh}x{kw} larger than input {h}x{w} (valid padding)"),
                    ));
                }
                ConvGeom {
                    h,
                    w,
                    cin,
                    kh,
                    kw,
                    cout,
                    stride,
                    pad_top: 0,
                    pad_left: 0,
                    out_h: (h - kh) / stride + 1,
                    out_w: (w - kw) / stride + 1,
                }
            }
            Padding::Same => {
                let out_h = h.div_ceil(stride);
                let out_w = w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
                if kh > h + pad_h || kw > w + pad_w {
                    return Err(Error::shape(
                        "conv2d",
                        format!("kernel {kh}x{kw} larger than padded input"),
                    ));
                }
                ConvGeom {
                    h,
                    w,
                    cin,
                    kh,
                    kw,
                    cout,
                    stride,
                    pad_top: pad_h / 2,
                    pad_left: pad_w / 2,
                    out_h,
                    out_w,
                }
            }
        };
        let din = self.value(input).data();
        let dk = self.value(kernels).data();
        let mut out = vec![F::zero(); geom.out_h * geom.out_w * cout];
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - geom.pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - geom.pad_left as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_base = (iy as usize * w + ix as usize) * cin;
                        let k_base = (ky * kw + kx) * cin * cout;
                        let out_base = (oy * geom.out_w + ox) * cout;
                        for ci in 0..cin {
                            let iv = din[in_base + ci];
                            if iv == F::zero() {
                                continue;
                            }
                            let krow = &dk[k_base + ci * cout..k_base + (ci + 1) * cout];
                            let orow = &mut out[out_base..out_base + cout];
                            for (o, &kv) in orow.iter_mut().zip(krow) {
                                *o += iv * kv;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![geom.out_h, geom.out_w, cout], out)?;
        Ok(self.binary(input, kernels, value, Op::Conv2d { input, kernels, geom }))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 || s[0] < 2 || s[1] < 2 {
            return Err(Error::shape("maxpool2", format!("{s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let d = self.value(a).data();
        let mut out = vec![F::zero(); oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if d[idx] > best {
                                best = d[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (oy * ow + ox) * c + ch;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let value = Tensor::new(vec![oh, ow, c], out)?;
        Ok(self.unary(a, value, Op::MaxPool2 { a, argmax }))
    }

    /// Global average pooling: `[H x W x C] -> [C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let d = self.value(a).data();
        let norm = F::from_f64((h * w) as f64);
        let mut out = vec![F::zero(); c];
        for p in 0..h * w {
            for ch in 0..c {
                out[ch] += d[p * c + ch];
            }
        }
        for o in out.iter_mut() {
            *o /= norm;
        }
        let value = Tensor::from_vec(out);
        Ok(self.unary(a, value, Op::Gap { a }))
    }

    /// Row mean: `[n x d] -> [d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("mean_rows", format!("{s:?}")));
        }
        let (n, dim) = (s[0], s[1]);
        let d = self.value(a).data();
        let norm = F::from_f64(n as f64);
        let mut out = vec![F::zero(); dim];
        for i in 0..n {
            for j in 0..dim {
                out[j] += d[i * dim + j];
            }
        }
        for o in out.iter_mut() {
            *o /= norm;
        }
        let value = Tensor::from_vec(out);
        Ok(self.unary(a, value, Op::MeanRows { a }))
    }

    // ── Softmax ──────────────────────────────────────────────────────

    /// Numerically stable softmax over the valid entries of a 1-D logit
    /// vector; masked-out entries are exactly zero in the output.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 1 || s[0] != mask.len() {
            return Err(Error::shape(
                "masked_softmax",
                format!("logits {:?}, mask length {}", s, mask.len()),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllMasked);
        }
        let d = self.value(a).data();
        let mut max = F::neg_infinity();
        for (v, &m) in d.iter().zip(mask) {
            if m && *v > max {
                max = *v;
            }
        }
        let mut out = vec![F::zero(); d.len()];
        let mut total = F::zero();
        for (i, (&v, &m)) in d.iter().zip(mask).enumerate() {
            if m {
                let e = (v - max).exp();
                out[i] = e;
                total += e;
            }
        }
        for o in out.iter_mut() {
            *o /= total;
        }
        let value = Tensor::from_vec(out);
        Ok(self.unary(a, value, Op::MaskedSoftmax { a, mask: mask.to_vec() }))
    }

    // ── Structural ops ───────────────────────────────────────────────

    /// Stack n same-length 1-D vectors into an `[n x d]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows", "no rows".to_string()));
        }
        let d = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut rg = false;
        for &r in rows {
            let v = self.value(r);
            if v.rank() != 1 || v.len() != d {
                return Err(Error::shape(
                    "stack_rows",
                    format!("expected [{}], got {:?}", d, v.shape()),
                ));
            }
            data.extend_from_slice(v.data());
            rg |= self.requires(r);
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(value, Op::StackRows { rows: rows.to_vec() }, rg))
    }

    /// Concatenate 1-D vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts".to_string()));
        }
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 1 {
                return Err(Error::shape("concat", format!("non-vector part {:?}", v.shape())));
            }
            data.extend_from_slice(v.data());
            rg |= self.requires(p);
        }
        let value = Tensor::from_vec(data);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.unary(a, value, Op::Reshape { a }))
    }

    /// Extract row `idx` of an `[n x d]` matrix as a `[d]` vector.
    pub fn row(&mut self, a: Var, idx: usize) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 || idx >= s[0] {
            return Err(Error::shape("row", format!("row {idx} of {s:?}")));
        }
        let d = s[1];
        let data = self.value(a).data()[idx * d..(idx + 1) * d].to_vec();
        let value = Tensor::from_vec(data);
        Ok(self.unary(a, value, Op::Row { a, idx }))
    }

    /// Gather rows of a `[V x d]` table into `[len x d]`; the backward pass
    /// scatter-adds into the table, so repeated indices accumulate.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.value(table).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("gather", format!("table {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::shape("gather", format!("row {bad} out of range for {s:?}")));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&td[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.unary(table, value, Op::Gather { table, rows: rows.to_vec() }))
    }

    // ── Gated recalibration ──────────────────────────────────────────

    /// `z [h x w x c]` scaled per channel by `gate [c]`.
    pub fn mul_channel_gate(&mut self, z: Var, gate: Var) -> Result<Var> {
        let (sz, sg) = (self.value(z).shape().to_vec(), self.value(gate).shape().to_vec());
        if sz.len() != 3 || sg.len() != 1 || sz[2] != sg[0] {
            return Err(Error::shape("mul_channel_gate", format!("{sz:?} x {sg:?}")));
        }
        let c = sz[2];
        let zd = self.value(z).data();
        let gd = self.value(gate).data();
        let data: Vec<F> = zd.iter().enumerate().map(|(i, &v)| v * gd[i % c]).collect();
        let value = Tensor::new(sz, data)?;
        Ok(self.binary(z, gate, value, Op::MulChannelGate { z, gate }))
    }

    /// `z [h x w x c]` scaled per spatial position by `gate [h x w]`.
    pub fn mul_spatial_gate(&mut self, z: Var, gate: Var) -> Result<Var> {
        let (sz, sg) = (self.value(z).shape().to_vec(), self.value(gate).shape().to_vec());
        if sz.len() != 3 || sg.len() != 2 || sz[0] != sg[0] || sz[1] != sg[1] {
            return Err(Error::shape("mul_spatial_gate", format!("{sz:?} x {sg:?}")));
        }
        let c = sz[2];
        let zd = self.value(z).data();
        let gd = self.value(gate).data();
        let data: Vec<F> = zd.iter().enumerate().map(|(i, &v)| v * gd[i / c]).collect();
        let value = Tensor::new(sz, data)?;
        Ok(self.binary(z, gate, value, Op::MulSpatialGate { z, gate }))
    }

    // ── Batch normalization ──────────────────────────────────────────

    /// Train-mode batchnorm over `x [B x D]`. Returns the normalized output
    /// plus the batch mean/variance so the caller can update running stats.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Tensor<F>, Tensor<F>)> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("batchnorm", format!("{s:?}")));
        }
        let (b, d) = (s[0], s[1]);
        if b < 2 {
            return Err(Error::Param(format!("batchnorm requires batch size >= 2 in train mode, got {b}")));
        }
        self.check_bn_params(gamma, beta, d)?;
        let xd = self.value(x).data();
        let nb = F::from_f64(b as f64);
        let epsf = F::from_f64(eps);
        let mut mean = vec![F::zero(); d];
        for i in 0..b {
            for j in 0..d {
                mean[j] += xd[i * d + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= nb;
        }
        let mut var = vec![F::zero(); d];
        for i in 0..b {
            for j in 0..d {
                let c = xd[i * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        for v in var.iter_mut() {
            *v /= nb;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + epsf).sqrt()).collect();
        let mut xhat = vec![F::zero(); b * d];
        for i in 0..b {
            for j in 0..d {
                xhat[i * d + j] = (xd[i * d + j] - mean[j]) * inv_std[j];
            }
        }
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = vec![F::zero(); b * d];
        for i in 0..b {
            for j in 0..d {
                out[i * d + j] = gd[j] * xhat[i * d + j] + bd[j];
            }
        }
        let value = Tensor::new(vec![b, d], out)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let node = self.push(
            value,
            Op::BatchNormTrain { x, gamma, beta, xhat: xhat.clone(), inv_std },
            rg,
        );
        Ok((node, Tensor::from_vec(mean), Tensor::from_vec(var)))
    }

    /// Infer-mode batchnorm using fixed running statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<F>,
        running_var: &Tensor<F>,
        eps: f64,
    ) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("batchnorm", format!("{s:?}")));
        }
        let (b, d) = (s[0], s[1]);
        self.check_bn_params(gamma, beta, d)?;
        if running_mean.len() != d || running_var.len() != d {
            return Err(Error::shape(
                "batchnorm",
                format!("running stats of length {}/{} for width {}", running_mean.len(), running_var.len(), d),
            ));
        }
        let epsf = F::from_f64(eps);
        let inv_std: Vec<F> =
            running_var.data().iter().map(|&v| F::one() / (v + epsf).sqrt()).collect();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let md = running_mean.data();
        let mut out = vec![F::zero(); b * d];
        for i in 0..b {
            for j in 0..d {
                out[i * d + j] = gd[j] * (xd[i * d + j] - md[j]) * inv_std[j] + bd[j];
            }
        }
        let value = Tensor::new(vec![b, d], out)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let mean = md.to_vec();
        Ok(self.push(value, Op::BatchNormInfer { x, gamma, beta, mean, inv_std }, rg))
    }

    fn check_bn_params(&self, gamma: Var, beta: Var, d: usize) -> Result<()> {
        let (sg, sb) = (self.value(gamma).shape(), self.value(beta).shape());
        if sg != [d] || sb != [d] {
            return Err(Error::shape(
                "batchnorm",
                format!("gamma {sg:?} / beta {sb:?} for feature width {d}"),
            ));
        }
        Ok(())
    }

    // ── Dropout ──────────────────────────────────────────────────────

    /// Inverted dropout. Identity in infer mode or at rate 0; in train mode
    /// each entry is zeroed with probability `rate` and survivors scaled by
    /// `1/(1-rate)`, with the mask drawn from the supplied generator.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(a);
        }
        let keep = F::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(a).len())
            .map(|_| if rng.random_range(0.0..1.0) < rate { F::zero() } else { keep })
            .collect();
        let data: Vec<F> =
            self.value(a).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.unary(a, value, Op::Dropout { a, mask }))
    }

    // ── Reductions and loss ──────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let total: F = self.value(a).data().iter().copied().sum();
        self.unary(a, Tensor::scalar(total), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::from_f64(self.value(a).len() as f64);
        let total: F = self.value(a).data().iter().copied().sum();
        self.unary(a, Tensor::scalar(total / n), Op::Mean { a })
    }

    /// Mean binary cross-entropy over a `[n]` vector of probabilities, each
    /// clamped to `[eps, 1-eps]` before the logs.
    pub fn bce_batch(&mut self, p: Var, labels: &[f64], eps: f64) -> Result<Var> {
        let s = self.value(p).shape();
        if s.len() != 1 || s[0] != labels.len() {
            return Err(Error::shape(
                "bce",
                format!("probabilities {:?} vs {} labels", s, labels.len()),
            ));
        }
        let epsf = F::from_f64(eps);
        let one = F::one();
        let n = F::from_f64(labels.len() as f64);
        let mut total = F::zero();
        for (&pv, &y) in self.value(p).data().iter().zip(labels) {
            let pc = pv.max(epsf).min(one - epsf);
            let yf = F::from_f64(y);
            total -= yf * pc.ln() + (one - yf) * (one - pc).ln();
        }
        let labels_f: Vec<F> = labels.iter().map(|&y| F::from_f64(y)).collect();
        let value = Tensor::scalar(total / n);
        Ok(self.unary(p, value, Op::BceBatch { p, labels: labels_f, eps: epsf }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every grad-requiring
    /// node reachable from the loss become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor { shape: self.nodes[i].value.shape().to_vec(), data })
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Vec<F>>], v: Var, contrib: &dyn Fn(&mut [F])| {
            if !self.requires(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.value(v).len()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                let nn = self.value(*b).shape()[1];
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                // dA = g . B^T
                acc(grads, *a, &|ga: &mut [F]| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = F::zero();
                            for j in 0..nn {
                                s += g[i * nn + j] * db[p * nn + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                // dB = A^T . g
                acc(grads, *b, &|gb: &mut [F]| {
                    for p in 0..k {
                        for j in 0..nn {
                            let mut s = F::zero();
                            for i in 0..m {
                                s += da[i * k + p] * g[i * nn + j];
                            }
                            gb[p * nn + j] += s;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(grads, *a, &|ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
                acc(grads, *b, &|gb| {
                    for (x, &gv) in gb.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                acc(grads, *a, &|ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
                acc(grads, *b, &|gb| {
                    for (x, &gv) in gb.iter_mut().zip(g) {
                        *x -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                acc(grads, *a, &|ga| {
                    for ((x, &gv), &bv) in ga.iter_mut().zip(g).zip(db) {
                        *x += gv * bv;
                    }
                });
                acc(grads, *b, &|gb| {
                    for ((x, &gv), &av) in gb.iter_mut().zip(g).zip(da) {
                        *x += gv * av;
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                acc(grads, *a, &|ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv * c;
                    }
                });
            }
            Op::OneMinus { a } => {
                acc(grads, *a, &|ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x -= gv;
                    }
                });
            }
            Op::AddRowBias { m, bias } => {
                let c = self.value(*bias).len();
                acc(grads, *m, &|gm| {
                    for (x, &gv) in gm.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
                acc(grads, *bias, &|gb| {
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % c] += gv;
                    }
                });
            }
            Op::Sigmoid { a } => {
                let out = node.value.data();
                acc(grads, *a, &|ga| {
                    for ((x, &gv), &s) in ga.iter_mut().zip(g).zip(out) {
                        *x += gv * s * (F::one() - s);
                    }
                });
            }
            Op::Tanh { a } => {
                let out = node.value.data();
                acc(grads, *a, &|ga| {
                    for ((x, &gv), &t) in ga.iter_mut().zip(g).zip(out) {
                        *x += gv * (F::one() - t * t);
                    }
                });
            }
            Op::Relu { a } => {
                let inp = self.value(*a).data();
                acc(grads, *a, &|ga| {
                    for ((x, &gv), &v) in ga.iter_mut().zip(g).zip(inp) {
                        if v > F::zero() {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Conv2d { input, kernels, geom } => {
                let geom = *geom;
                let din = self.value(*input).data();
                let dk = self.value(*kernels).data();
                let (h, w, cin, cout) = (geom.h, geom.w, geom.cin, geom.cout);
                acc(grads, *input, &|gi: &mut [F]| {
                    for oy in 0..geom.out_h {
                        for ox in 0..geom.out_w {
                            for ky in 0..geom.kh {
                                let iy = (oy * geom.stride + ky) as isize - geom.pad_top as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..geom.kw {
                                    let ix =
                                        (ox * geom.stride + kx) as isize - geom.pad_left as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let in_base = (iy as usize * w + ix as usize) * cin;
                                    let k_base = (ky * geom.kw + kx) * cin * cout;
                                    let out_base = (oy * geom.out_w + ox) * cout;
                                    for ci in 0..cin {
                                        let mut s = F::zero();
                                        let krow =
                                            &dk[k_base + ci * cout..k_base + (ci + 1) * cout];
                                        let grow = &g[out_base..out_base + cout];
                                        for (&kv, &gv) in krow.iter().zip(grow) {
                                            s += kv * gv;
                                        }
                                        gi[in_base + ci] += s;
                                    }
                                }
                            }
                        }
                    }
                });
                acc(grads, *kernels, &|gk: &mut [F]| {
                    for oy in 0..geom.out_h {
                        for ox in 0..geom.out_w {
                            for ky in 0..geom.kh {
                                let iy = (oy * geom.stride + ky) as isize - geom.pad_top as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..geom.kw {
                                    let ix =
                                        (ox * geom.stride + kx) as isize - geom.pad_left as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let in_base = (iy as usize * w + ix as usize) * cin;
                                    let k_base = (ky * geom.kw + kx) * cin * cout;
                                    let out_base = (oy * geom.out_w + ox) * cout;
                                    for ci in 0..cin {
                                        let iv = din[in_base + ci];
                                        if iv == F::zero() {
                                            continue;
                                        }
                                        let kslot =
                                            &mut gk[k_base + ci * cout..k_base + (ci + 1) * cout];
                                        let grow = &g[out_base..out_base + cout];
                                        for (kv, &gv) in kslot.iter_mut().zip(grow) {
                                            *kv += iv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { a, argmax } => {
                acc(grads, *a, &|ga| {
                    for (o, &src) in argmax.iter().enumerate() {
                        ga[src] += g[o];
                    }
                });
            }
            Op::Gap { a } => {
                let s = self.value(*a).shape();
                let (hw, c) = (s[0] * s[1], s[2]);
                let norm = F::from_f64(hw as f64);
                acc(grads, *a, &|ga| {
                    for p in 0..hw {
                        for ch in 0..c {
                            ga[p * c + ch] += g[ch] / norm;
                        }
                    }
                });
            }
            Op::MeanRows { a } => {
                let s = self.value(*a).shape();
                let (rows, d) = (s[0], s[1]);
                let norm = F::from_f64(rows as f64);
                acc(grads, *a, &|ga| {
                    for r in 0..rows {
                        for j in 0..d {
                            ga[r * d + j] += g[j] / norm;
                        }
                    }
                });
            }
            Op::MaskedSoftmax { a, mask } => {
                let out = node.value.data();
                let mut dot = F::zero();
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        dot += g[i] * out[i];
                    }
                }
                acc(grads, *a, &|ga| {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            ga[i] += out[i] * (g[i] - dot);
                        }
                    }
                });
            }
            Op::StackRows { rows } => {
                let d = self.value(rows[0]).len();
                for (r, &rv) in rows.iter().enumerate() {
                    acc(grads, rv, &|gr| {
                        for (x, &gv) in gr.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *x += gv;
                        }
                    });
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(grads, p, &|gp| {
                        for (x, &gv) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *x += gv;
                        }
                    });
                    offset += len;
                }
            }
            Op::Reshape { a } => {
                acc(grads, *a, &|ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
            }
            Op::Row { a, idx } => {
                let d = node.value.len();
                let base = idx * d;
                acc(grads, *a, &|ga| {
                    for (j, &gv) in g.iter().enumerate() {
                        ga[base + j] += gv;
                    }
                });
            }
            Op::Gather { table, rows } => {
                let d = self.value(*table).shape()[1];
                acc(grads, *table, &|gt| {
                    for (r, &src) in rows.iter().enumerate() {
                        for j in 0..d {
                            gt[src * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::MulChannelGate { z, gate } => {
                let c = self.value(*gate).len();
                let zd = self.value(*z).data();
                let gd = self.value(*gate).data();
                acc(grads, *z, &|gz| {
                    for (i, (x, &gv)) in gz.iter_mut().zip(g).enumerate() {
                        *x += gv * gd[i % c];
                    }
                });
                acc(grads, *gate, &|gg| {
                    for (i, &gv) in g.iter().enumerate() {
                        gg[i % c] += gv * zd[i];
                    }
                });
            }
            Op::MulSpatialGate { z, gate } => {
                let c = self.value(*z).shape()[2];
                let zd = self.value(*z).data();
                let gd = self.value(*gate).data();
                acc(grads, *z, &|gz| {
                    for (i, (x, &gv)) in gz.iter_mut().zip(g).enumerate() {
                        *x += gv * gd[i / c];
                    }
                });
                acc(grads, *gate, &|gg| {
                    for (i, &gv) in g.iter().enumerate() {
                        gg[i / c] += gv * zd[i];
                    }
                });
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let s = self.value(*x).shape();
                let (b, d) = (s[0], s[1]);
                let nb = F::from_f64(b as f64);
                let gd = self.value(*gamma).data();
                acc(grads, *gamma, &|gg| {
                    for i in 0..b {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                acc(grads, *beta, &|gb| {
                    for i in 0..b {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                });
                acc(grads, *x, &|gx| {
                    // Per feature: dx = inv_std/B * (B*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                    for j in 0..d {
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        for i in 0..b {
                            let dxh = g[i * d + j] * gd[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[i * d + j];
                        }
                        for i in 0..b {
                            let dxh = g[i * d + j] * gd[j];
                            gx[i * d + j] += inv_std[j] / nb
                                * (nb * dxh - sum_dxhat - xhat[i * d + j] * sum_dxhat_xhat);
                        }
                    }
                });
            }
            Op::BatchNormInfer { x, gamma, beta, mean, inv_std } => {
                let _ = beta;
                let s = self.value(*x).shape();
                let (b, d) = (s[0], s[1]);
                let gd = self.value(*gamma).data();
                let xd = self.value(*x).data();
                acc(grads, *x, &|gx| {
                    for i in 0..b {
                        for j in 0..d {
                            gx[i * d + j] += g[i * d + j] * gd[j] * inv_std[j];
                        }
                    }
                });
                acc(grads, *gamma, &|gg| {
                    for i in 0..b {
                        for j in 0..d {
                            let xhat = (xd[i * d + j] - mean[j]) * inv_std[j];
                            gg[j] += g[i * d + j] * xhat;
                        }
                    }
                });
                acc(grads, *beta, &|gb| {
                    for i in 0..b {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                acc(grads, *a, &|ga| {
                    for ((x, &gv), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += gv * m;
                    }
                });
            }
            Op::Sum { a } => {
                let gv = g[0];
                acc(grads, *a, &|ga| {
                    for x in ga.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::Mean { a } => {
                let n = F::from_f64(self.value(*a).len() as f64);
                let gv = g[0] / n;
                acc(grads, *a, &|ga| {
                    for x in ga.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::BceBatch { p, labels, eps } => {
                let pd = self.value(*p).data();
                let n = F::from_f64(labels.len() as f64);
                let one = F::one();
                let (lo, hi) = (*eps, one - *eps);
                acc(grads, *p, &|gp| {
                    for (i, (&pv, &y)) in pd.iter().zip(labels).enumerate() {
                        // Clamp has zero gradient outside the open interval.
                        if pv <= lo || pv >= hi {
                            continue;
                        }
                        gp[i] += g[0] * (-y / pv + (one - y) / (one - pv)) / n;
                    }
                });
            }
        }
    }
}
