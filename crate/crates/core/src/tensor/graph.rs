use super::kernels::{self, ConvGeom};
use super::gemm::{gemm, Layout};
use super::{Mode, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu {
        input: Var,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
        dims: (usize, usize, usize),
    },
    GlobalAvgPool {
        input: Var,
        plane: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    L2Normalize {
        input: Var,
        denom: Vec<f64>,
        clamped: Vec<bool>,
    },
    SquaredDistanceMean {
        a: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    AngularMargin {
        input: Var,
        labels: Vec<usize>,
        scale: f64,
        target_slope: Vec<f64>,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
}

/// Append-only tape of tensor operations.
///
/// When recording is off the graph still evaluates every op but keeps no
/// backward state, so inference passes carry no tape.
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph.
    pub fn new() -> Self {
        Graph { values: Vec::new(), ops: Vec::new(), needs_grad: Vec::new(), record: true }
    }

    /// A graph that evaluates ops without taping them.
    pub fn inference() -> Self {
        Graph { record: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        let needs = self.record;
        self.push_leaf(value, needs)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, needs: bool) -> Var {
        self.values.push(value);
        self.ops.push(Op::Leaf);
        self.needs_grad.push(needs);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs = self.record && inputs.iter().any(|v| self.needs_grad[v.0]);
        self.values.push(value);
        self.ops.push(if needs { op } else { Op::Leaf });
        self.needs_grad.push(needs);
        Ok(Var(self.values.len() - 1))
    }

    /// 2-D cross-correlation over an NCHW batch.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("conv2d")?;
        let [o, kc, kh, kw] = self.value(kernel).dims4("conv2d")?;
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels (dim 1) but kernel expects {kc} (dim 1)"),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "padded input {}x{} (H={h}, W={w}, padding={padding}) is smaller than kernel {kh}x{kw}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match {o} output channels", self.value(b).shape()),
                ));
            }
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom { n, c, h, w, o, kh, kw, stride, pad: padding, ho, wo };
        let (out, cols) = kernels::conv_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_parts(vec![n, o, ho, wo], out);
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        let op = Op::Conv2d { input, kernel, bias, geom, cols };
        self.push("conv2d", value, op, &inputs)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.push("relu", value, Op::Relu { input }, &[input])
    }

    /// Per-channel batch normalisation.
    ///
    /// In train mode the second return value holds the updated running
    /// `(mean, var)`: `running ← momentum·running + (1 − momentum)·batch`,
    /// with the batch variance unbiased.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        mode: Mode,
        momentum: f64,
        epsilon: f64,
    ) -> Result<(Var, Option<(Tensor, Tensor)>)> {
        let [n, c, h, w] = self.value(input).dims4("batch_norm2d")?;
        if epsilon <= 0.0 {
            return Err(Error::invalid("batch_norm2d epsilon must be positive"));
        }
        for (name, t) in [
            ("scale", self.value(scale)),
            ("shift", self.value(shift)),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::shape(
                    "batch_norm2d",
                    format!("{name} has shape {:?}, expected [{c}]", t.shape()),
                ));
            }
        }
        let plane = h * w;
        let count = n * plane;
        let (mean, var, updated) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::invalid(
                        "batch_norm2d in train mode needs N·H·W ≥ 2 values per channel; use a larger batch",
                    ));
                }
                let (mean, var) = kernels::channel_stats(self.value(input).data(), n, c, plane);
                let unbias = count as f64 / (count - 1) as f64;
                let new_mean: Vec<f64> = running_mean
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(r, b)| momentum * r + (1.0 - momentum) * b)
                    .collect();
                let new_var: Vec<f64> = running_var
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| momentum * r + (1.0 - momentum) * b * unbias)
                    .collect();
                let updated = (Tensor::from_parts(vec![c], new_mean), Tensor::from_parts(vec![c], new_var));
                (mean, var, Some(updated))
            }
            Mode::Eval => {
                if running_var.data().iter().any(|&v| v < 0.0) {
                    return Err(Error::invalid("batch_norm2d running_var must be non-negative"));
                }
                (running_mean.data().to_vec(), running_var.data().to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let x = self.value(input).data();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        let op = Op::BatchNorm {
            input,
            scale,
            shift,
            xhat,
            inv_std,
            train: mode == Mode::Train,
            dims: (n, c, plane),
        };
        let v = self.push("batch_norm2d", value, op, &[input, scale, shift])?;
        Ok((v, updated))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("global_avg_pool")?;
        let plane = h * w;
        let x = self.value(input).data();
        let data = (0..n * c)
            .map(|i| x[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::from_parts(vec![n, c], data);
        self.push("global_avg_pool", value, Op::GlobalAvgPool { input, plane }, &[input])
    }

    /// `input · weightᵀ + bias` with `weight` laid out `[K, D]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let [n, d] = self.value(input).dims2("linear")?;
        let [k, wd] = self.value(weight).dims2("linear")?;
        if wd != d {
            return Err(Error::shape(
                "linear",
                format!("input has inner dimension {d} but weight is [{k}, {wd}]"),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [k] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?} does not match {k} outputs", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![0.0; n * k];
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(k) {
                row.copy_from_slice(b);
            }
        }
        gemm(
            n,
            d,
            k,
            self.value(input).data(),
            Layout::row_major(d),
            self.value(weight).data(),
            Layout::transposed(d),
            if bias.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let value = Tensor::from_parts(vec![n, k], out);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push("linear", value, Op::Linear { input, weight, bias }, &inputs)
    }

    /// Divides each row by `max(‖row‖₂, epsilon)`.
    pub fn l2_normalize(&mut self, input: Var, epsilon: f64) -> Result<Var> {
        if epsilon <= 0.0 {
            return Err(Error::invalid("l2_normalize epsilon must be positive"));
        }
        let [n, d] = self.value(input).dims2("l2_normalize")?;
        let x = self.value(input).data();
        let mut out = vec![0.0; n * d];
        let mut denom = Vec::with_capacity(n);
        let mut clamped = Vec::with_capacity(n);
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let den = norm.max(epsilon);
            for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / den;
            }
            denom.push(den);
            clamped.push(norm < epsilon);
        }
        let value = Tensor::from_parts(vec![n, d], out);
        self.push("l2_normalize", value, Op::L2Normalize { input, denom, clamped }, &[input])
    }

    /// `(1/N) Σ_rows ‖a − b‖²`.
    pub fn squared_distance_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, _] = self.value(a).dims2("squared_distance_mean")?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "squared_distance_mean",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push("squared_distance_mean", Tensor::scalar(s / n as f64), Op::SquaredDistanceMean { a, b }, &[a, b])
    }

    /// Mean negative log-softmax of the labelled class.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[i * k..(i + 1) * k];
            let mut s = 0.0;
            for (pj, &zj) in p.iter_mut().zip(row) {
                *pj = (zj - m).exp();
                s += *pj;
            }
            let target = p[y];
            for pj in p.iter_mut() {
                *pj /= s;
            }
            // −log p_y, evaluated as log1p of the non-target mass when y is the argmax
            total += if row[y] == m {
                (s - target).ln_1p()
            } else {
                (m - row[y]) + s.ln()
            };
        }
        let value = Tensor::scalar(total / n as f64);
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push("softmax_cross_entropy", value, op, &[logits])
    }

    /// Additive angular margin on cosine logits: the labelled entry becomes
    /// `scale·cos(θ + margin)` (with θ + margin capped at π), the rest `scale·cos θ`.
    pub fn angular_margin(&mut self, cosines: Var, labels: &[usize], scale: f64, margin: f64) -> Result<Var> {
        let [n, k] = self.value(cosines).dims2("angular_margin")?;
        if labels.len() != n {
            return Err(Error::shape("angular_margin", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        const CLAMP: f64 = 1.0 - 1e-7;
        let x = self.value(cosines).data();
        let mut out: Vec<f64> = x.iter().map(|c| scale * c).collect();
        let mut target_slope = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            let c = x[i * k + y];
            if margin == 0.0 {
                target_slope.push(1.0);
                continue;
            }
            let cc = c.clamp(-CLAMP, CLAMP);
            let theta = cc.acos();
            let shifted = theta + margin;
            let (logit, slope) = if shifted >= std::f64::consts::PI {
                (-1.0, 0.0)
            } else if cc != c {
                (shifted.cos(), 0.0)
            } else {
                (shifted.cos(), shifted.sin() / theta.sin())
            };
            out[i * k + y] = scale * logit;
            target_slope.push(slope);
        }
        let value = Tensor::from_parts(vec![n, k], out);
        let op = Op::AngularMargin { input: cosines, labels: labels.to_vec(), scale, target_slope };
        self.push("angular_margin", value, op, &[cosines])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    /// `Σ input ⊙ weights` against a constant weight tensor.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor) -> Result<Var> {
        if self.value(input).shape() != weights.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", self.value(input).shape(), weights.shape()),
            ));
        }
        let s = self.value(input).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let op = Op::WeightedSum { input, weights: weights.data().to_vec() };
        self.push("weighted_sum", Tensor::scalar(s), op, &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect());
        self.push("scale", value, Op::Scale { input, factor }, &[input])
    }

    /// Reverse sweep from a scalar `loss`, visiting each node once in reverse
    /// recording order. Only leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::invalid("backward called on a non-recording graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        if self.needs_grad[loss.0] {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(self.ops[i], Op::Leaf))
                    .map(|g| Tensor::from_parts(self.values[i].shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.needs_grad[v.0];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom, cols } => {
                let want = [needs(*input), needs(*kernel), bias.is_some_and(needs)];
                let out = kernels::conv_backward(g, self.value(*kernel).data(), cols, geom, want);
                if let Some(dx) = out.input {
                    accumulate(grads, *input, dx);
                }
                if let Some(dk) = out.kernel {
                    accumulate(grads, *kernel, dk);
                }
                if let (Some(b), Some(db)) = (bias, out.bias) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx = g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                accumulate(grads, *input, dx);
            }
            Op::BatchNorm { input, scale, shift, xhat, inv_std, train, dims } => {
                let (n, c, plane) = *dims;
                let gamma = self.value(*scale).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for j in off..off + plane {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if needs(*input) {
                    let m = (n * plane) as f64;
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let k = gamma[ch] * inv_std[ch];
                            for j in off..off + plane {
                                dx[j] = if *train {
                                    k * (g[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    accumulate(grads, *input, dx);
                }
                if needs(*scale) {
                    accumulate(grads, *scale, dgamma);
                }
                if needs(*shift) {
                    accumulate(grads, *shift, dbeta);
                }
            }
            Op::GlobalAvgPool { input, plane } => {
                let inv = 1.0 / *plane as f64;
                let dx = g.iter().flat_map(|&gi| std::iter::repeat(gi * inv).take(*plane)).collect();
                accumulate(grads, *input, dx);
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let k = w.shape()[0];
                if needs(*input) {
                    let mut dx = vec![0.0; n * d];
                    gemm(n, k, d, g, Layout::row_major(k), w.data(), Layout::row_major(d), 0.0, &mut dx);
                    accumulate(grads, *input, dx);
                }
                if needs(*weight) {
                    let mut dw = vec![0.0; k * d];
                    gemm(k, n, d, g, Layout::transposed(k), x.data(), Layout::row_major(d), 0.0, &mut dw);
                    accumulate(grads, *weight, dw);
                }
                if let Some(b) = bias.filter(|b| needs(*b)) {
                    let mut db = vec![0.0; k];
                    for row in g.chunks(k) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::L2Normalize { input, denom, clamped } => {
                let y = self.value(Var(i)).data();
                let d = y.len() / denom.len();
                let mut dx = vec![0.0; y.len()];
                for r in 0..denom.len() {
                    let span = r * d..(r + 1) * d;
                    if clamped[r] {
                        for j in span {
                            dx[j] = g[j] / denom[r];
                        }
                    } else {
                        let dot: f64 = y[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                        for j in span {
                            dx[j] = (g[j] - y[j] * dot) / denom[r];
                        }
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::SquaredDistanceMean { a, b } => {
                let av = self.value(*a);
                let n = av.shape()[0] as f64;
                let k = 2.0 * g[0] / n;
                let diff: Vec<f64> =
                    av.data().iter().zip(self.value(*b).data()).map(|(x, y)| k * (x - y)).collect();
                if needs(*b) {
                    accumulate(grads, *b, diff.iter().map(|v| -v).collect());
                }
                if needs(*a) {
                    accumulate(grads, *a, diff);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dz[r * k + y] -= scale;
                }
                accumulate(grads, *logits, dz);
            }
            Op::AngularMargin { input, labels, scale, target_slope } => {
                let k = g.len() / labels.len();
                let mut dx: Vec<f64> = g.iter().map(|v| v * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dx[r * k + y] *= target_slope[r];
                }
                accumulate(grads, *input, dx);
            }
            Op::Sum { input } => {
                let n = self.value(*input).len();
                accumulate(grads, *input, vec![g[0]; n]);
            }
            Op::WeightedSum { input, weights } => {
                accumulate(grads, *input, weights.iter().map(|w| w * g[0]).collect());
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Scale { input, factor } => {
                accumulate(grads, *input, g.iter().map(|v| v * factor).collect());
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, materialising zeros for unreachable leaves.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
