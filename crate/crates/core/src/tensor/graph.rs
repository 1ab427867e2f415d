use super::kernels;
use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Lower clamp applied to probabilities before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `ln(max(p, PROB_FLOOR))`, except that NaN stays NaN so a diverged network
/// cannot hide behind the floor.
fn floored_ln(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        p.max(PROB_FLOOR).ln()
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Row-wise softmax of a `[N, classes]` tensor.
    SoftmaxRows,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    GlobalAvgPool(Var),
    Activation(Var, Activation),
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    AddScalar(Var),
    Scale(Var, f64),
    Reshape(Var),
    Sum(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    BinaryCrossEntropy {
        probs: Var,
        targets: Vec<f64>,
    },
    SelectChannel {
        input: Var,
        channel: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    Stack(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Per-channel statistics of a train-mode batch normalization call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide-by-count) variance, the one used for normalization.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Append-only computation tape.
///
/// Not shareable across threads while recording; build one graph per
/// forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that takes part in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf held constant (inputs, labels).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.any_grad(&[input, weight]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = kernels::linear(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let rg = self.any_grad(&[input, weight]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            out,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_average_pool(self.value(input))?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, rg, Op::GlobalAvgPool(input)))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let x = self.value(input);
        let out = match kind {
            Activation::Relu => Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            )?,
            Activation::Sigmoid => Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| kernels::sigmoid(v)).collect(),
            )?,
            Activation::SoftmaxRows => kernels::softmax_rows(x)?,
        };
        let rg = self.requires_grad(input);
        Ok(self.push(out, rg, Op::Activation(input, kind)))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::SoftmaxRows)
    }

    /// `true` when `b` is `[N,1,H,W]` against `a` of `[N,C,H,W]`, `false` for
    /// equal shapes; an error otherwise.
    fn broadcast_kind(&self, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        match (sa, sb) {
            ([n, _, h, w], [nb, 1, hb, wb]) if n == nb && h == hb && w == wb => Ok(true),
            _ => shape_err(format!("cannot broadcast {sb:?} against {sa:?}")),
        }
    }

    fn broadcast_binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let broadcast = self.broadcast_kind(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if broadcast {
            let (n, c, h, w) = ta.dims4()?;
            let hw = h * w;
            let mut out = Vec::with_capacity(ta.len());
            for i in 0..n {
                let bp = &tb.data()[i * hw..(i + 1) * hw];
                for ch in 0..c {
                    let ap = &ta.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    out.extend(ap.iter().zip(bp).map(|(&x, &y)| f(x, y)));
                }
            }
            out
        } else {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok((Tensor::new(ta.shape().to_vec(), data)?, broadcast))
    }

    /// Elementwise sum; `b` may be `[N,1,H,W]` broadcast over `a`'s channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, broadcast) = self.broadcast_binary(a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b, broadcast }))
    }

    /// Elementwise product; `b` may be `[N,1,H,W]` broadcast over `a`'s channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, broadcast) = self.broadcast_binary(a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b, broadcast }))
    }

    pub fn add_scalar(&mut self, input: Var, value: f64) -> Var {
        let x = self.value(input);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + value).collect())
            .expect("same shape");
        let rg = self.requires_grad(input);
        self.push(out, rg, Op::AddScalar(input))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        let rg = self.requires_grad(input);
        self.push(out, rg, Op::Scale(input, factor))
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, rg, Op::Reshape(input)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(total), rg, Op::Sum(input))
    }

    fn bn_geometry(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!(
                "batch norm over {c} channels got gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok((n, c, h * w))
    }

    /// Batch normalization with statistics of the current batch.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, hw) = self.bn_geometry(input, gamma, beta)?;
        let count = n * hw;
        if count < 2 {
            return invalid(format!(
                "train-mode batch norm needs at least 2 values per channel, got {count}"
            ));
        }
        let x = self.value(input).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                s += x[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
            }
            mean[ch] = s / count as f64;
            let mut q = 0.0;
            for i in 0..n {
                q += x[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = q / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let shift: Vec<f64> = mean.clone();
        let (out, normalized) = self.bn_apply(input, gamma, beta, &shift, &inv_std, n, c, hw);
        let rg = self.any_grad(&[input, gamma, beta]);
        let v = self.push(
            out,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats: true,
            },
        );
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, hw) = self.bn_geometry(input, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return shape_err("batch norm running statistics do not match channel count");
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, normalized) = self.bn_apply(input, gamma, beta, mean, &inv_std, n, c, hw);
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats: false,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        n: usize,
        c: usize,
        hw: usize,
    ) -> (Tensor, Vec<f64>) {
        let x = self.value(input);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xh = (x.data()[j] - mean[ch]) * inv_std[ch];
                    normalized[j] = xh;
                    out[j] = g[ch] * xh + b[ch];
                }
            }
        }
        (
            Tensor::new(x.shape().to_vec(), out).expect("same shape"),
            normalized,
        )
    }

    /// Mean over rows of `-ln(max(p[label], 1e-12))`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(probs).dims2()?;
        if labels.len() != n {
            return shape_err(format!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return invalid(format!("label {bad} out of range for {k} classes"));
        }
        let p = self.value(probs).data();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -floored_ln(p[i * k + l]))
            .sum::<f64>()
            / n as f64;
        let rg = self.requires_grad(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `(1/N) * sum over rows and columns` of the binary cross-entropy between
    /// probabilities `[N, T]` and targets in `[0, 1]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let (n, _) = self.value(probs).dims2()?;
        let p = self.value(probs).data();
        if targets.len() != p.len() {
            return shape_err(format!(
                "{} targets for probabilities of shape {:?}",
                targets.len(),
                self.shape(probs)
            ));
        }
        if targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return invalid("binary targets must lie in [0, 1]");
        }
        let loss = p
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                -(y * floored_ln(p) + (1.0 - y) * floored_ln(1.0 - p))
            })
            .sum::<f64>()
            / n as f64;
        let rg = self.requires_grad(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::BinaryCrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// `[N, C, H, W] -> [N, 1, H, W]` for one channel.
    pub fn select_channel(&mut self, input: Var, channel: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if channel >= c {
            return invalid(format!("channel {channel} out of range for {c} channels"));
        }
        let x = self.value(input).data();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * hw);
        for i in 0..n {
            out.extend_from_slice(&x[(i * c + channel) * hw..(i * c + channel + 1) * hw]);
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::new(vec![n, 1, h, w], out)?,
            rg,
            Op::SelectChannel { input, channel },
        ))
    }

    /// Columns `start..start+len` of a `[N, D]` tensor.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(input).dims2()?;
        if len == 0 || start + len > d {
            return invalid(format!("column slice {start}..{} out of range for {d}", start + len));
        }
        let x = self.value(input).data();
        let out = (0..n)
            .flat_map(|i| x[i * d + start..i * d + start + len].iter().copied())
            .collect();
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::new(vec![n, len], out)?,
            rg,
            Op::SliceCols { input, start },
        ))
    }

    /// Stacks `[N, D]` tensors into `[N, T, D]`.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return invalid("stack of zero tensors");
        };
        let (n, d) = self.value(first).dims2()?;
        if inputs.iter().any(|&v| self.shape(v) != [n, d]) {
            return shape_err("stack inputs must share one [N, D] shape");
        }
        let t = inputs.len();
        let mut out = vec![0.0; n * t * d];
        for (j, &v) in inputs.iter().enumerate() {
            for (i, row) in self.value(v).data().chunks(d).enumerate() {
                out[(i * t + j) * d..(i * t + j + 1) * d].copy_from_slice(row);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(vec![n, t, d], out)?,
            rg,
            Op::Stack(inputs.to_vec()),
        ))
    }

    /// Reverse pass from a scalar node. Gradients from several consumers of a
    /// node are summed; afterwards only leaves hold a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.backward_node(idx, &grad)?;
            // Interior gradients are dropped once propagated; only leaves
            // keep theirs.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].grad = Some(grad);
            }
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        match node.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    fn backward_node(&self, idx: usize, dy: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.requires_grad(v);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let grads = kernels::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    dy,
                    stride,
                    pad,
                    rg(input),
                    rg(weight),
                    bias.is_some_and(rg),
                )?;
                if let Some(g) = grads.input {
                    out.push((input, g.into_data()));
                }
                if let Some(g) = grads.weight {
                    out.push((weight, g.into_data()));
                }
                if let (Some(b), Some(g)) = (bias, grads.bias) {
                    out.push((b, g.into_data()));
                }
            }
            &Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, d) = self.value(input).dims2()?;
                let m = self.shape(weight)[1];
                if rg(input) {
                    let mut dx = vec![0.0; n * d];
                    kernels::gemm(
                        n,
                        m,
                        d,
                        1.0,
                        dy,
                        (m, 1),
                        self.value(weight).data(),
                        (1, m),
                        0.0,
                        &mut dx,
                        (d, 1),
                    );
                    out.push((input, dx));
                }
                if rg(weight) {
                    let mut dw = vec![0.0; d * m];
                    kernels::gemm(
                        d,
                        n,
                        m,
                        1.0,
                        self.value(input).data(),
                        (1, d),
                        dy,
                        (m, 1),
                        0.0,
                        &mut dw,
                        (m, 1),
                    );
                    out.push((weight, dw));
                }
                if let Some(b) = bias.filter(|&b| rg(b)) {
                    let mut db = vec![0.0; m];
                    for row in dy.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    out.push((b, db));
                }
            }
            &Op::GlobalAvgPool(input) => {
                let (_, _, h, w) = self.value(input).dims4()?;
                let hw = h * w;
                let scale = 1.0 / hw as f64;
                let dx = dy
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * scale, hw))
                    .collect();
                out.push((input, dx));
            }
            &Op::Activation(input, kind) => {
                let y = node.value.data();
                let dx = match kind {
                    Activation::Relu => self
                        .value(input)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => {
                        y.iter().zip(dy).map(|(&s, &g)| g * s * (1.0 - s)).collect()
                    }
                    Activation::SoftmaxRows => {
                        let k = node.value.shape()[1];
                        let mut dx = vec![0.0; y.len()];
                        for ((yr, gr), dr) in y.chunks(k).zip(dy.chunks(k)).zip(dx.chunks_mut(k)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..k {
                                dr[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        dx
                    }
                };
                out.push((input, dx));
            }
            &Op::Add { a, b, broadcast } => {
                if rg(a) {
                    out.push((a, dy.to_vec()));
                }
                if rg(b) {
                    let db = if broadcast {
                        self.reduce_channels(a, dy, None)?
                    } else {
                        dy.to_vec()
                    };
                    out.push((b, db));
                }
            }
            &Op::Mul { a, b, broadcast } => {
                let (ta, tb) = (self.value(a), self.value(b));
                if rg(a) {
                    let da = if broadcast {
                        let (n, c, h, w) = ta.dims4()?;
                        let hw = h * w;
                        let mut da = vec![0.0; dy.len()];
                        for i in 0..n {
                            let bp = &tb.data()[i * hw..(i + 1) * hw];
                            for ch in 0..c {
                                let o = (i * c + ch) * hw;
                                for j in 0..hw {
                                    da[o + j] = dy[o + j] * bp[j];
                                }
                            }
                        }
                        da
                    } else {
                        dy.iter().zip(tb.data()).map(|(g, y)| g * y).collect()
                    };
                    out.push((a, da));
                }
                if rg(b) {
                    let db = if broadcast {
                        self.reduce_channels(a, dy, Some(ta.data()))?
                    } else {
                        dy.iter().zip(ta.data()).map(|(g, x)| g * x).collect()
                    };
                    out.push((b, db));
                }
            }
            &Op::AddScalar(input) | &Op::Reshape(input) => out.push((input, dy.to_vec())),
            &Op::Scale(input, factor) => out.push((input, dy.iter().map(|g| g * factor).collect())),
            &Op::Sum(input) => out.push((input, vec![dy[0]; self.value(input).len()])),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let hw = h * w;
                let count = (n * hw) as f64;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let o = (i * c + ch) * hw;
                        for j in o..o + hw {
                            dbeta[ch] += dy[j];
                            dgamma[ch] += dy[j] * normalized[j];
                        }
                    }
                }
                if rg(*input) {
                    let mut dx = vec![0.0; dy.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let o = (i * c + ch) * hw;
                            let scale = g[ch] * inv_std[ch];
                            for j in o..o + hw {
                                dx[j] = if *batch_stats {
                                    scale / count
                                        * (count * dy[j] - dbeta[ch] - normalized[j] * dgamma[ch])
                                } else {
                                    scale * dy[j]
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if rg(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if rg(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::CrossEntropy { probs, labels } => {
                let p = self.value(*probs);
                let (n, k) = p.dims2()?;
                let mut dp = vec![0.0; p.len()];
                for (i, &l) in labels.iter().enumerate() {
                    let v = p.data()[i * k + l];
                    if v > PROB_FLOOR {
                        dp[i * k + l] = -dy[0] / (v * n as f64);
                    }
                }
                out.push((*probs, dp));
            }
            Op::BinaryCrossEntropy { probs, targets } => {
                let p = self.value(*probs);
                let n = p.shape()[0] as f64;
                let dp = p
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| {
                        let mut d = 0.0;
                        if p > PROB_FLOOR {
                            d -= y / p;
                        }
                        if 1.0 - p > PROB_FLOOR {
                            d += (1.0 - y) / (1.0 - p);
                        }
                        dy[0] * d / n
                    })
                    .collect();
                out.push((*probs, dp));
            }
            &Op::SelectChannel { input, channel } => {
                let (n, c, h, w) = self.value(input).dims4()?;
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for i in 0..n {
                    dx[(i * c + channel) * hw..(i * c + channel + 1) * hw]
                        .copy_from_slice(&dy[i * hw..(i + 1) * hw]);
                }
                out.push((input, dx));
            }
            &Op::SliceCols { input, start } => {
                let (n, d) = self.value(input).dims2()?;
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    dx[i * d + start..i * d + start + len]
                        .copy_from_slice(&dy[i * len..(i + 1) * len]);
                }
                out.push((input, dx));
            }
            Op::Stack(inputs) => {
                let t = inputs.len();
                let (n, d) = self.value(inputs[0]).dims2()?;
                for (j, &v) in inputs.iter().enumerate() {
                    if !rg(v) {
                        continue;
                    }
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        dx[i * d..(i + 1) * d]
                            .copy_from_slice(&dy[(i * t + j) * d..(i * t + j + 1) * d]);
                    }
                    out.push((v, dx));
                }
            }
        }
        Ok(out)
    }

    /// Sums `dy * weight` (or `dy`) over the channel axis of `like`'s shape.
    fn reduce_channels(&self, like: Var, dy: &[f64], weight: Option<&[f64]>) -> Result<Vec<f64>> {
        let (n, c, h, w) = self.value(like).dims4()?;
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        for i in 0..n {
            let dst = &mut out[i * hw..(i + 1) * hw];
            for ch in 0..c {
                let o = (i * c + ch) * hw;
                for j in 0..hw {
                    dst[j] += dy[o + j] * weight.map_or(1.0, |wt| wt[o + j]);
                }
            }
        }
        Ok(out)
    }
}
