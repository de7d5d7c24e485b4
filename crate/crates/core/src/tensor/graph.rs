//! Operation tape with reverse-mode gradients.

use super::kernels::{self, ConvGeom, Layout};
use super::{ParamId, ParamStore, Tensor};
use crate::attention::{attend_sample, attend_sample_backward};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics of one batch-norm call in training mode.
/// `var` is the unbiased estimate used for running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        batch: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    ChannelScale {
        x: Var,
        s: Var,
    },
    TimeAvgPool(Var),
    FreqAttention {
        x: Var,
        w: Var,
        b: Option<Var>,
        input_dependent: bool,
        pooled: Vec<f64>,
        p: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records values and the operations that produced them.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::InvalidArgument(format!(
            "{op} expects a [N, C, H, W] tensor, got {shape:?}"
        ))),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        None => *slot = Some(contribution),
    }
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

    /// The branch taken at every non-differentiable point: the sign of each
    /// ReLU input and the winner of each max-pool window. Two evaluations with
    /// equal patterns lie on the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.value(*a).data().iter().map(|&v| (v > 0.0) as usize)),
                Op::MaxPool2d { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// An input whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).scale(k);
        let ng = self.needs(&[a]);
        self.push(t, Op::Scale(a, k), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.needs(&[a]);
        self.push(t, Op::Sum(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(&[a]);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let ng = self.needs(&[a]);
        self.push(t, Op::Sigmoid(a), ng)
    }

    /// Cross-correlation of `x: [N, C_in, H, W]` (or a single `[C_in, H, W]`)
    /// with `w: [C_out, C_in, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, c_in, h, wd, unbatched) = match xs[..] {
            [n, c, h, w] => (n, c, h, w, false),
            [c, h, w] => (1, c, h, w, true),
            _ => return Err(Error::shape("conv2d", &xs, &ws)),
        };
        let [c_out, wc, kh, kw] = ws[..] else {
            return Err(Error::shape("conv2d", &xs, &ws));
        };
        if wc != c_in || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            batch,
            self.value(w).data(),
            c_out,
            &geom,
        );
        let shape = if unbatched {
            vec![c_out, geom.out_h(), geom.out_w()]
        } else {
            vec![batch, c_out, geom.out_h(), geom.out_w()]
        };
        let ng = self.needs(&[x, w]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Conv2d { x, w, geom, batch },
            ng,
        ))
    }

    /// Non-overlapping `k x k` max pooling; trailing rows/columns that do not
    /// fill a window are dropped.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = dims4("max_pool2d", self.shape(x))?;
        if k == 0 || h < k || w < k {
            return Err(Error::InvalidArgument(format!(
                "max_pool2d window {k} does not fit {h}x{w}"
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = base + oi * k * w + oj * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (oi * k + di) * w + oj * k + dj;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::MaxPool2d { x, argmax },
            ng,
        ))
    }

    /// `[N, C, H, W] -> [N, C]` mean over the spatial plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("global_avg_pool", self.shape(x))?;
        let hw = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::GlobalAvgPool(x),
            ng,
        ))
    }

    /// `y = x W + b` with `x: [N, in]` (or `[in]`), `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, d_in, unbatched) = match xs[..] {
            [n, d] => (n, d, false),
            [d] => (1, d, true),
            _ => return Err(Error::shape("linear", &xs, &ws)),
        };
        let [w_in, d_out] = ws[..] else {
            return Err(Error::shape("linear", &xs, &ws));
        };
        if w_in != d_in {
            return Err(Error::shape("linear", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::shape("linear bias", self.shape(b), &[d_out]));
            }
        }
        let mut out = vec![0.0; n * d_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            out.chunks_mut(d_out).for_each(|row| row.copy_from_slice(bv));
        }
        kernels::gemm(
            n,
            d_in,
            d_out,
            self.value(x).data(),
            Layout::row_major(d_in),
            self.value(w).data(),
            Layout::row_major(d_out),
            1.0,
            &mut out,
        );
        let shape = if unbatched { vec![d_out] } else { vec![n, d_out] };
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, ng))
    }

    /// Batch normalization over `[N, C, H, W]`. With `running = None` the batch
    /// statistics are used and returned; otherwise the given `(mean, var)` are
    /// applied as constants.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [n, c, h, w] = dims4("batch_norm2d", self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm2d affine", self.shape(gamma), &[c]));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = self.value(x).data();
        let (mean, var, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("batch_norm2d running", &[rm.len()], &[c]));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for s_i in 0..n {
                        s += xv[(s_i * c + ch) * hw..][..hw].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut ss = 0.0;
                    for s_i in 0..n {
                        ss += xv[(s_i * c + ch) * hw..][..hw]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m;
                }
                let unbiased = if m > 1.0 {
                    var.iter().map(|v| v * m / (m - 1.0)).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let off = (s_i * c + ch) * hw;
                for j in off..off + hw {
                    let xh = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let ng = self.needs(&[x, gamma, beta]);
        let batch_stats = stats.is_some();
        let var_out = self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        );
        Ok((var_out, stats))
    }

    /// `y[n, c, h, w] = x[n, c, h, w] * s[n, c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("channel_scale", self.shape(x))?;
        if self.shape(s) != [n, c] {
            return Err(Error::shape("channel_scale", self.shape(x), self.shape(s)));
        }
        let hw = h * w;
        let sv = self.value(s).data();
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(sv)
            .flat_map(|(plane, &k)| plane.iter().map(move |v| v * k))
            .collect();
        let ng = self.needs(&[x, s]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::ChannelScale { x, s },
            ng,
        ))
    }

    /// `[N, C, F, T] -> [N, C*F]`: mean over the last (time) axis.
    pub fn time_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, f, t] = dims4("time_avg_pool", self.shape(x))?;
        let out = self
            .value(x)
            .data()
            .chunks(t)
            .map(|row| row.iter().sum::<f64>() / t as f64)
            .collect();
        let ng = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c * f], out),
            Op::TimeAvgPool(x),
            ng,
        ))
    }

    /// Per-frequency-bin attention on `[N, C, F, T]`; each sample gets its own
    /// probability vector over the F bins.
    pub fn freq_attention(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        input_dependent: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, f, t] = dims4("freq_attention", &shape)?;
        if self.shape(w) != [f] {
            return Err(Error::shape("freq_attention weight", self.shape(w), &[f]));
        }
        if let Some(b) = b {
            if self.shape(b) != [f] {
                return Err(Error::shape("freq_attention bias", self.shape(b), &[f]));
            }
        }
        let per = c * f * t;
        let mut out = Vec::with_capacity(n * per);
        let mut pooled = Vec::with_capacity(n * f);
        let mut p = Vec::with_capacity(n * f);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for s in 0..n {
                let (y, pool, probs) = attend_sample(
                    &xv[s * per..(s + 1) * per],
                    (c, f, t),
                    wv,
                    bv,
                    input_dependent,
                );
                out.extend(y);
                pooled.extend(pool);
                p.extend(probs);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::FreqAttention {
                x,
                w,
                b,
                input_dependent,
                pooled,
                p,
            },
            ng,
        ))
    }

    /// Attention probabilities `[N * F]` recorded by a
    /// [`Graph::freq_attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::FreqAttention { p, .. } => Some(p),
            _ => None,
        }
    }

    /// Mean softmax cross-entropy over the batch, stabilized by subtracting
    /// the max logit.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let (n, k) = match ls[..] {
            [n, k] => (n, k),
            [k] => (1, k),
            _ => return Err(Error::shape("softmax_cross_entropy", &ls, &[labels.len()])),
        };
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", &ls, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "class index {bad} out of range for {k} classes"
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (j, v) in row.iter().enumerate() {
                probs[i * k + j] = (v - max).exp() / z;
            }
            loss += z.ln() + max - row[label];
        }
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Back-propagates from the scalar `loss`. Gradients of parameter nodes
    /// are added into `store`; all other gradients are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, contribution: Vec<f64>| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], contribution);
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, k) => send(*a, g.iter().map(|v| v * k).collect()),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Relu(a) => {
                let y = node.value.data();
                send(
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Conv2d { x, w, geom, batch } => {
                let c_out = self.nodes[w.0].value.shape()[0];
                let (dx, dw) = kernels::conv2d_backward(
                    val(*x),
                    *batch,
                    val(*w),
                    c_out,
                    geom,
                    g,
                    wants(*x),
                );
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                send(*w, dw);
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; val(*x).len()];
                for (gi, &src) in g.iter().zip(argmax) {
                    dx[src] += gi;
                }
                send(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let hw = val(*x).len() / g.len();
                let dx = g
                    .iter()
                    .flat_map(|gi| std::iter::repeat_n(gi / hw as f64, hw))
                    .collect();
                send(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let ws = self.nodes[w.0].value.shape();
                let (d_in, d_out) = (ws[0], ws[1]);
                let n = g.len() / d_out;
                if wants(*x) {
                    let mut dx = vec![0.0; n * d_in];
                    kernels::gemm(
                        n,
                        d_out,
                        d_in,
                        g,
                        Layout::row_major(d_out),
                        val(*w),
                        Layout::transposed(d_out),
                        0.0,
                        &mut dx,
                    );
                    send(*x, dx);
                }
                let mut dw = vec![0.0; d_in * d_out];
                kernels::gemm(
                    d_in,
                    n,
                    d_out,
                    val(*x),
                    Layout::transposed(d_in),
                    g,
                    Layout::row_major(d_out),
                    0.0,
                    &mut dw,
                );
                send(*w, dw);
                if let Some(b) = b {
                    let mut db = vec![0.0; d_out];
                    for row in g.chunks(d_out) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    send(*b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = dims4("batch_norm2d", node.value.shape()).expect("4-d");
                let hw = h * w;
                let m = (n * hw) as f64;
                let gv = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for j in off..off + hw {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for ch in 0..c {
                        let scale = gv[ch] * inv_std[ch];
                        // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                        let (mean_g, mean_gx) = (dbeta[ch] / m, dgamma[ch] / m);
                        for s in 0..n {
                            let off = (s * c + ch) * hw;
                            for j in off..off + hw {
                                dx[j] = if *batch_stats {
                                    scale * (g[j] - mean_g - xhat[j] * mean_gx)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::ChannelScale { x, s } => {
                let sv = val(*s);
                let hw = g.len() / sv.len();
                let xv = val(*x);
                let mut dx = vec![0.0; g.len()];
                let mut ds = vec![0.0; sv.len()];
                for (plane, k) in sv.iter().enumerate() {
                    let r = plane * hw..(plane + 1) * hw;
                    for j in r {
                        dx[j] = g[j] * k;
                        ds[plane] += g[j] * xv[j];
                    }
                }
                send(*x, dx);
                send(*s, ds);
            }
            Op::TimeAvgPool(x) => {
                let t = val(*x).len() / g.len();
                let dx = g
                    .iter()
                    .flat_map(|gi| std::iter::repeat_n(gi / t as f64, t))
                    .collect();
                send(*x, dx);
            }
            Op::FreqAttention {
                x,
                w,
                b,
                input_dependent,
                pooled,
                p,
            } => {
                let [n, c, f, t] = dims4("freq_attention", node.value.shape()).expect("4-d");
                let per = c * f * t;
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = vec![0.0; n * per];
                let mut dw = vec![0.0; f];
                let mut db = vec![0.0; f];
                for s in 0..n {
                    let (dxs, dws, dzs) = attend_sample_backward(
                        &xv[s * per..(s + 1) * per],
                        &g[s * per..(s + 1) * per],
                        (c, f, t),
                        wv,
                        &pooled[s * f..(s + 1) * f],
                        &p[s * f..(s + 1) * f],
                        *input_dependent,
                    );
                    dx[s * per..(s + 1) * per].copy_from_slice(&dxs);
                    dw.iter_mut().zip(&dws).for_each(|(a, v)| *a += v);
                    db.iter_mut().zip(&dzs).for_each(|(a, v)| *a += v);
                }
                send(*x, dx);
                send(*w, dw);
                if let Some(b) = b {
                    send(*b, db);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                send(*logits, d);
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
