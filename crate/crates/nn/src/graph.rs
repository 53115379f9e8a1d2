//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every op of one forward pass. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation.

use crate::error::{NnError, Result};
use crate::kernels::{self, ConvGeom, ConvShape};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f32>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Relu(Var),
    LeakyRelu(Var, f32),
    Gate {
        x: Var,
        gain: Tensor,
    },
    Add(Var, Var),
    Concat(Vec<Var>),
    AdaptiveAvgPool(Var),
    Resize(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Softmax(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, f32)>),
    External {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for running-average updates.
#[derive(Clone, Debug, Default)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub var_unbiased: Vec<f32>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    meta: bool,
    macs: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            meta: false,
            macs: 0,
        }
    }

    /// A graph that never marks nodes as requiring gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// A graph that only propagates shapes and tallies multiply-accumulates.
    pub fn tracing() -> Self {
        Self {
            grad_enabled: false,
            meta: true,
            ..Self::new()
        }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    /// Multiply-accumulate operations of every convolution recorded so far.
    pub fn conv_macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn alloc(&self, shape: &[usize]) -> Tensor {
        if self.meta {
            Tensor::meta(shape)
        } else {
            Tensor::zeros(shape)
        }
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        let t = if self.meta { Tensor::meta(t.shape()) } else { t };
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted after [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = &store.param(id).value;
        let value = if self.meta {
            Tensor::meta(p.shape())
        } else {
            p.clone()
        };
        self.push(value, Op::Param(id), !store.is_frozen())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(NnError::Shape(format!(
                "conv weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(NnError::Shape(format!("conv bias shape {:?}", self.shape(b))));
            }
        }
        let (oh, ow) = match (geom.out_len(h, kh), geom.out_len(wd, kw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(NnError::Shape(format!(
                    "kernel {kh}x{kw} does not fit input {h}x{wd}"
                )))
            }
        };
        let s = ConvShape {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            oh,
            ow,
            geom,
        };
        self.macs += (n * cout * cin * kh * kw * oh * ow) as u64;
        let mut out = self.alloc(&[n, cout, oh, ow]);
        if !self.meta {
            let bias = b.map(|b| self.value(b).data());
            kernels::conv2d_forward(
                self.value(x).data(),
                n,
                &s,
                self.value(w).data(),
                bias,
                out.data_mut(),
            );
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, rg))
    }

    /// Batch norm with batch statistics; returns the statistics for running averages.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, NormStats)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.meta {
            let v = self.push(Tensor::meta(&[n, c, h, w]), Op::Leaf, false);
            return Ok((v, NormStats::default()));
        }
        let mut xhat = Tensor::zeros(&[n, c, h, w]);
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let stats = kernels::batch_norm_train_forward(
            self.value(x).data(),
            (n, c, h * w),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            xhat.data_mut(),
            out.data_mut(),
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std: stats.inv_std,
            },
            rg,
        );
        Ok((
            v,
            NormStats {
                mean: stats.mean,
                var_unbiased: stats.var_unbiased,
            },
        ))
    }

    /// Batch norm with fixed statistics: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = self.alloc(&[n, c, h, w]);
        if !self.meta {
            let (xs, g, b) = (
                self.value(x).data(),
                self.value(gamma).data(),
                self.value(beta).data(),
            );
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                let ch = (i / (h * w)) % c;
                *o = g[ch] * (xs[i] - mean[ch]) * inv_std[ch] + b[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn gate(&mut self, x: Var, gain: Tensor) -> Result<Var> {
        if self.shape(x) != gain.shape() {
            return Err(NnError::Shape(format!("gate: {:?} vs {:?}", self.shape(x), gain.shape())));
        }
        let mut out = self.value(x).clone();
        for (o, &k) in out.data_mut().iter_mut().zip(gain.data()) {
            *o *= k;
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gate { x, gain }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        if !self.meta {
            out.add_assign(self.value(b));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(xs[0]).dims4()?;
        let mut total_c = 0;
        for &x in xs {
            let (xn, c, xh, xw) = self.value(x).dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(NnError::Shape(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(x),
                    self.shape(xs[0])
                )));
            }
            total_c += c;
        }
        let mut out = self.alloc(&[n, total_c, h, w]);
        if !self.meta {
            let hw = h * w;
            let dst = out.data_mut();
            let mut c0 = 0;
            for &x in xs {
                let c = self.shape(x)[1];
                let src = self.value(x).data();
                for b in 0..n {
                    let d = (b * total_c + c0) * hw;
                    dst[d..d + c * hw].copy_from_slice(&src[b * c * hw..(b + 1) * c * hw]);
                }
                c0 += c;
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(out, Op::Concat(xs.to_vec()), rg))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        // bins may overlap when the target exceeds the input
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(NnError::Shape(format!(
                "cannot pool {h}x{w} to {oh}x{ow}"
            )));
        }
        let mut out = self.alloc(&[n, c, oh, ow]);
        if !self.meta {
            kernels::adaptive_avg_pool_forward(
                self.value(x).data(),
                n * c,
                (h, w),
                (oh, ow),
                out.data_mut(),
            );
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::AdaptiveAvgPool(x), rg))
    }

    /// Bilinear resize with aligned corners.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if (oh, ow) == (h, w) {
            return Ok(x);
        }
        let mut out = self.alloc(&[n, c, oh, ow]);
        if !self.meta {
            kernels::resize_bilinear_forward(
                self.value(x).data(),
                n * c,
                (h, w),
                (oh, ow),
                out.data_mut(),
            );
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resize(x), rg))
    }

    /// 3x3 stride-2 max pooling with padding 1.
    pub fn max_pool_3x3s2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let geom = ConvGeom::new(2, 1, 1);
        let oh = geom.out_len(h, 3).unwrap_or(1);
        let ow = geom.out_len(w, 3).unwrap_or(1);
        let mut out = self.alloc(&[n, c, oh, ow]);
        let argmax = if self.meta {
            Vec::new()
        } else {
            kernels::max_pool_forward(
                self.value(x).data(),
                n * c,
                (h, w),
                3,
                geom,
                (oh, ow),
                out.data_mut(),
            )
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let mut out = self.alloc(&[n, c, h, w]);
        if !self.meta {
            softmax_channels_into(self.value(x).data(), (n, c, h * w), out.data_mut());
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = if self.meta {
            Tensor::meta(&[1])
        } else {
            let s: f64 = t.data().iter().map(|&v| v as f64).sum();
            Tensor::scalar((s / t.numel() as f64) as f32)
        };
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// `sum_i coeff_i * x_i` over same-shaped tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let shape = self.shape(terms[0].0).to_vec();
        let mut out = self.alloc(&shape);
        for &(v, k) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(NnError::Shape("weighted_sum: shapes differ".into()));
            }
            if !self.meta {
                for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                    *o += k * x;
                }
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Scalar node whose value and gradient w.r.t. `x` were computed elsewhere.
    pub fn external_loss(&mut self, x: Var, value: f32, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(NnError::Shape(format!(
                "external gradient {:?} does not match input {:?}",
                grad.shape(),
                self.shape(x)
            )));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::External { x, grad }, rg))
    }

    /// Backpropagates from a scalar node with seed 1.
    pub fn backward(&self, root: Var) -> Grads {
        let seed = Tensor::ones(self.shape(root));
        self.backward_with(root, seed)
    }

    /// Backpropagates `seed` (shaped like `root`) through the tape.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Grads {
        assert!(!self.meta, "cannot backpropagate through a tracing graph");
        assert_eq!(seed.shape(), self.shape(root));
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Grads(grads);
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Grads(grads)
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, geom } => {
                let xv = val(*x);
                let wv = val(*w);
                let (n, cin, h, wd) = xv.dims4().expect("conv input is NCHW");
                let (cout, _, kh, kw) = wv.dims4().expect("conv weight is 4-d");
                let (_, _, oh, ow) = node.value.dims4().expect("conv output is NCHW");
                let s = ConvShape {
                    cin,
                    h,
                    w: wd,
                    cout,
                    kh,
                    kw,
                    oh,
                    ow,
                    geom: *geom,
                };
                let mut dx = self.rg(*x).then(|| Tensor::zeros(xv.shape()));
                let mut dw = self.rg(*w).then(|| Tensor::zeros(wv.shape()));
                let mut db = b
                    .filter(|b| self.rg(*b))
                    .map(|b| Tensor::zeros(val(b).shape()));
                kernels::conv2d_backward(
                    xv.data(),
                    n,
                    &s,
                    wv.data(),
                    g.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                if let Some(b) = b {
                    acc(grads, *b, db);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = xhat.dims4().expect("bn input is NCHW");
                let mut dx = self.rg(*x).then(|| Tensor::zeros(xhat.shape()));
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                kernels::batch_norm_train_backward(
                    g.data(),
                    xhat.data(),
                    inv_std,
                    val(*gamma).data(),
                    (n, c, h * w),
                    dx.as_mut().map(|t| t.data_mut()),
                    dgamma.data_mut(),
                    dbeta.data_mut(),
                );
                acc(grads, *x, dx);
                acc(grads, *gamma, self.rg(*gamma).then_some(dgamma));
                acc(grads, *beta, self.rg(*beta).then_some(dbeta));
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = val(*x);
                let (_, c, h, w) = xv.dims4().expect("affine input is NCHW");
                let gm = val(*gamma).data();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for (i, &gi) in g.data().iter().enumerate() {
                    let ch = (i / (h * w)) % c;
                    dx.data_mut()[i] = gi * gm[ch] * inv_std[ch];
                    dgamma.data_mut()[ch] += gi * (xv.data()[i] - mean[ch]) * inv_std[ch];
                    dbeta.data_mut()[ch] += gi;
                }
                acc(grads, *x, self.rg(*x).then_some(dx));
                acc(grads, *gamma, self.rg(*gamma).then_some(dgamma));
                acc(grads, *beta, self.rg(*beta).then_some(dbeta));
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                for (di, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= 0.0 {
                        *di = 0.0;
                    }
                }
                acc(grads, *x, Some(d));
            }
            Op::LeakyRelu(x, slope) => {
                let mut d = g.clone();
                for (di, &xi) in d.data_mut().iter_mut().zip(val(*x).data()) {
                    if xi <= 0.0 {
                        *di *= slope;
                    }
                }
                acc(grads, *x, Some(d));
            }
            Op::Gate { x, gain } => {
                let mut d = g.clone();
                for (di, &k) in d.data_mut().iter_mut().zip(gain.data()) {
                    *di *= k;
                }
                acc(grads, *x, Some(d));
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, Some(g.clone()));
                }
                if self.rg(*b) {
                    acc(grads, *b, Some(g.clone()));
                }
            }
            Op::Concat(xs) => {
                let (n, total_c, h, w) = node.value.dims4().expect("concat output is NCHW");
                let hw = h * w;
                let mut c0 = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.rg(x) {
                        let mut d = Tensor::zeros(self.shape(x));
                        for b in 0..n {
                            let s = (b * total_c + c0) * hw;
                            d.data_mut()[b * c * hw..(b + 1) * c * hw]
                                .copy_from_slice(&g.data()[s..s + c * hw]);
                        }
                        acc(grads, x, Some(d));
                    }
                    c0 += c;
                }
            }
            Op::AdaptiveAvgPool(x) => {
                let (n, c, h, w) = val(*x).dims4().expect("pool input is NCHW");
                let (_, _, oh, ow) = node.value.dims4().expect("pool output is NCHW");
                let mut d = Tensor::zeros(&[n, c, h, w]);
                kernels::adaptive_avg_pool_backward(
                    g.data(),
                    n * c,
                    (h, w),
                    (oh, ow),
                    d.data_mut(),
                );
                acc(grads, *x, Some(d));
            }
            Op::Resize(x) => {
                let (n, c, h, w) = val(*x).dims4().expect("resize input is NCHW");
                let (_, _, oh, ow) = node.value.dims4().expect("resize output is NCHW");
                let mut d = Tensor::zeros(&[n, c, h, w]);
                kernels::resize_bilinear_backward(
                    g.data(),
                    n * c,
                    (h, w),
                    (oh, ow),
                    d.data_mut(),
                );
                acc(grads, *x, Some(d));
            }
            Op::MaxPool { x, argmax } => {
                let (_, _, h, w) = val(*x).dims4().expect("pool input is NCHW");
                let (_, _, oh, ow) = node.value.dims4().expect("pool output is NCHW");
                let mut d = Tensor::zeros(val(*x).shape());
                for (o, (&gi, &a)) in g.data().iter().zip(argmax).enumerate() {
                    let plane = o / (oh * ow);
                    d.data_mut()[plane * h * w + a as usize] += gi;
                }
                acc(grads, *x, Some(d));
            }
            Op::Softmax(x) => {
                let (n, c, h, w) = node.value.dims4().expect("softmax output is NCHW");
                let hw = h * w;
                let y = node.value.data();
                let mut d = Tensor::zeros(node.value.shape());
                for b in 0..n {
                    for p in 0..hw {
                        let idx = |k: usize| (b * c + k) * hw + p;
                        let dot: f32 = (0..c).map(|k| g.data()[idx(k)] * y[idx(k)]).sum();
                        for k in 0..c {
                            d.data_mut()[idx(k)] = y[idx(k)] * (g.data()[idx(k)] - dot);
                        }
                    }
                }
                acc(grads, *x, Some(d));
            }
            Op::Mean(x) => {
                let numel = val(*x).numel();
                let d = Tensor::full(val(*x).shape(), g.data()[0] / numel as f32);
                acc(grads, *x, Some(d));
            }
            Op::WeightedSum(terms) => {
                for &(v, k) in terms {
                    if self.rg(v) {
                        acc(grads, v, Some(g.map(|gi| gi * k)));
                    }
                }
            }
            Op::External { x, grad } => {
                let s = g.data()[0];
                acc(grads, *x, Some(grad.map(|v| v * s)));
            }
        }
    }

    /// Gradients of the parameter nodes, paired with their store ids.
    pub fn param_grads<'a>(&'a self, grads: &'a Grads) -> impl Iterator<Item = (ParamId, &'a Tensor)> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(id) => grads.0[i].as_ref().map(|g| (id, g)),
            _ => None,
        })
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, d: Option<Tensor>) {
    let Some(d) = d else { return };
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// Channel-axis softmax of `(n, c, hw)` data with per-pixel max subtraction.
pub fn softmax_channels_into(x: &[f32], (n, c, hw): (usize, usize, usize), out: &mut [f32]) {
    for b in 0..n {
        for p in 0..hw {
            let idx = |k: usize| (b * c + k) * hw + p;
            let m = (0..c).map(|k| x[idx(k)]).fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for k in 0..c {
                let e = (x[idx(k)] - m).exp();
                out[idx(k)] = e;
                s += e;
            }
            for k in 0..c {
                out[idx(k)] /= s;
            }
        }
    }
}
