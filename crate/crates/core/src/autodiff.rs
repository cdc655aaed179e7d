//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation executed on it in topological order.
//! Values are computed eagerly; [`Graph::backward`] walks the tape once in
//! reverse and returns the gradients of every leaf created with
//! `requires_grad = true`. A graph can be differentiated only once.
//!
//! The op set is the one the localization models and the contrastive
//! objective need: `conv2d`, `relu`, `linear`, pairwise cosine similarity,
//! reductions over the trailing axis (max with argmax, mean, sum),
//! elementwise `add`/`mul`/`scale`/`exp`/`log`, a stable `log_softmax` and a
//! handful of layout ops.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Cosine {
        u: Var,
        v: Var,
        u_unit: Vec<f64>,
        u_norm: Vec<f64>,
        v_unit: Vec<f64>,
        v_norm: Vec<f64>,
    },
    MaxLast {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanLast(Var),
    SumLast(Var),
    Sum(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    LogSoftmaxLast(Var),
    Reshape(Var),
    ChannelsLast(Var),
    TransposeLast2(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation. Single-threaded; independent graphs may
/// live on different threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients returned by [`Graph::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn last_axis(t: &Tensor) -> (usize, usize) {
    let n = *t.shape().last().unwrap();
    (t.len() / n, n)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Cross-correlation of `[N, C, H, W]` input with `[K, C, kh, kw]` weight.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input must be 4-d, got {xs:?}"),
            ));
        }
        if ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be 4-d, got {ws:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "axis 1: input channels {} vs weight channels {}",
                    xs[1], ws[1]
                ),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {bs:?} does not match {} output channels", ws[0]),
            ));
        }
        let (ph, pw) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if ws[2] > ph || ws[3] > pw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "axes 2,3: kernel {}x{} larger than padded input {ph}x{pw}",
                    ws[2], ws[3]
                ),
            ));
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            padding,
            out_h: (ph - ws[2]) / stride + 1,
            out_w: (pw - ws[3]) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            xs[0],
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            ws[0],
        );
        let value = Tensor::new(vec![xs[0], ws[0], geom.out_h, geom.out_w], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Affine map `x Wᵀ + b` along the last axis of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let din = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != din {
            return Err(Error::shape(
                "linear",
                format!("input last axis {din} vs weight {ws:?}"),
            ));
        }
        if self.shape(bias) != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} vs {} outputs", self.shape(bias), ws[0]),
            ));
        }
        let rows = self.value(x).len() / din;
        let dout = ws[0];
        let mut out = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            out.extend_from_slice(self.value(bias).data());
        }
        kernels::gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(weight).data(),
            true,
            1.0,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        Ok(self.push(value, Op::Linear { x, weight, bias }, rg))
    }

    /// Pairwise cosine similarity between the rows of `u` (`[M, D]`) and the
    /// rows of `v` (`[N, D]`), giving `[M, N]`. Norms are floored at 1e-12.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let us = self.shape(u).to_vec();
        let vs = self.shape(v).to_vec();
        if us.len() != 2 || vs.len() != 2 || us[1] != vs[1] {
            return Err(Error::shape("cosine", format!("{us:?} vs {vs:?}")));
        }
        let dim = us[1];
        let (u_unit, u_norm) = kernels::unit_rows(self.value(u).data(), dim);
        let (v_unit, v_norm) = kernels::unit_rows(self.value(v).data(), dim);
        let mut out = vec![0.0; us[0] * vs[0]];
        kernels::gemm(
            us[0], dim, vs[0], &u_unit, false, &v_unit, true, 0.0, &mut out,
        );
        let value = Tensor::new(vec![us[0], vs[0]], out)?;
        let rg = self.rg(u) || self.rg(v);
        Ok(self.push(
            value,
            Op::Cosine {
                u,
                v,
                u_unit,
                u_norm,
                v_unit,
                v_norm,
            },
            rg,
        ))
    }

    /// Maximum over the last axis. Ties resolve to the first occurrence.
    pub fn max_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, n) = last_axis(t);
        let mut vals = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for row in t.data().chunks(n) {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            argmax.push(best);
            vals.push(row[best]);
        }
        let value = reduced(t, vals);
        let rg = self.rg(x);
        self.push(value, Op::MaxLast { x, argmax }, rg)
    }

    /// Argmax positions recorded by a [`Graph::max_last`] node.
    pub fn argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxLast { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn mean_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, n) = last_axis(t);
        let vals = t
            .data()
            .chunks(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        let value = reduced(t, vals);
        let rg = self.rg(x);
        self.push(value, Op::MeanLast(x), rg)
    }

    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, n) = last_axis(t);
        let vals = t.data().chunks(n).map(|r| r.iter().sum::<f64>()).collect();
        let value = reduced(t, vals);
        let rg = self.rg(x);
        self.push(value, Op::SumLast(x), rg)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(value, Op::Exp(x), rg)
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument("log of a non-positive value".into()));
        }
        let value = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Log(x), rg))
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, n) = last_axis(t);
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmaxLast(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[N, C, H, W]` → `[N, H, W, C]`.
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(
                "channels_last",
                format!("expected 4-d, got {s:?}"),
            ));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    data[(b * hw + p) * c + ch] = src[(b * c + ch) * hw + p];
                }
            }
        }
        let value = Tensor::new(vec![n, s[2], s[3], c], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ChannelsLast(x), rg))
    }

    /// Swap the two trailing axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected >= 2-d, got {s:?}"),
            ));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let data = transpose_blocks(self.value(x).data(), r, c);
        let mut shape = s;
        let k = shape.len();
        shape.swap(k - 2, k - 1);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::TransposeLast2(x), rg))
    }

    /// Reverse pass from a one-element `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        let out = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let n = self.shape(*input)[0];
                let k = self.shape(*weight)[0];
                let r = kernels::conv2d_backward(
                    geom,
                    n,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    k,
                    g,
                    self.rg(*input),
                    self.rg(*weight),
                    self.rg(*bias),
                );
                accumulate_opt(grads, *input, r.input);
                accumulate_opt(grads, *weight, r.weight);
                accumulate_opt(grads, *bias, r.bias);
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Linear { x, weight, bias } => {
                let ws = self.shape(*weight);
                let (dout, din) = (ws[0], ws[1]);
                let rows = self.value(*x).len() / din;
                if self.rg(*x) {
                    let mut gx = vec![0.0; rows * din];
                    kernels::gemm(
                        rows,
                        dout,
                        din,
                        g,
                        false,
                        self.value(*weight).data(),
                        false,
                        0.0,
                        &mut gx,
                    );
                    accumulate(grads, *x, gx);
                }
                if self.rg(*weight) {
                    let mut gw = vec![0.0; dout * din];
                    kernels::gemm(
                        dout,
                        rows,
                        din,
                        g,
                        true,
                        self.value(*x).data(),
                        false,
                        0.0,
                        &mut gw,
                    );
                    accumulate(grads, *weight, gw);
                }
                if self.rg(*bias) {
                    let mut gb = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        for (b, v) in gb.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Cosine {
                u,
                v,
                u_unit,
                u_norm,
                v_unit,
                v_norm,
            } => {
                let (m, dim) = (self.shape(*u)[0], self.shape(*u)[1]);
                let n = self.shape(*v)[0];
                if self.rg(*u) {
                    let mut gu = vec![0.0; m * dim];
                    kernels::gemm(m, n, dim, g, false, v_unit, false, 0.0, &mut gu);
                    let d = kernels::unit_rows_backward(
                        self.value(*u).data(),
                        u_unit,
                        u_norm,
                        &gu,
                        dim,
                    );
                    accumulate(grads, *u, d);
                }
                if self.rg(*v) {
                    let mut gv = vec![0.0; n * dim];
                    kernels::gemm(n, m, dim, g, true, u_unit, false, 0.0, &mut gv);
                    let d = kernels::unit_rows_backward(
                        self.value(*v).data(),
                        v_unit,
                        v_norm,
                        &gv,
                        dim,
                    );
                    accumulate(grads, *v, d);
                }
            }
            Op::MaxLast { x, argmax } => {
                let (_, n) = last_axis(self.value(*x));
                let mut d = vec![0.0; self.value(*x).len()];
                for (r, (&a, &gv)) in argmax.iter().zip(g).enumerate() {
                    d[r * n + a] = gv;
                }
                accumulate(grads, *x, d);
            }
            Op::MeanLast(x) | Op::SumLast(x) => {
                let (_, n) = last_axis(self.value(*x));
                let f = if matches!(node.op, Op::MeanLast(_)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let d = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * f, n))
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, f) => {
                accumulate(grads, *x, g.iter().map(|v| v * f).collect());
            }
            Op::Exp(x) => {
                let d = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, x)| g / x)
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::LogSoftmaxLast(x) => {
                let (_, n) = last_axis(&node.value);
                let mut d = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(n).zip(node.value.data().chunks(n)) {
                    let gs: f64 = grow.iter().sum();
                    d.extend(grow.iter().zip(yrow).map(|(g, y)| g - y.exp() * gs));
                }
                accumulate(grads, *x, d);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::ChannelsLast(x) => {
                let s = self.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut d = vec![0.0; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            d[(b * c + ch) * hw + p] = g[(b * hw + p) * c + ch];
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::TransposeLast2(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                accumulate(grads, *x, transpose_blocks(g, c, r));
            }
        }
    }
}

fn reduced(t: &Tensor, vals: Vec<f64>) -> Tensor {
    let s = t.shape();
    let shape = if s.len() > 1 {
        s[..s.len() - 1].to_vec()
    } else {
        vec![1]
    };
    Tensor::new(shape, vals).expect("reduced shape")
}

/// Transpose each trailing `r × c` block of `data`.
fn transpose_blocks(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(d) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn accumulate_opt(grads: &mut [Option<Vec<f64>>], v: Var, d: Option<Vec<f64>>) {
    if let Some(d) = d {
        accumulate(grads, v, d);
    }
}
