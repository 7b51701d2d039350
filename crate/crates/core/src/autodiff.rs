//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each recorded operation keeps its output value plus whatever it needs for
//! the backward pass. One tape holds one episode: parameters are registered
//! once and reused by every recurrent forward pass, so their gradients
//! accumulate across steps.

use crate::tensor::{col2im, gemm, im2col, transpose, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        kernel: usize,
        cols: Vec<T>,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    AvgPool2 {
        input: Var,
    },
    Upsample2 {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Channels {
        input: Var,
        start: usize,
    },
    Sigmoid {
        input: Var,
    },
    Tanh {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    /// `[K] × [1, H, W] -> [K, H, W]`, out[k,i,j] = q[i,j] · a[k].
    Broadcast {
        question: Var,
        answer: Var,
    },
    /// `[1, H, W] × [K, H, W] -> [K]`, Σ q·y / (Σ q + eps).
    MaskedMean {
        question: Var,
        target: Var,
        denom: T,
    },
    /// scale · Σ (a − b)², scalar output.
    SquaredError {
        a: Var,
        b: Var,
        scale: T,
    },
    /// scale · anisotropic total variation of every channel plane.
    TotalVariation {
        input: Var,
        scale: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros shaped like `like` when nothing flowed.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameters, or anything checked by gradcheck).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `var` cut off from the graph.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Stride-1 "same" convolution. `input: [Cin, H, W]`,
    /// `weight: [Cout, Cin, k, k]`, `bias: [Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let (cin, h, w) = self.value(input).chw();
        let wshape = self.value(weight).shape().to_vec();
        assert_eq!(wshape.len(), 4, "conv weight must be [Cout, Cin, k, k]");
        let (cout, k) = (wshape[0], wshape[2]);
        assert_eq!(wshape[1], cin, "conv input channel mismatch");
        assert_eq!(wshape[3], k);
        assert!(k % 2 == 1, "conv kernel must be odd");
        assert_eq!(self.value(bias).len(), cout);
        let plane = h * w;
        let cols = if k == 1 {
            self.value(input).data().to_vec()
        } else {
            im2col(self.value(input).data(), cin, h, w, k)
        };
        let mut out = vec![T::zero(); cout * plane];
        for (o, &b) in self.value(bias).data().iter().enumerate() {
            out[o * plane..(o + 1) * plane].fill(b);
        }
        gemm(cout, cin * k * k, plane, self.value(weight).data(), &cols, &mut out, true);
        let value = Tensor::from_vec(&[cout, h, w], out).expect("conv output");
        let rg = self.rg(&[input, weight, bias]);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                kernel: k,
                cols,
            },
            rg,
        )
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let value = self
            .value(input)
            .map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(&[input]);
        self.push(value, Op::LeakyRelu { input, slope }, rg)
    }

    /// 2×2 average pooling; H and W must be even.
    pub fn avg_pool2(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (c, h, w) = x.chw();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sizes");
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64_lossy(0.25);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let s = x.at3(ch, 2 * i, 2 * j)
                        + x.at3(ch, 2 * i, 2 * j + 1)
                        + x.at3(ch, 2 * i + 1, 2 * j)
                        + x.at3(ch, 2 * i + 1, 2 * j + 1);
                    out.set3(ch, i, j, s * quarter);
                }
            }
        }
        let rg = self.rg(&[input]);
        self.push(out, Op::AvgPool2 { input }, rg)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (c, h, w) = x.chw();
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out.set3(ch, i, j, x.at3(ch, i / 2, j / 2));
                }
            }
        }
        let rg = self.rg(&[input]);
        self.push(out, Op::Upsample2 { input }, rg)
    }

    /// Channel-axis concatenation of `[C_i, H, W]` values.
    pub fn concat(&mut self, inputs: &[Var]) -> Var {
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_channels(&parts).expect("concat spatial sizes");
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    pub fn channels(&mut self, input: Var, start: usize, len: usize) -> Var {
        let value = self.value(input).channels(start, len);
        let rg = self.rg(&[input]);
        self.push(value, Op::Channels { input, start }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(&[input]);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.tanh());
        let rg = self.rg(&[input]);
        self.push(value, Op::Tanh { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).scale(factor);
        let rg = self.rg(&[input]);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, input: Var, lo: T, hi: T) -> Var {
        let value = self.value(input).map(|v| v.max(lo).min(hi));
        let rg = self.rg(&[input]);
        self.push(value, Op::Clamp { input, lo, hi }, rg)
    }

    /// Hint broadcast: `question: [1, H, W]`, `answer: [K]` → `[K, H, W]`.
    pub fn broadcast(&mut self, question: Var, answer: Var) -> Var {
        let q = self.value(question);
        let a = self.value(answer);
        let (qc, h, w) = q.chw();
        assert_eq!(qc, 1, "question must have one channel");
        let k = a.len();
        let mut out = Vec::with_capacity(k * h * w);
        for &ak in a.data() {
            out.extend(q.data().iter().map(|&qv| qv * ak));
        }
        let value = Tensor::from_vec(&[k, h, w], out).expect("broadcast");
        let rg = self.rg(&[question, answer]);
        self.push(value, Op::Broadcast { question, answer }, rg)
    }

    /// Question-weighted channel mean, Σ q·y / (Σ q + eps).
    pub fn masked_mean(&mut self, question: Var, target: Var, eps: T) -> Var {
        let q = self.value(question);
        let y = self.value(target);
        let (k, h, w) = y.chw();
        assert_eq!(q.shape(), &[1, h, w], "question/target shape mismatch");
        let denom = q.sum() + eps;
        let plane = h * w;
        let data = (0..k)
            .map(|c| {
                let ych = &y.data()[c * plane..(c + 1) * plane];
                let num: T = q.data().iter().zip(ych).map(|(&a, &b)| a * b).sum();
                num / denom
            })
            .collect();
        let value = Tensor::from_vec(&[k], data).expect("masked mean");
        let rg = self.rg(&[question, target]);
        self.push(
            value,
            Op::MaskedMean {
                question,
                target,
                denom,
            },
            rg,
        )
    }

    pub fn squared_error(&mut self, a: Var, b: Var, scale: T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "squared_error shape mismatch");
        let s: T = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(s * scale), Op::SquaredError { a, b, scale }, rg)
    }

    pub fn total_variation(&mut self, input: Var, scale: T) -> Var {
        let s = total_variation_value(self.value(input));
        let rg = self.rg(&[input]);
        self.push(
            Tensor::scalar(s * scale),
            Op::TotalVariation { input, scale },
            rg,
        )
    }

    /// Sum of scalar-valued vars.
    pub fn sum_scalars(&mut self, vars: &[Var]) -> Var {
        match vars {
            [] => self.constant(Tensor::scalar(T::zero())),
            [first, rest @ ..] => rest.iter().fold(*first, |acc, &v| self.add(acc, v)),
        }
    }

    /// Backpropagate from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                kernel,
                cols,
            } => {
                let k = *kernel;
                let (cin, h, w) = self.value(*input).chw();
                let plane = h * w;
                let cout = node.value.shape()[0];
                let rows = cin * k * k;
                let gd = g.data();
                if self.requires_grad(*bias) {
                    let gb: Vec<T> = (0..cout)
                        .map(|o| gd[o * plane..(o + 1) * plane].iter().copied().sum())
                        .collect();
                    self.accumulate(grads, *bias, Tensor::from_vec(&[cout], gb).unwrap());
                }
                if self.requires_grad(*weight) {
                    let cols_t = transpose(rows, plane, cols);
                    let mut gw = vec![T::zero(); cout * rows];
                    gemm(cout, plane, rows, gd, &cols_t, &mut gw, false);
                    let shape = self.value(*weight).shape().to_vec();
                    self.accumulate(grads, *weight, Tensor::from_vec(&shape, gw).unwrap());
                }
                if self.requires_grad(*input) {
                    let w_t = transpose(cout, rows, self.value(*weight).data());
                    let mut gcols = vec![T::zero(); rows * plane];
                    gemm(rows, cout, plane, &w_t, gd, &mut gcols, false);
                    let gx = if k == 1 { gcols } else { col2im(&gcols, cin, h, w, k) };
                    self.accumulate(grads, *input, Tensor::from_vec(&[cin, h, w], gx).unwrap());
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input);
                let gx = x.zip_map(g, |v, gv| if v > T::zero() { gv } else { gv * *slope });
                self.accumulate(grads, *input, gx);
            }
            Op::AvgPool2 { input } => {
                let (c, h, w) = self.value(*input).chw();
                let quarter = T::from_f64_lossy(0.25);
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            gx.set3(ch, i, j, g.at3(ch, i / 2, j / 2) * quarter);
                        }
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Upsample2 { input } => {
                let (c, h, w) = self.value(*input).chw();
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let s = g.at3(ch, 2 * i, 2 * j)
                                + g.at3(ch, 2 * i, 2 * j + 1)
                                + g.at3(ch, 2 * i + 1, 2 * j)
                                + g.at3(ch, 2 * i + 1, 2 * j + 1);
                            gx.set3(ch, i, j, s);
                        }
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Concat { inputs } => {
                let mut start = 0;
                for &v in inputs {
                    let c = self.value(v).shape()[0];
                    if self.requires_grad(v) {
                        self.accumulate(grads, v, g.channels(start, c));
                    }
                    start += c;
                }
            }
            Op::Channels { input, start } => {
                if self.requires_grad(*input) {
                    let (c, h, w) = self.value(*input).chw();
                    let plane = h * w;
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    gx.data_mut()[start * plane..start * plane + g.len()].copy_from_slice(g.data());
                    self.accumulate(grads, *input, gx);
                }
            }
            Op::Sigmoid { input } => {
                let gx = node.value.zip_map(g, |s, gv| gv * s * (T::one() - s));
                self.accumulate(grads, *input, gx);
            }
            Op::Tanh { input } => {
                let gx = node.value.zip_map(g, |t, gv| gv * (T::one() - t * t));
                self.accumulate(grads, *input, gx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, g.scale(*factor));
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input);
                let gx = x.zip_map(g, |v, gv| if v < *lo || v > *hi { T::zero() } else { gv });
                self.accumulate(grads, *input, gx);
            }
            Op::Broadcast { question, answer } => {
                let q = self.value(*question);
                let a = self.value(*answer);
                let plane = q.len();
                let gd = g.data();
                if self.requires_grad(*question) {
                    let mut gq = Tensor::zeros(q.shape());
                    for (k, &ak) in a.data().iter().enumerate() {
                        for (gqv, &gv) in gq.data_mut().iter_mut().zip(&gd[k * plane..(k + 1) * plane]) {
                            *gqv = *gqv + gv * ak;
                        }
                    }
                    self.accumulate(grads, *question, gq);
                }
                if self.requires_grad(*answer) {
                    let ga: Vec<T> = (0..a.len())
                        .map(|k| {
                            gd[k * plane..(k + 1) * plane]
                                .iter()
                                .zip(q.data())
                                .map(|(&gv, &qv)| gv * qv)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *answer, Tensor::from_vec(a.shape(), ga).unwrap());
                }
            }
            Op::MaskedMean {
                question,
                target,
                denom,
            } => {
                let q = self.value(*question);
                let y = self.value(*target);
                let plane = q.len();
                let answer = node.value.data();
                let gd = g.data();
                if self.requires_grad(*question) {
                    // d a_k / d q_ij = (y_kij - a_k) / denom
                    let mut gq = Tensor::zeros(q.shape());
                    for (k, (&gk, &ak)) in gd.iter().zip(answer).enumerate() {
                        let ych = &y.data()[k * plane..(k + 1) * plane];
                        for (gqv, &yv) in gq.data_mut().iter_mut().zip(ych) {
                            *gqv = *gqv + gk * (yv - ak) / *denom;
                        }
                    }
                    self.accumulate(grads, *question, gq);
                }
                if self.requires_grad(*target) {
                    let mut gy = Tensor::zeros(y.shape());
                    for (k, &gk) in gd.iter().enumerate() {
                        for (gyv, &qv) in gy.data_mut()[k * plane..(k + 1) * plane].iter_mut().zip(q.data()) {
                            *gyv = gk * qv / *denom;
                        }
                    }
                    self.accumulate(grads, *target, gy);
                }
            }
            Op::SquaredError { a, b, scale } => {
                let two = T::from_f64_lossy(2.0) * *scale * g.item();
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| (x - y) * two);
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, diff.scale(-T::one()));
                }
                self.accumulate(grads, *a, diff);
            }
            Op::TotalVariation { input, scale } => {
                let x = self.value(*input);
                let mut gx = total_variation_subgradient(x);
                let s = *scale * g.item();
                gx.data_mut().iter_mut().for_each(|v| *v = *v * s);
                self.accumulate(grads, *input, gx);
            }
        }
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Σ over channel planes of |x[i][j] − x[i−1][j]| + |x[i][j] − x[i][j−1]|,
/// each term counted only where both neighbours are in bounds.
pub(crate) fn total_variation_value<T: Scalar>(x: &Tensor<T>) -> T {
    let (c, h, w) = x.chw();
    let mut s = T::zero();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x.at3(ch, i, j);
                if i > 0 {
                    s = s + (v - x.at3(ch, i - 1, j)).abs();
                }
                if j > 0 {
                    s = s + (v - x.at3(ch, i, j - 1)).abs();
                }
            }
        }
    }
    s
}

fn total_variation_subgradient<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let mut gx = Tensor::zeros(x.shape());
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x.at3(ch, i, j);
                if i > 0 {
                    let s = sign(v - x.at3(ch, i - 1, j));
                    gx.set3(ch, i, j, gx.at3(ch, i, j) + s);
                    gx.set3(ch, i - 1, j, gx.at3(ch, i - 1, j) - s);
                }
                if j > 0 {
                    let s = sign(v - x.at3(ch, i, j - 1));
                    gx.set3(ch, i, j, gx.at3(ch, i, j) + s);
                    gx.set3(ch, i, j - 1, gx.at3(ch, i, j - 1) - s);
                }
            }
        }
    }
    gx
}
