//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and returns the gradient of a scalar output
//! with respect to every node that (transitively) depends on a leaf created
//! with `needs_grad = true`.

use crate::kernels::{self, ConvGeom};
use crate::scalar::gemm;
use crate::{Scalar, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    AddN(Vec<Var>),
    Mul(Var, Var),
    MulChannel { x: Var, gate: Var },
    Affine { x: Var, scale: T },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    AvgPool2(Var),
    Resize(Var),
    Reshape(Var),
    FlipW(Var),
    NegLogDot { x: Var, weights: Tensor<T>, eps: T },
    Dot { x: Var, weights: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// 2-D convolution, `x: [N,Ci,H,W]`, `w: [Co,Ci,k,k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, ci, h, wd) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        assert_eq!(ws[1], ci, "conv input channels {ci} vs weight {ws:?}");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let g = ConvGeom { in_c: ci, in_h: h, in_w: wd, out_c: ws[0], kernel: ws[2], stride, pad };
        let bias = b.map(|b| {
            assert_eq!(self.shape(b), &[ws[0]], "conv bias shape");
            self.value(b).data()
        });
        let out = kernels::conv2d_forward(&g, n, self.value(x).data(), self.value(w).data(), bias);
        let value = Tensor::new(&[n, g.out_c, g.out_h(), g.out_w()], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let ng = self.any_grad(&inputs);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of nothing");
        let mut acc = self.value(vars[0]).clone();
        for &v in &vars[1..] {
            acc.add_assign(self.value(v));
        }
        let ng = self.any_grad(vars);
        self.push(acc, Op::AddN(vars.to_vec()), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.add_n(&[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape(), data);
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `x: [N,C,H,W] ⊙ gate: [N,1,H,W]`, gate broadcast over channels.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(gate).dims4(), (n, 1, h, w), "gate must be [N,1,H,W]");
        let hw = h * w;
        let (vx, vg) = (self.value(x).data(), self.value(gate).data());
        let mut data = vec![T::zero(); n * c * hw];
        for b in 0..n {
            let g = &vg[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in 0..hw {
                    data[off + i] = vx[off + i] * g[i];
                }
            }
        }
        let ng = self.any_grad(&[x, gate]);
        self.push(Tensor::new(&[n, c, h, w], data), Op::MulChannel { x, gate }, ng)
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| v * scale + shift);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Affine { x, scale }, ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Tanh(x), ng)
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "concat of nothing");
        let (n, _, h, w) = self.value(vars[0]).dims4();
        let hw = h * w;
        let chans: Vec<usize> = vars
            .iter()
            .map(|&v| {
                let (n2, c2, h2, w2) = self.value(v).dims4();
                assert_eq!((n2, h2, w2), (n, h, w), "concat shape mismatch");
                c2
            })
            .collect();
        let total: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (&v, &c) in vars.iter().zip(&chans) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let ng = self.any_grad(vars);
        self.push(Tensor::new(&[n, total, h, w], data), Op::Concat(vars.to_vec()), ng)
    }

    /// Channel slice `[start, start+len)`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).narrow_channels(start, len);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Narrow { x, start }, ng)
    }

    /// Softmax over `axis`, treating the tensor as `[outer, len, inner]`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(axis < shape.len());
        let outer = shape[..axis].iter().product();
        let len = shape[axis];
        let inner = shape[axis + 1..].iter().product();
        let data = kernels::softmax_axis(self.value(x).data(), outer, len, inner);
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(&shape, data), Op::Softmax { x, outer, len, inner }, ng)
    }

    /// Batched matmul on rank-3 tensors: `op(a)[B,M,K] · op(b)[B,K,N]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shapes {sa:?} {sb:?}");
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner dims {sa:?} {sb:?}");
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                ta,
                tb,
                m,
                n,
                k,
                T::one(),
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let ng = self.any_grad(&[a, b]);
        self.push(Tensor::new(&[batch, m, n], out), Op::Bmm { a, b, ta, tb }, ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let data = kernels::avg_pool2(self.value(x).data(), n * c, h, w);
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(&[n, c, h / 2, w / 2], data), Op::AvgPool2(x), ng)
    }

    /// Bilinear resize of the spatial axes (half-pixel centers).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let data = kernels::bilinear_resize(self.value(x).data(), n * c, h, w, out_h, out_w);
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(&[n, c, out_h, out_w], data), Op::Resize(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshaped(shape);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Mirror the last (width) axis.
    pub fn flip_w(&mut self, x: Var) -> Var {
        let value = flip_last_axis(self.value(x));
        let ng = self.any_grad(&[x]);
        self.push(value, Op::FlipW(x), ng)
    }

    /// Scalar `−Σ weights · ln(x + eps)`.
    pub fn neg_log_dot(&mut self, x: Var, weights: Tensor<T>, eps: T) -> Var {
        assert_eq!(self.shape(x), weights.shape(), "neg_log_dot shape mismatch");
        let s: T = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .filter(|(_, &w)| w != T::zero())
            .map(|(&p, &w)| -w * (p + eps).ln())
            .sum();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::NegLogDot { x, weights, eps }, ng)
    }

    /// Scalar `Σ weights · x`.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Var {
        assert_eq!(self.shape(x), weights.shape(), "dot shape mismatch");
        let s: T = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Dot { x, weights }, ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.value(out).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::new(self.shape(out), vec![T::one()]));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, ci, h, wd) = xv.dims4();
                let ws = wv.shape();
                let g = ConvGeom { in_c: ci, in_h: h, in_w: wd, out_c: ws[0], kernel: ws[2], stride: *stride, pad: *pad };
                let mut dx = ng(*x).then(|| Tensor::zeros(xv.shape()));
                let mut dw = ng(*w).then(|| Tensor::zeros(wv.shape()));
                let mut db = b.filter(|b| ng(*b)).map(|b| Tensor::zeros(self.shape(b)));
                kernels::conv2d_backward(
                    &g,
                    n,
                    xv.data(),
                    wv.data(),
                    gy.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::AddN(vars) => {
                for &v in vars {
                    if ng(v) {
                        accumulate(grads, v, gy.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    let d = zip_map(gy, self.value(*b), |g, y| g * y);
                    accumulate(grads, *a, d);
                }
                if ng(*b) {
                    let d = zip_map(gy, self.value(*a), |g, x| g * x);
                    accumulate(grads, *b, d);
                }
            }
            Op::MulChannel { x, gate } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let (vx, vg, g) = (self.value(*x).data(), self.value(*gate).data(), gy.data());
                if ng(*x) {
                    let mut d = vec![T::zero(); n * c * hw];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for i in 0..hw {
                                d[off + i] = g[off + i] * vg[b * hw + i];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(&[n, c, h, w], d));
                }
                if ng(*gate) {
                    let mut d = vec![T::zero(); n * hw];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for i in 0..hw {
                                d[b * hw + i] = d[b * hw + i] + g[off + i] * vx[off + i];
                            }
                        }
                    }
                    accumulate(grads, *gate, Tensor::new(&[n, 1, h, w], d));
                }
            }
            Op::Affine { x, scale } => {
                if ng(*x) {
                    let s = *scale;
                    accumulate(grads, *x, gy.map(|g| g * s));
                }
            }
            Op::Relu(x) => {
                if ng(*x) {
                    let d = zip_map(gy, &node.value, |g, y| if y > T::zero() { g } else { T::zero() });
                    accumulate(grads, *x, d);
                }
            }
            Op::Sigmoid(x) => {
                if ng(*x) {
                    let d = zip_map(gy, &node.value, |g, y| g * y * (T::one() - y));
                    accumulate(grads, *x, d);
                }
            }
            Op::Tanh(x) => {
                if ng(*x) {
                    let d = zip_map(gy, &node.value, |g, y| g * (T::one() - y * y));
                    accumulate(grads, *x, d);
                }
            }
            Op::Concat(vars) => {
                let (n, total, h, w) = gy.dims4();
                let hw = h * w;
                let mut offset = 0;
                for &v in vars {
                    let c = self.value(v).dims4().1;
                    if ng(v) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let start = (b * total + offset) * hw;
                            d.extend_from_slice(&gy.data()[start..start + c * hw]);
                        }
                        accumulate(grads, v, Tensor::new(&[n, c, h, w], d));
                    }
                    offset += c;
                }
            }
            Op::Narrow { x, start } => {
                if ng(*x) {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let len = gy.dims4().1;
                    let hw = h * w;
                    let mut d = Tensor::zeros(&[n, c, h, w]);
                    for b in 0..n {
                        let dst = (b * c + start) * hw;
                        let src = b * len * hw;
                        d.data_mut()[dst..dst + len * hw].copy_from_slice(&gy.data()[src..src + len * hw]);
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if ng(*x) {
                    let y = node.value.data();
                    let g = gy.data();
                    let mut d = vec![T::zero(); y.len()];
                    for o in 0..*outer {
                        let base = o * len * inner;
                        for i in 0..*inner {
                            let mut dotv = T::zero();
                            for k in 0..*len {
                                let idx = base + k * inner + i;
                                dotv = dotv + g[idx] * y[idx];
                            }
                            for k in 0..*len {
                                let idx = base + k * inner + i;
                                d[idx] = y[idx] * (g[idx] - dotv);
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(node.value.shape(), d));
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                let batch = sa[0];
                let (va, vb, g) = (self.value(*a).data(), self.value(*b).data(), gy.data());
                if ng(*a) {
                    let mut d = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        let di = &mut d[i * m * k..(i + 1) * m * k];
                        if *ta {
                            gemm(*tb, true, k, m, n, T::one(), bi, gi, T::zero(), di);
                        } else {
                            gemm(false, !*tb, m, k, n, T::one(), gi, bi, T::zero(), di);
                        }
                    }
                    accumulate(grads, *a, Tensor::new(sa, d));
                }
                if ng(*b) {
                    let mut d = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let di = &mut d[i * k * n..(i + 1) * k * n];
                        if *tb {
                            gemm(true, *ta, n, k, m, T::one(), gi, ai, T::zero(), di);
                        } else {
                            gemm(!*ta, false, k, n, m, T::one(), ai, gi, T::zero(), di);
                        }
                    }
                    accumulate(grads, *b, Tensor::new(sb, d));
                }
            }
            Op::AvgPool2(x) => {
                if ng(*x) {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let mut d = Tensor::zeros(&[n, c, h, w]);
                    kernels::avg_pool2_backward(gy.data(), n * c, h, w, d.data_mut());
                    accumulate(grads, *x, d);
                }
            }
            Op::Resize(x) => {
                if ng(*x) {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let (_, _, oh, ow) = gy.dims4();
                    let mut d = Tensor::zeros(&[n, c, h, w]);
                    kernels::bilinear_resize_backward(gy.data(), n * c, h, w, oh, ow, d.data_mut());
                    accumulate(grads, *x, d);
                }
            }
            Op::Reshape(x) => {
                if ng(*x) {
                    accumulate(grads, *x, gy.clone().reshaped(self.shape(*x)));
                }
            }
            Op::FlipW(x) => {
                if ng(*x) {
                    accumulate(grads, *x, flip_last_axis(gy));
                }
            }
            Op::NegLogDot { x, weights, eps } => {
                if ng(*x) {
                    let g = gy.item();
                    let e = *eps;
                    let d = zip_map(self.value(*x), weights, |p, w| {
                        if w == T::zero() {
                            T::zero()
                        } else {
                            -g * w / (p + e)
                        }
                    });
                    accumulate(grads, *x, d);
                }
            }
            Op::Dot { x, weights } => {
                if ng(*x) {
                    let g = gy.item();
                    accumulate(grads, *x, weights.map(|w| w * g));
                }
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn flip_last_axis<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let w = *t.shape().last().expect("rank ≥ 1");
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(t.shape(), data)
}
