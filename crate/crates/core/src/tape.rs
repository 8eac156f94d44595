//! Reverse-mode differentiation over a recorded graph of tensor operations.
//!
//! Every operation is evaluated eagerly when it is recorded. The backward pass
//! expresses each vector-Jacobian product with the same recorded operations,
//! so gradients are themselves graph nodes and can be differentiated again
//! (needed for penalties on input gradients).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Powf(f64),
    Sigmoid,
    Relu,
    Matmul { ta: bool, tb: bool },
    Reshape,
    Permute(Vec<usize>),
    Im2col,
    Col2im,
    AvgPool2,
    Upsample2,
    SumAll,
    SumTo,
    BroadcastTo,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    PadSlice { axis: usize, start: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Powf(_) => "powf",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Matmul { .. } => "matmul",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Im2col => "im2col",
            Op::Col2im => "col2im",
            Op::AvgPool2 => "avg_pool2",
            Op::Upsample2 => "upsample2",
            Op::SumAll => "sum_all",
            Op::SumTo => "sum_to",
            Op::BroadcastTo => "broadcast_to",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::PadSlice { .. } => "pad_slice",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Recording of tensor operations in topological order.
///
/// Inputs always precede their consumers, so a reverse sweep over node
/// indices is a valid backward schedule.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    non_finite: Option<String>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.name().to_string());
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, inputs, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor. Gradients flow only into leaves that require them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some("leaf".to_string());
        }
        self.nodes.push(Node { value, op: Op::Leaf, inputs: Vec::new(), requires_grad });
        Var(self.nodes.len() - 1)
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Fails if any recorded value so far contained NaN or Inf.
    pub fn check_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a).add(self.value(b)).expect("checked");
        self.push(v, Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a).sub(self.value(b)).expect("checked");
        self.push(v, Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("checked");
        self.push(v, Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(c), vec![a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar, vec![a])
    }

    /// Elementwise `a^p`. Callers keep the base positive for non-integer `p`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(p), vec![a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid, vec![a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu, vec![a])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    /// Matrix product `op(a) @ op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let v = matmul(self.value(a), self.value(b), ta, tb);
        self.push(v, Op::Matmul { ta, tb }, vec![a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape).expect("reshape size mismatch");
        self.push(v, Op::Reshape, vec![a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let v = permute(self.value(a), perm);
        self.push(v, Op::Permute(perm.to_vec()), vec![a])
    }

    /// 3x3, stride 1, zero padding 1 patch extraction: `[B,C,H,W] -> [C*9, B*H*W]`.
    pub fn im2col3(&mut self, a: Var) -> Var {
        let v = im2col3(self.value(a));
        self.push(v, Op::Im2col, vec![a])
    }

    /// Adjoint of [`Graph::im2col3`]; `image_shape` is `[B,C,H,W]`.
    pub fn col2im3(&mut self, a: Var, image_shape: &[usize]) -> Var {
        let v = col2im3(self.value(a), image_shape);
        self.push(v, Op::Col2im, vec![a])
    }

    /// 2x2 mean pooling over the last two axes.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let v = avg_pool2(self.value(a));
        self.push(v, Op::AvgPool2, vec![a])
    }

    /// Nearest-neighbour 2x upsampling over the last two axes.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let v = upsample2(self.value(a));
        self.push(v, Op::Upsample2, vec![a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll, vec![a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the axes where `shape` has extent 1. Ranks must agree.
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = sum_to(self.value(a), shape);
        self.push(v, Op::SumTo, vec![a])
    }

    /// Repeat along the axes where the input has extent 1. Ranks must agree.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = broadcast_to(self.value(a), shape);
        self.push(v, Op::BroadcastTo, vec![a])
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let v = concat(self.value(a), self.value(b), axis);
        self.push(v, Op::Concat { axis }, vec![a, b])
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = slice(self.value(a), axis, start, len);
        self.push(v, Op::Slice { axis, start }, vec![a])
    }

    /// Embed `a` into zeros of extent `total` along `axis`, at offset `start`.
    pub fn pad_slice(&mut self, a: Var, axis: usize, start: usize, total: usize) -> Var {
        let v = pad_slice(self.value(a), axis, start, total);
        self.push(v, Op::PadSlice { axis, start }, vec![a])
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// The returned handles are nodes of this graph; when the inputs of the
    /// forward pass require gradients, so do these, and they can be fed into
    /// a further loss and differentiated again.
    pub fn backward(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Var>> = vec![None; n];
        let seed = Tensor::full(self.shape(loss), 1.0);
        grads[loss.0] = Some(self.constant(seed));
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].requires_grad || self.nodes[i].inputs.is_empty() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let inputs = self.nodes[i].inputs.clone();
            let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let contribs = self.vjp(&op, Var(i), &inputs, &needs, g);
            for ((inp, c), need) in inputs.iter().zip(contribs).zip(needs) {
                let (Some(c), true) = (c, need) else { continue };
                grads[inp.0] = Some(match grads[inp.0] {
                    None => c,
                    Some(prev) => self.add(prev, c),
                });
            }
        }
        let out = wrt
            .iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(*w));
                    self.constant(z)
                }
            })
            .collect();
        self.check_finite()?;
        Ok(out)
    }

    /// Convenience: gradient values as owned tensors.
    pub fn gradients(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.backward(loss, wrt)?;
        Ok(g.into_iter().map(|v| self.value(v).clone()).collect())
    }

    fn vjp(&mut self, op: &Op, out: Var, inputs: &[Var], needs: &[bool], g: Var) -> Vec<Option<Var>> {
        let want = |i: usize| needs[i];
        match op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => {
                let gb = if want(1) { Some(self.neg(g)) } else { None };
                vec![Some(g), gb]
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = if want(0) { Some(self.mul(g, b)) } else { None };
                let gb = if want(1) { Some(self.mul(g, a)) } else { None };
                vec![ga, gb]
            }
            Op::Scale(c) => vec![Some(self.scale(g, *c))],
            Op::AddScalar => vec![Some(g)],
            Op::Powf(p) => {
                let d = self.powf(inputs[0], p - 1.0);
                let d = self.scale(d, *p);
                vec![Some(self.mul(g, d))]
            }
            Op::Sigmoid => {
                let one_minus = self.scale(out, -1.0);
                let one_minus = self.add_scalar(one_minus, 1.0);
                let d = self.mul(out, one_minus);
                vec![Some(self.mul(g, d))]
            }
            Op::Relu => {
                let mask = self.value(inputs[0]).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                vec![Some(self.mul(g, mask))]
            }
            Op::Matmul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                let (ga, gb) = match (ta, tb) {
                    (false, false) => (
                        want(0).then(|| self.matmul_t(g, b, false, true)),
                        want(1).then(|| self.matmul_t(a, g, true, false)),
                    ),
                    (true, false) => (
                        want(0).then(|| self.matmul_t(b, g, false, true)),
                        want(1).then(|| self.matmul_t(a, g, false, false)),
                    ),
                    (false, true) => (
                        want(0).then(|| self.matmul_t(g, b, false, false)),
                        want(1).then(|| self.matmul_t(g, a, true, false)),
                    ),
                    (true, true) => (
                        want(0).then(|| self.matmul_t(b, g, true, true)),
                        want(1).then(|| self.matmul_t(g, a, true, true)),
                    ),
                };
                vec![ga, gb]
            }
            Op::Reshape => {
                let shape = self.shape(inputs[0]).to_vec();
                vec![Some(self.reshape(g, &shape))]
            }
            Op::Permute(perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![Some(self.permute(g, &inv))]
            }
            Op::Im2col => {
                let shape = self.shape(inputs[0]).to_vec();
                vec![Some(self.col2im3(g, &shape))]
            }
            Op::Col2im => vec![Some(self.im2col3(g))],
            Op::AvgPool2 => {
                let u = self.upsample2(g);
                vec![Some(self.scale(u, 0.25))]
            }
            Op::Upsample2 => {
                let p = self.avg_pool2(g);
                vec![Some(self.scale(p, 4.0))]
            }
            Op::SumAll => {
                let shape = self.shape(inputs[0]).to_vec();
                let ones = vec![1; shape.len()];
                let r = self.reshape(g, &ones);
                vec![Some(self.broadcast_to(r, &shape))]
            }
            Op::SumTo => {
                let shape = self.shape(inputs[0]).to_vec();
                vec![Some(self.broadcast_to(g, &shape))]
            }
            Op::BroadcastTo => {
                let shape = self.shape(inputs[0]).to_vec();
                vec![Some(self.sum_to(g, &shape))]
            }
            Op::Concat { axis } => {
                let la = self.shape(inputs[0])[*axis];
                let lb = self.shape(inputs[1])[*axis];
                let ga = want(0).then(|| self.slice(g, *axis, 0, la));
                let gb = want(1).then(|| self.slice(g, *axis, la, lb));
                vec![ga, gb]
            }
            Op::Slice { axis, start } => {
                let total = self.shape(inputs[0])[*axis];
                vec![Some(self.pad_slice(g, *axis, *start, total))]
            }
            Op::PadSlice { axis, start } => {
                let len = self.shape(inputs[0])[*axis];
                vec![Some(self.slice(g, *axis, *start, len))]
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    assert!(a.rank() == 2 && b.rank() == 2, "matmul needs rank-2 operands");
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
    let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
    assert_eq!(k, k2, "matmul inner dimensions differ: {:?} x {:?} (ta={ta}, tb={tb})", a.shape(), b.shape());
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: strides describe the row-major buffers of the given extents.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                rsa as isize,
                csa as isize,
                b.data().as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute(a: &Tensor, perm: &[usize]) -> Tensor {
    let rank = a.rank();
    assert_eq!(perm.len(), rank, "permutation rank mismatch");
    let in_shape = a.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = a.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let src = a.data();
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected [B,C,H,W], got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

/// Output columns `lo..hi` whose source column `x + kx - 1` is inside `0..w`.
fn tap_range(kx: usize, w: usize) -> (usize, usize) {
    (usize::from(kx == 0), if kx == 2 { w - 1 } else { w })
}

fn im2col3(x: &Tensor) -> Tensor {
    let (b, c, h, w) = dims4(x.shape());
    let hw = h * w;
    let cols = b * hw;
    let mut out = vec![0.0; c * 9 * cols];
    let src = x.data();
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols;
                for bi in 0..b {
                    let base = (bi * c + ci) * hw;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = base + sy as usize * w;
                        let drow = row + bi * hw + y * w;
                        let (lo, hi) = tap_range(kx, w);
                        out[drow + lo..drow + hi].copy_from_slice(&src[srow + lo + kx - 1..srow + hi + kx - 1]);
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![c * 9, cols], out)
}

fn col2im3(cols: &Tensor, image_shape: &[usize]) -> Tensor {
    let (b, c, h, w) = dims4(image_shape);
    let hw = h * w;
    let ncols = b * hw;
    assert_eq!(cols.shape(), &[c * 9, ncols], "col2im shape mismatch");
    let mut out = vec![0.0; b * c * hw];
    let src = cols.data();
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ncols;
                for bi in 0..b {
                    let base = (bi * c + ci) * hw;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let drow = base + sy as usize * w;
                        let srow = row + bi * hw + y * w;
                        let (lo, hi) = tap_range(kx, w);
                        let dst = &mut out[drow + lo + kx - 1..drow + hi + kx - 1];
                        for (d, v) in dst.iter_mut().zip(&src[srow + lo..srow + hi]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(image_shape.to_vec(), out)
}

fn avg_pool2(x: &Tensor) -> Tensor {
    let r = x.rank();
    assert!(r >= 2, "avg_pool2 needs rank >= 2");
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial extents, got {h}x{w}");
    let planes = x.numel() / (h * w);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * ho * wo];
    let src = x.data();
    for p in 0..planes {
        for y in 0..ho {
            for xx in 0..wo {
                let s = p * h * w + 2 * y * w + 2 * xx;
                out[p * ho * wo + y * wo + xx] =
                    0.25 * (src[s] + src[s + 1] + src[s + w] + src[s + w + 1]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::from_parts(shape, out)
}

fn upsample2(x: &Tensor) -> Tensor {
    let r = x.rank();
    assert!(r >= 2, "upsample2 needs rank >= 2");
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let planes = x.numel() / (h * w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * ho * wo];
    let src = x.data();
    for p in 0..planes {
        for y in 0..ho {
            for xx in 0..wo {
                out[p * ho * wo + y * wo + xx] = src[p * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::from_parts(shape, out)
}

/// Visit every linear index of `big` with the matching index into `small`,
/// where `small` broadcasts to `big`. Adjacent dims with the same broadcast
/// status are merged so the innermost loop is a plain run.
fn for_each_broadcast(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize)) {
    // (extent in big, stride in small or 0 when broadcast)
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let sstr = strides(small);
    for d in 0..big.len() {
        if big[d] == 1 {
            continue;
        }
        let stride = if small[d] == 1 { 0 } else { sstr[d] };
        match blocks.last_mut() {
            Some((ext, st)) if (*st == 0) == (stride == 0) && (stride == 0 || *st == stride * big[d]) => {
                *ext *= big[d];
                *st = stride;
            }
            _ => blocks.push((big[d], stride)),
        }
    }
    let Some(&(inner, inner_stride)) = blocks.last() else {
        f(0, 0);
        return;
    };
    let outer = &blocks[..blocks.len() - 1];
    let n_outer: usize = outer.iter().map(|b| b.0).product();
    let mut idx = vec![0usize; outer.len()];
    let mut off = 0usize;
    let mut bi = 0usize;
    for _ in 0..n_outer {
        for k in 0..inner {
            f(bi + k, off + k * inner_stride);
        }
        bi += inner;
        for d in (0..outer.len()).rev() {
            idx[d] += 1;
            off += outer[d].1;
            if idx[d] < outer[d].0 {
                break;
            }
            off -= outer[d].1 * outer[d].0;
            idx[d] = 0;
        }
    }
}

fn check_broadcastable(small: &[usize], big: &[usize]) {
    assert_eq!(small.len(), big.len(), "broadcast rank mismatch: {small:?} vs {big:?}");
    for (s, b) in small.iter().zip(big) {
        assert!(s == b || *s == 1, "cannot broadcast {small:?} to {big:?}");
    }
}

fn broadcast_to(x: &Tensor, shape: &[usize]) -> Tensor {
    check_broadcastable(x.shape(), shape);
    let src = x.data();
    let mut out = vec![0.0; shape.iter().product()];
    for_each_broadcast(x.shape(), shape, |b, s| out[b] = src[s]);
    Tensor::from_parts(shape.to_vec(), out)
}

fn sum_to(x: &Tensor, shape: &[usize]) -> Tensor {
    check_broadcastable(shape, x.shape());
    let src = x.data();
    let mut out = vec![0.0; shape.iter().product()];
    for_each_broadcast(shape, x.shape(), |b, s| out[s] += src[b]);
    Tensor::from_parts(shape.to_vec(), out)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Tensor {
    assert_eq!(a.rank(), b.rank(), "concat rank mismatch");
    for d in 0..a.rank() {
        if d != axis {
            assert_eq!(a.shape()[d], b.shape()[d], "concat extent mismatch on axis {d}");
        }
    }
    let (outer, inner) = outer_inner(a.shape(), axis);
    let (la, lb) = (a.shape()[axis] * inner, b.shape()[axis] * inner);
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for o in 0..outer {
        out.extend_from_slice(&a.data()[o * la..(o + 1) * la]);
        out.extend_from_slice(&b.data()[o * lb..(o + 1) * lb]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] += b.shape()[axis];
    Tensor::from_parts(shape, out)
}

fn slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let total = a.shape()[axis];
    assert!(start + len <= total, "slice {start}..{} out of range {total}", start + len);
    let (outer, inner) = outer_inner(a.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * total + start) * inner;
        out.extend_from_slice(&a.data()[s..s + len * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

fn pad_slice(a: &Tensor, axis: usize, start: usize, total: usize) -> Tensor {
    let len = a.shape()[axis];
    assert!(start + len <= total, "pad_slice out of range");
    let (outer, inner) = outer_inner(a.shape(), axis);
    let mut out = vec![0.0; outer * total * inner];
    for o in 0..outer {
        let d = (o * total + start) * inner;
        out[d..d + len * inner].copy_from_slice(&a.data()[o * len * inner..(o + 1) * len * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = total;
    Tensor::from_parts(shape, out)
}
