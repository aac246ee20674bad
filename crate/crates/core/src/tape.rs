//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation appends a node holding its forward value and the inputs
//! its local derivative needs. Node indices are handed out as [`Var`]s, so a
//! node can only refer to earlier nodes and the record is topologically
//! ordered by construction.
//!
//! [`Tape::backward`] may run once per recorded forward pass. A second call
//! fails with [`Error::Contract`] until [`Tape::reset`] starts a new pass, so
//! gradients are never silently accumulated twice.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log { x: Var, floor: T },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeometry, c_out: usize },
    ConvTranspose2d { input: Var, kernel: Var, bias: Var, geom: ConvGeometry, c_in: usize },
    Softmax { x: Var, width: usize },
    NormLast { x: Var, width: usize },
    SquashLast { x: Var, width: usize },
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { x: Var, offset: usize },
    TransposeLast2 { x: Var, batch: usize, rows: usize, cols: usize },
    Sum(Var),
    Mean(Var),
    Votes { u: Var, w: Var, group: usize, classes: usize, in_dim: usize, out_dim: usize },
    RoutingCombine { votes: Var, couplings: Vec<T>, classes: usize, dim: usize },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
    spent: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            spent: false,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Clears every node and gradient so a new forward pass can be recorded.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.spent = false;
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

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, present only for leaves that require one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Sign of every relu input recorded so far, in recording order. Two
    /// forward passes with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.data(x).iter().map(|v| *v > T::zero()))
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_node(Arc::new(value), op, requires_grad)
    }

    fn push_node(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn new_value(shape: &[usize], data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape, data).expect("kernel produced inconsistent shape")
    }

    // ---- leaves -------------------------------------------------------

    /// Records a leaf; it participates in differentiation iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.shared(Arc::new(t))
    }

    /// Records a leaf without copying its data.
    pub fn shared(&mut self, t: Arc<Tensor<T>>) -> Var {
        let rg = self.grad_enabled && t.requires_grad;
        self.push_node(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    // ---- elementwise --------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Self::new_value(self.shape(a), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        Self::new_value(self.shape(a), self.data(a).iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::from_acc(scale), T::from_acc(shift));
        let out = self.map(x, |v| s * v + b);
        self.push(out, Op::Affine { x, scale: s }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| T::from_acc(sigmoid(v.acc())));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        let floor = T::from_acc(floor);
        let out = self.map(x, |v| v.max(floor).ln());
        self.push(out, Op::Log { x, floor }, &[x])
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::gemm_nn(self.data(a), self.data(b), m, k, n);
        let out = Self::new_value(&[m, n], out);
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Cross-correlation of `[c_in, h, w]` with `[c_out, c_in, k, k]` kernels plus a per-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if si.len() != 3 || sk.len() != 4 || sk[2] != sk[3] || sk[1] != si[0] || sb != [sk[0]] {
            return Err(Error::dim(
                "conv2d",
                format!("input {si:?}, kernels {sk:?}, bias {sb:?} are incompatible"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let (c_out, ksize) = (sk[0], sk[2]);
        if si[1] + 2 * padding < ksize || si[2] + 2 * padding < ksize {
            return Err(Error::dim(
                "conv2d",
                format!("input {si:?} is smaller than the {ksize}x{ksize} kernel"),
            ));
        }
        let geom = ConvGeometry {
            channels: si[0],
            height: si[1],
            width: si[2],
            kernel: ksize,
            stride,
            padding,
        };
        let cols = kernels::im2col(self.data(input), geom);
        let mut out = kernels::gemm_nn(self.data(kernel), &cols, c_out, geom.col_rows(), geom.col_cols());
        let plane = geom.col_cols();
        for (o, &b) in self.data(bias).iter().enumerate() {
            out[o * plane..(o + 1) * plane].iter_mut().for_each(|x| *x = *x + b);
        }
        let out = Self::new_value(&[c_out, geom.out_height(), geom.out_width()], out);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                c_out,
            },
            &[input, kernel, bias],
        ))
    }

    /// Transposed convolution of `[c_in, h, w]` with `[c_in, c_out, k, k]` kernels.
    /// Output side is `(h-1)·stride - 2·padding + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if si.len() != 3 || sk.len() != 4 || sk[2] != sk[3] || sk[0] != si[0] || sb != [sk[1]] {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input {si:?}, kernels {sk:?}, bias {sb:?} are incompatible"),
            ));
        }
        if stride == 0 || output_padding >= stride {
            return Err(Error::dim("conv_transpose2d", "need stride > output_padding"));
        }
        let (c_in, c_out, ksize) = (sk[0], sk[1], sk[2]);
        let side = |n: usize| ((n - 1) * stride + ksize + output_padding).checked_sub(2 * padding);
        let (Some(oh), Some(ow)) = (side(si[1]), side(si[2])) else {
            return Err(Error::dim("conv_transpose2d", "padding larger than output"));
        };
        let geom = ConvGeometry {
            channels: c_out,
            height: oh,
            width: ow,
            kernel: ksize,
            stride,
            padding,
        };
        debug_assert_eq!(geom.out_height(), si[1]);
        let hw = si[1] * si[2];
        let cols = kernels::gemm_tn(self.data(kernel), self.data(input), geom.col_rows(), c_in, hw);
        let mut out = kernels::col2im(&cols, geom);
        let plane = oh * ow;
        for (o, &b) in self.data(bias).iter().enumerate() {
            out[o * plane..(o + 1) * plane].iter_mut().for_each(|x| *x = *x + b);
        }
        let out = Self::new_value(&[c_out, oh, ow], out);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
                c_in,
            },
            &[input, kernel, bias],
        ))
    }

    // ---- normalisations over the last axis ------------------------------

    fn last_width(&self, x: Var) -> usize {
        *self.shape(x).last().unwrap()
    }

    fn drop_last(shape: &[usize]) -> Vec<usize> {
        if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        }
    }

    /// Max-stabilised softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let width = self.last_width(x);
        let mut out = Vec::with_capacity(self.data(x).len());
        for row in self.data(x).chunks(width) {
            out.extend(softmax_row(row));
        }
        let out = Self::new_value(self.shape(x), out);
        self.push(out, Op::Softmax { x, width }, &[x])
    }

    /// Euclidean norm along the last axis; a rank-1 input gives a `[1]` scalar.
    pub fn norm_last(&mut self, x: Var) -> Var {
        let width = self.last_width(x);
        let out: Vec<T> = self
            .data(x)
            .chunks(width)
            .map(|r| T::from_acc(kernels::norm(r)))
            .collect();
        let out = Self::new_value(&Self::drop_last(self.shape(x)), out);
        self.push(out, Op::NormLast { x, width }, &[x])
    }

    /// Norm of a vector of any shape, as a scalar.
    pub fn l2norm(&mut self, x: Var) -> Var {
        let n = self.data(x).len();
        let flat = self.reshape(x, &[n]).expect("flatten");
        self.norm_last(flat)
    }

    /// Capsule squash along the last axis: `s·‖s‖/(1+‖s‖²)`.
    pub fn squash(&mut self, x: Var) -> Var {
        let width = self.last_width(x);
        let mut out = Vec::with_capacity(self.data(x).len());
        for row in self.data(x).chunks(width) {
            let n = kernels::norm(row);
            let f = n / (1.0 + n * n);
            out.extend(row.iter().map(|&v| T::from_acc(v.acc() * f)));
        }
        let out = Self::new_value(self.shape(x), out);
        self.push(out, Op::SquashLast { x, width }, &[x])
    }

    // ---- structure ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[x.0].value).clone();
        let out = t.reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} does not stack with trailing dims {tail:?}"),
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.data(x));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Self::new_value(&shape, data);
        Ok(self.push(out, Op::Concat(xs.to_vec()), xs))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::dim(
                "slice",
                format!("rows {start}..{} out of range for {s:?}", start + len),
            ));
        }
        let row: usize = s[1..].iter().product();
        let data = self.data(x)[start * row..(start + len) * row].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let out = Self::new_value(&shape, data);
        Ok(self.push(out, Op::Slice { x, offset: start * row }, &[x]))
    }

    /// Row `index` along axis 0 with that axis removed.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let sliced = self.slice(x, index, 1)?;
        let shape = if s.len() == 1 { vec![1] } else { s[1..].to_vec() };
        self.reshape(sliced, &shape)
    }

    /// `[.., r, c]` → `[.., c, r]`.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("transpose", format!("need rank >= 2, got {s:?}")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.data(x).len() / (rows * cols);
        let src = self.data(x);
        let mut data = Vec::with_capacity(src.len());
        for b in 0..batch {
            let m = &src[b * rows * cols..(b + 1) * rows * cols];
            for c in 0..cols {
                data.extend((0..rows).map(|r| m[r * cols + c]));
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        let out = Self::new_value(&shape, data);
        Ok(self.push(out, Op::TransposeLast2 { x, batch, rows, cols }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v.acc()).sum();
        self.push(Tensor::scalar(T::from_acc(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len() as f64;
        let s: f64 = self.data(x).iter().map(|v| v.acc()).sum();
        self.push(Tensor::scalar(T::from_acc(s / n)), Op::Mean(x), &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    // ---- capsule primitives ---------------------------------------------

    /// Prediction vectors `û[i,j] = u[i]ᵀ·W[i / group, j]` for `u: [P, d_in]`
    /// and `W: [P / group, N, d_in, d_out]`, giving `[P, N, d_out]`.
    pub fn capsule_votes(&mut self, u: Var, w: Var) -> Result<Var> {
        let (su, sw) = (self.shape(u).to_vec(), self.shape(w).to_vec());
        if su.len() != 2 || sw.len() != 4 || sw[2] != su[1] || sw[0] == 0 || su[0] % sw[0] != 0 {
            return Err(Error::dim(
                "capsule_votes",
                format!("capsules {su:?} and weights {sw:?} are incompatible"),
            ));
        }
        let (p, in_dim) = (su[0], su[1]);
        let (classes, out_dim) = (sw[1], sw[3]);
        let group = p / sw[0];
        let (ud, wd) = (self.data(u), self.data(w));
        let mut out = Vec::with_capacity(p * classes * out_dim);
        let mut acc = vec![0.0f64; out_dim];
        for i in 0..p {
            let ui = &ud[i * in_dim..(i + 1) * in_dim];
            let block = i / group;
            for j in 0..classes {
                acc.iter_mut().for_each(|x| *x = 0.0);
                let wij = &wd[(block * classes + j) * in_dim * out_dim..][..in_dim * out_dim];
                for (a, &ua) in ui.iter().enumerate() {
                    let ua = ua.acc();
                    for (s, &wv) in acc.iter_mut().zip(&wij[a * out_dim..(a + 1) * out_dim]) {
                        *s += ua * wv.acc();
                    }
                }
                out.extend(acc.iter().map(|&x| T::from_acc(x)));
            }
        }
        let out = Self::new_value(&[p, classes, out_dim], out);
        Ok(self.push(
            out,
            Op::Votes {
                u,
                w,
                group,
                classes,
                in_dim,
                out_dim,
            },
            &[u, w],
        ))
    }

    /// `s[j] = Σ_i c[i,j]·û[i,j]` with the couplings `c: [P, N]` held constant.
    pub fn routing_combine(&mut self, votes: Var, couplings: &[T]) -> Result<Var> {
        let sv = self.shape(votes).to_vec();
        if sv.len() != 3 || couplings.len() != sv[0] * sv[1] {
            return Err(Error::dim(
                "routing_combine",
                format!("votes {sv:?} with {} couplings", couplings.len()),
            ));
        }
        let (p, classes, dim) = (sv[0], sv[1], sv[2]);
        let vd = self.data(votes);
        let mut acc = vec![0.0f64; classes * dim];
        for i in 0..p {
            for j in 0..classes {
                let c = couplings[i * classes + j].acc();
                let row = &vd[(i * classes + j) * dim..][..dim];
                for (s, &x) in acc[j * dim..(j + 1) * dim].iter_mut().zip(row) {
                    *s += c * x.acc();
                }
            }
        }
        let out = Self::new_value(&[classes, dim], acc.into_iter().map(T::from_acc).collect());
        Ok(self.push(
            out,
            Op::RoutingCombine {
                votes,
                couplings: couplings.to_vec(),
                classes,
                dim,
            },
            &[votes],
        ))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates d`loss`/d(leaf) to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.spent {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it and record a new forward pass".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        for (idx, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a = *a + c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    send(*a, g.iter().zip(db).map(|(&x, &y)| x * y).collect());
                }
                if self.requires_grad(*b) {
                    send(*b, g.iter().zip(da).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Affine { x, scale } => send(*x, g.iter().map(|&v| v * *scale).collect()),
            Op::Relu(x) => send(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect(),
            ),
            Op::Sigmoid(x) => send(
                *x,
                g.iter().zip(out).map(|(&gv, &y)| gv * y * (T::one() - y)).collect(),
            ),
            Op::Tanh(x) => send(
                *x,
                g.iter().zip(out).map(|(&gv, &y)| gv * (T::one() - y * y)).collect(),
            ),
            Op::Log { x, floor } => send(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &xv)| if xv > *floor { gv / xv } else { T::zero() })
                    .collect(),
            ),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.requires_grad(*a) {
                    send(*a, kernels::gemm_nt(g, self.data(*b), m, n, k));
                }
                if self.requires_grad(*b) {
                    send(*b, kernels::gemm_tn(self.data(*a), g, k, m, n));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                c_out,
            } => {
                let plane = geom.col_cols();
                let rows = geom.col_rows();
                if self.requires_grad(*bias) {
                    send(*bias, channel_sums(g, *c_out, plane));
                }
                if self.requires_grad(*kernel) {
                    let cols = kernels::im2col(self.data(*input), *geom);
                    send(*kernel, kernels::gemm_nt(g, &cols, *c_out, plane, rows));
                }
                if self.requires_grad(*input) {
                    let dcols = kernels::gemm_tn(self.data(*kernel), g, rows, *c_out, plane);
                    send(*input, kernels::col2im(&dcols, *geom));
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
                c_in,
            } => {
                let hw = geom.col_cols();
                let rows = geom.col_rows();
                if self.requires_grad(*bias) {
                    send(*bias, channel_sums(g, geom.channels, geom.height * geom.width));
                }
                let dcols = kernels::im2col(g, *geom);
                if self.requires_grad(*kernel) {
                    send(*kernel, kernels::gemm_nt(self.data(*input), &dcols, *c_in, hw, rows));
                }
                if self.requires_grad(*input) {
                    send(*input, kernels::gemm_nn(self.data(*kernel), &dcols, *c_in, rows, hw));
                }
            }
            Op::Softmax { x, width } => {
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(*width).zip(out.chunks(*width)) {
                    let inner = kernels::dot(gr, yr);
                    dx.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(&gv, &y)| T::from_acc(y.acc() * (gv.acc() - inner))),
                    );
                }
                send(*x, dx);
            }
            Op::NormLast { x, width } => {
                let mut dx = Vec::with_capacity(self.data(*x).len());
                for ((row, &n), &gn) in self.data(*x).chunks(*width).zip(out).zip(g) {
                    let n = n.acc();
                    if n == 0.0 {
                        dx.extend(std::iter::repeat_n(T::zero(), *width));
                    } else {
                        let scale = gn.acc() / n;
                        dx.extend(row.iter().map(|&v| T::from_acc(v.acc() * scale)));
                    }
                }
                send(*x, dx);
            }
            Op::SquashLast { x, width } => {
                let mut dx = Vec::with_capacity(g.len());
                for (row, gr) in self.data(*x).chunks(*width).zip(g.chunks(*width)) {
                    let n = kernels::norm(row);
                    if n == 0.0 {
                        dx.extend(std::iter::repeat_n(T::zero(), *width));
                        continue;
                    }
                    let q = 1.0 + n * n;
                    let f = n / q;
                    let df_over_n = (1.0 - n * n) / (q * q) / n;
                    let sg = kernels::dot(row, gr);
                    dx.extend(
                        row.iter()
                            .zip(gr)
                            .map(|(&s, &gv)| T::from_acc(f * gv.acc() + df_over_n * sg * s.acc())),
                    );
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.data(x).len();
                    send(x, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Slice { x, offset } => {
                let mut dx = vec![T::zero(); self.data(*x).len()];
                dx[*offset..*offset + g.len()].copy_from_slice(g);
                send(*x, dx);
            }
            Op::TransposeLast2 { x, batch, rows, cols } => {
                // g has layout [batch, cols, rows]
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..*batch {
                    let base = b * rows * cols;
                    for c in 0..*cols {
                        for r in 0..*rows {
                            dx[base + r * cols + c] = g[base + c * rows + r];
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.data(*x).len()]),
            Op::Mean(x) => {
                let n = self.data(*x).len();
                send(*x, vec![T::from_acc(g[0].acc() / n as f64); n]);
            }
            Op::Votes {
                u,
                w,
                group,
                classes,
                in_dim,
                out_dim,
            } => {
                let (ud, wd) = (self.data(*u), self.data(*w));
                let p = ud.len() / in_dim;
                let want_u = self.requires_grad(*u);
                let want_w = self.requires_grad(*w);
                let mut du = vec![0.0f64; if want_u { ud.len() } else { 0 }];
                let mut dw = vec![0.0f64; if want_w { wd.len() } else { 0 }];
                for i in 0..p {
                    let block = i / group;
                    let ui = &ud[i * in_dim..(i + 1) * in_dim];
                    for j in 0..*classes {
                        let gij = &g[(i * classes + j) * out_dim..][..*out_dim];
                        let woff = (block * classes + j) * in_dim * out_dim;
                        for a in 0..*in_dim {
                            let wrow = &wd[woff + a * out_dim..][..*out_dim];
                            if want_u {
                                du[i * in_dim + a] += kernels::dot(gij, wrow);
                            }
                            if want_w {
                                let ua = ui[a].acc();
                                for (d, &gv) in dw[woff + a * out_dim..][..*out_dim].iter_mut().zip(gij) {
                                    *d += ua * gv.acc();
                                }
                            }
                        }
                    }
                }
                if want_u {
                    send(*u, du.into_iter().map(T::from_acc).collect());
                }
                if want_w {
                    send(*w, dw.into_iter().map(T::from_acc).collect());
                }
            }
            Op::RoutingCombine {
                votes,
                couplings,
                classes,
                dim,
            } => {
                let p = couplings.len() / classes;
                let mut dv = Vec::with_capacity(p * classes * dim);
                for i in 0..p {
                    for j in 0..*classes {
                        let c = couplings[i * classes + j];
                        dv.extend(g[j * dim..(j + 1) * dim].iter().map(|&x| x * c));
                    }
                }
                send(*votes, dv);
            }
        }
    }
}

fn channel_sums<T: Element>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    (0..channels)
        .map(|c| T::from_acc(g[c * plane..(c + 1) * plane].iter().map(|x| x.acc()).sum()))
        .collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row, accumulated in `f64`.
pub fn softmax_row<T: Element>(row: &[T]) -> Vec<T> {
    let max = row.iter().map(|v| v.acc()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.acc() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::from_acc(e / total)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape<f64>, data: &[f64]) -> Var {
        tape.leaf(Tensor::from_f64(&[data.len()], data).unwrap().with_grad())
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[1.0, -2.0, 3.0, 0.5]);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[3.0]);
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn second_backward_is_rejected_until_reset() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[2.0]);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);

        tape.reset();
        let x = vec_leaf(&mut tape, &[5.0]);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[10.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_and_constant_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let unused = vec_leaf(&mut tape, &[7.0]);
        let c = tape.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let d = tape.dot(x, c).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(unused).is_none());
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn matmul_hand_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.data(c), &[3.0, 7.0]);

        let eye = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = tape.constant(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn conv2d_hand_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.data(y), &[9.0]);

        let z = tape.constant(Tensor::zeros(&[2, 6, 6]));
        let k = tape.constant(Tensor::full(&[3, 2, 3, 3], 0.7));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(z, k, b, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[3, 2, 2]);
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_rejects_input_smaller_than_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 5]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, k, b, 1, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_transpose_doubles_with_unit_padding() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2, 6, 6], 1.0));
        let k = tape.constant(Tensor::full(&[2, 3, 3, 3], 0.1));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv_transpose2d(x, k, b, 2, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[3, 12, 12]);
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[0.0, 0.0, 0.0]);
        let y = tape.softmax(x);
        for &p in tape.data(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = vec_leaf(&mut tape, &[1000.0, 0.0]);
        let y = tape.softmax(x);
        assert!((tape.data(y)[0] - 1.0).abs() < 1e-12 && tape.data(y)[1] < 1e-300 + 1e-12);
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let y = tape.softmax(x);
        assert!((tape.data(y)[0] - 0.2689).abs() < 1e-4);
        assert!((tape.data(y)[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn l2norm_values_and_zero_subgradient() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[3.0, 4.0]);
        let n = tape.l2norm(x);
        assert_eq!(tape.data(n), &[5.0]);
        tape.backward(n).unwrap();
        let g = tape.grad(x).unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);

        let mut tape = Tape::<f64>::new();
        let z = vec_leaf(&mut tape, &[0.0, 0.0, 0.0]);
        let n = tape.l2norm(z);
        assert_eq!(tape.data(n), &[0.0]);
        tape.backward(n).unwrap();
        assert_eq!(tape.grad(z).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::full(&[2], 1.0).with_grad());
        let s = tape.sum(x);
        assert!(!tape.requires_grad(s));
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }
}
