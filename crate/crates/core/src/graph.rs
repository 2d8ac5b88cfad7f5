//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the tape is a topological order by construction and
//! [`Graph::backward`] is a single reverse sweep. Only nodes downstream of a
//! [`Graph::leaf`] carry gradients; constants (a frozen encoder's weights, the
//! input batch) cost nothing on the way back.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{self, ConvGeom};
use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    SubRow(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Upsample2x(Var),
    GlobalAvgPool(Var),
    RowNorm(Var),
    NormalizeRows(Var),
    CosineRows(Var, Var),
    ConcatRows(Var, Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<T>,
        mask: Option<Vec<bool>>,
        active_rows: usize,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. See the module docs.
#[derive(Clone, Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(shape_err(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Row-wise softmax of a `[N, K]` matrix, max-subtracted.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("softmax_rows", logits, 2)?;
    let k = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        softmax_in_place(row, None);
    }
    let t = Tensor::from_parts(logits.shape(), out)?;
    t.check_finite("softmax_rows")?;
    Ok(t)
}

/// Softmax over the unmasked entries of `row`; masked entries become 0.
/// Returns `ln Σ exp(x - max)` over the unmasked entries and the max.
fn softmax_in_place<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) -> (T, T) {
    let excluded = |j: usize| mask.is_some_and(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if !excluded(j) && x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if excluded(j) {
            *x = T::zero();
        } else {
            *x = (*x - max).exp();
            sum = sum + *x;
        }
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
    (sum.ln(), max)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Every recorded node's inputs precede it.
    pub fn is_topological(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| Self::inputs(&n.op).iter().all(|v| v.0 < i))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            other => Self::inputs(other)
                .iter()
                .any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(op: &Op<T>) -> Vec<Var> {
        match *op {
            Op::Leaf | Op::Constant => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![input, kernel, bias],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Linear { x, w, b } => vec![x, w, b],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::SubRow(a, b)
            | Op::AddRow(a, b)
            | Op::CosineRows(a, b)
            | Op::ConcatRows(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Upsample2x(a)
            | Op::GlobalAvgPool(a)
            | Op::RowNorm(a)
            | Op::NormalizeRows(a) => vec![a],
            Op::Clamp { x, .. } => vec![x],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_input(value, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_input(value, Op::Constant)
    }

    fn push_input(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = matches!(op, Op::Leaf);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Cross-correlation with zero padding: `[N,C,H,W] ⋆ [O,C,kh,kw] + [O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", k, 4)?;
        let (xs, ks) = (x.shape(), k.shape());
        if xs[1] != ks[1] {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input channels (input axis 1) = {} but kernel in-channels (kernel axis 1) = {}",
                    xs[1], ks[1]
                ),
            ));
        }
        if b.shape() != [ks[0]] {
            return Err(shape_err(
                "conv2d",
                format!(
                    "bias shape {:?} does not match kernel out-channels (kernel axis 0) = {}",
                    b.shape(),
                    ks[0]
                ),
            ));
        }
        if stride == 0 {
            return Err(invalid("conv2d stride must be at least 1"));
        }
        if ks[2] > xs[2] + 2 * pad || ks[3] > xs[3] + 2 * pad {
            return Err(shape_err(
                "conv2d",
                format!(
                    "kernel (axes 2,3) = {}x{} exceeds padded input (axes 2,3) = {}x{}",
                    ks[2],
                    ks[3],
                    xs[2] + 2 * pad,
                    xs[3] + 2 * pad
                ),
            ));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
        };
        let out = conv::forward(&geom, x.data(), k.data(), b.data());
        let value = Tensor::from_parts(&[geom.n, geom.o, geom.out_h(), geom.out_w()], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            "conv2d",
        )
    }

    /// `[M,K] · [K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[M,K] · [N,K]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("matmul", av, 2)?;
        expect_rank("matmul", bv, 2)?;
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (bk, n) = if transpose_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return Err(shape_err(
                "matmul",
                format!("lhs axis 1 = {k} but rhs contraction axis = {bk}"),
            ));
        }
        let bm = if transpose_b {
            Mat::transposed(bv.data(), n, k)
        } else {
            Mat::new(bv.data(), k, n)
        };
        let mut out = vec![T::zero(); m * n];
        gemm(Mat::new(av.data(), m, k), bm, T::zero(), &mut out);
        let value = Tensor::from_parts(&[m, n], out)?;
        self.push(value, Op::MatMul { a, b, transpose_b }, "matmul")
    }

    /// Affine map `x · wᵀ + b` with `x: [N,I]`, `w: [O,I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        expect_rank("linear", xv, 2)?;
        expect_rank("linear", wv, 2)?;
        let (n, i) = (xv.shape()[0], xv.shape()[1]);
        let o = wv.shape()[0];
        if wv.shape()[1] != i {
            return Err(shape_err(
                "linear",
                format!(
                    "input features (input axis 1) = {i} but weight axis 1 = {}",
                    wv.shape()[1]
                ),
            ));
        }
        if bv.shape() != [o] {
            return Err(shape_err(
                "linear",
                format!("bias shape {:?} but weight axis 0 = {o}", bv.shape()),
            ));
        }
        let mut out: Vec<T> = (0..n).flat_map(|_| bv.data().iter().copied()).collect();
        gemm(
            Mat::new(xv.data(), n, i),
            Mat::transposed(wv.data(), o, i),
            T::one(),
            &mut out,
        );
        let value = Tensor::from_parts(&[n, o], out)?;
        self.push(value, Op::Linear { x, w, b }, "linear")
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(av.shape(), data)?;
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// `a[i, ...] - b` for every row `i` of `a`; `b` has the shape of one row.
    pub fn sub_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.row_broadcast("sub_row", a, b, |x, y| x - y)?;
        self.push(value, Op::SubRow(a, b), "sub_row")
    }

    /// `a[i, ...] + b` for every row `i` of `a`; `b` has the shape of one row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.row_broadcast("add_row", a, b, |x, y| x + y)?;
        self.push(value, Op::AddRow(a, b), "add_row")
    }

    fn row_broadcast(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 2 || bv.shape() != &av.shape()[1..] {
            return Err(shape_err(
                name,
                format!(
                    "row shape (axes 1..) of {:?} does not match operand {:?}",
                    av.shape(),
                    bv.shape()
                ),
            ));
        }
        let d = bv.len();
        let data = av
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::from_parts(av.shape(), data)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a), "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.tanh());
        self.push(value, Op::Tanh(a), "tanh")
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp_st(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo >= hi || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid(format!(
                "clamp bounds must satisfy lo < hi, got lo={lo:?} hi={hi:?}"
            )));
        }
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(value, Op::Clamp { x, lo, hi }, "clamp_st")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a), "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_f64(v.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), "mean")
    }

    /// Nearest-neighbour ×2 upsampling of `[N,C,H,W]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        expect_rank("upsample2x", av, 4)?;
        let s = av.shape();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            let src = &av.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::from_parts(&[s[0], s[1], 2 * h, 2 * w], out)?;
        self.push(value, Op::Upsample2x(a), "upsample2x")
    }

    /// Spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        expect_rank("global_avg_pool", av, 4)?;
        let s = av.shape();
        let hw = s[2] * s[3];
        let inv = T::from_f64(1.0 / hw as f64);
        let data = av
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_parts(&[s[0], s[1]], data)?;
        self.push(value, Op::GlobalAvgPool(a), "global_avg_pool")
    }

    /// Euclidean norm of each row: `[N,D] -> [N]`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        expect_rank("row_norm", av, 2)?;
        let d = av.shape()[1];
        let data = av.data().chunks(d).map(norm).collect();
        let value = Tensor::from_parts(&[av.shape()[0]], data)?;
        self.push(value, Op::RowNorm(a), "row_norm")
    }

    /// Scales each row to unit Euclidean norm. Zero rows are an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        expect_rank("normalize_rows", av, 2)?;
        let d = av.shape()[1];
        let mut data = Vec::with_capacity(av.len());
        for (i, row) in av.data().chunks(d).enumerate() {
            let r = norm(row);
            if r == T::zero() {
                return Err(Error::Degenerate(format!(
                    "normalize_rows: row {i} is the zero vector"
                )));
            }
            data.extend(row.iter().map(|&x| x / r));
        }
        let value = Tensor::from_parts(av.shape(), data)?;
        self.push(value, Op::NormalizeRows(a), "normalize_rows")
    }

    /// Cosine similarity of matching rows. `b` is `[N,D]` or a single `[D]`
    /// row shared by every row of `a`. A zero vector has no angle: error.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("cosine_rows", av, 2)?;
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let shared = bv.shape() == [d];
        if !shared && bv.shape() != av.shape() {
            return Err(shape_err(
                "cosine_rows",
                format!("operand shapes {:?} and {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let ra = av.row(i);
            let rb = if shared { bv.data() } else { bv.row(i) };
            let (na, nb) = (norm(ra), norm(rb));
            if na == T::zero() || nb == T::zero() {
                return Err(Error::Degenerate(format!(
                    "cosine_rows: zero vector in row {i}"
                )));
            }
            data.push(dot(ra, rb) / (na * nb));
        }
        let value = Tensor::from_parts(&[n], data)?;
        self.push(value, Op::CosineRows(a, b), "cosine_rows")
    }

    /// Stacks `a: [N1, ...]` on top of `b: [N2, ...]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::stack_rows(&[self.value(a).clone(), self.value(b).clone()])?;
        self.push(value, Op::ConcatRows(a, b), "concat_rows")
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        expect_rank("softmax_cross_entropy", lv, 2)?;
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != n {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for {n} logit rows", labels.len()),
            ));
        }
        let mut targets = vec![T::zero(); n * k];
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: k,
                });
            }
            targets[i * k + l] = T::one();
        }
        self.cross_entropy_impl(logits, targets, None)
    }

    /// Cross-entropy against per-row target distributions, optionally with
    /// entries excluded from the softmax. Rows whose target is all zero are
    /// skipped; the result is the mean over the remaining rows.
    pub fn soft_cross_entropy(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        expect_rank("soft_cross_entropy", lv, 2)?;
        same_shape("soft_cross_entropy", lv, targets)?;
        if let Some(m) = mask {
            if m.len() != lv.len() {
                return Err(shape_err(
                    "soft_cross_entropy",
                    format!("mask has {} entries for {} logits", m.len(), lv.len()),
                ));
            }
            if m.iter().zip(targets.data()).any(|(&x, &t)| x && t != T::zero()) {
                return Err(invalid("soft_cross_entropy: target mass on a masked entry"));
            }
        }
        self.cross_entropy_impl(logits, targets.data().to_vec(), mask.map(|m| m.to_vec()))
    }

    fn cross_entropy_impl(
        &mut self,
        logits: Var,
        targets: Vec<T>,
        mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let k = lv.shape()[1];
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        let mut active_rows = 0;
        for (i, row) in probs.chunks_mut(k).enumerate() {
            let m = mask.as_ref().map(|m| &m[i * k..(i + 1) * k]);
            let logits_row = &lv.data()[i * k..(i + 1) * k];
            if m.is_some_and(|m| m.iter().all(|&x| x)) {
                return Err(invalid(format!("cross_entropy: row {i} fully masked")));
            }
            let (log_sum, max) = softmax_in_place(row, m);
            let t = &targets[i * k..(i + 1) * k];
            if t.iter().all(|&x| x == T::zero()) {
                row.fill(T::zero());
                continue;
            }
            active_rows += 1;
            for j in 0..k {
                if t[j] != T::zero() {
                    let log_p = logits_row[j] - max - log_sum;
                    total = total - t[j] * log_p;
                }
            }
        }
        if active_rows == 0 {
            return Err(invalid("cross_entropy: every row has an empty target"));
        }
        let loss = total / T::from_f64(active_rows as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                mask,
                active_rows,
            },
            "cross_entropy",
        )
    }

    /// Gradients of scalar `output` with respect to each of `leaves`, in
    /// order. Leaves that `output` does not depend on get zeros.
    pub fn backward(&self, output: Var, leaves: &[Var]) -> Result<Vec<Tensor<T>>> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::NotScalar {
                shape: out.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        if out.requires_grad {
            grads[output.0] = Some(Tensor::full(out.value.shape(), T::one()));
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        leaves
            .iter()
            .map(|&v| {
                let g = match grads.get_mut(v.0).and_then(Option::take) {
                    Some(g) => g,
                    None => Tensor::zeros(self.nodes[v.0].value.shape()),
                };
                g.check_finite("backward")?;
                Ok(g)
            })
            .collect()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, d: Tensor<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let xv = self.value(*input);
                let kv = self.value(*kernel);
                if self.needs(*input) {
                    let dx = conv::backward_input(geom, gd, kv.data());
                    acc(*input, Tensor::from_parts(xv.shape(), dx)?);
                }
                if self.needs(*kernel) {
                    let dk = conv::backward_kernel(geom, xv.data(), gd);
                    acc(*kernel, Tensor::from_parts(kv.shape(), dk)?);
                }
                if self.needs(*bias) {
                    let db = conv::backward_bias(geom, gd);
                    acc(*bias, Tensor::from_parts(&[geom.o], db)?);
                }
            }
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                let gm = Mat::new(gd, m, n);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    let bm = if *transpose_b {
                        Mat::new(bv.data(), n, k)
                    } else {
                        Mat::transposed(bv.data(), k, n)
                    };
                    gemm(gm, bm, T::zero(), &mut da);
                    acc(*a, Tensor::from_parts(av.shape(), da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *transpose_b {
                        // d(B: [N,K]) = gᵀ · A
                        gemm(
                            Mat::transposed(gd, m, n),
                            Mat::new(av.data(), m, k),
                            T::zero(),
                            &mut db,
                        );
                    } else {
                        gemm(Mat::transposed(av.data(), m, k), gm, T::zero(), &mut db);
                    }
                    acc(*b, Tensor::from_parts(bv.shape(), db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    gemm(Mat::new(gd, n, o), Mat::new(wv.data(), o, i), T::zero(), &mut dx);
                    acc(*x, Tensor::from_parts(xv.shape(), dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    gemm(
                        Mat::transposed(gd, n, o),
                        Mat::new(xv.data(), n, i),
                        T::zero(),
                        &mut dw,
                    );
                    acc(*w, Tensor::from_parts(wv.shape(), dw)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in gd.chunks(o) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d = *d + x;
                        }
                    }
                    acc(*b, Tensor::from_parts(&[o], db)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                    acc(*a, Tensor::from_parts(av.shape(), d)?);
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                    acc(*b, Tensor::from_parts(bv.shape(), d)?);
                }
            }
            Op::SubRow(a, b) | Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.needs(*b) {
                    let bv = self.value(*b);
                    let sign = if matches!(node.op, Op::SubRow(..)) {
                        -T::one()
                    } else {
                        T::one()
                    };
                    let mut db = vec![T::zero(); bv.len()];
                    for row in gd.chunks(bv.len()) {
                        for (s, &x) in db.iter_mut().zip(row) {
                            *s = *s + sign * x;
                        }
                    }
                    acc(*b, Tensor::from_parts(bv.shape(), db)?);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * *s)),
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                acc(*a, Tensor::from_parts(g.shape(), d)?);
            }
            Op::Tanh(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect();
                acc(*a, Tensor::from_parts(g.shape(), d)?);
            }
            Op::Clamp { x, lo, hi } => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v > *lo && v < *hi { g } else { T::zero() })
                    .collect();
                acc(*x, Tensor::from_parts(g.shape(), d)?);
            }
            Op::Reshape(a) => {
                acc(*a, g.clone().reshape(self.value(*a).shape())?);
            }
            Op::Sum(a) => {
                acc(*a, Tensor::full(self.value(*a).shape(), g.item()));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let v = g.item() / T::from_f64(av.len() as f64);
                acc(*a, Tensor::full(av.shape(), v));
            }
            Op::Upsample2x(a) => {
                let av = self.value(*a);
                let s = av.shape();
                let (h, w) = (s[2], s[3]);
                let mut d = vec![T::zero(); av.len()];
                for (p, dst) in d.chunks_mut(h * w).enumerate() {
                    let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let t = &mut dst[(y / 2) * w + x / 2];
                            *t = *t + src[y * 2 * w + x];
                        }
                    }
                }
                acc(*a, Tensor::from_parts(s, d)?);
            }
            Op::GlobalAvgPool(a) => {
                let av = self.value(*a);
                let hw = av.shape()[2] * av.shape()[3];
                let inv = T::from_f64(1.0 / hw as f64);
                let d = gd
                    .iter()
                    .flat_map(|&x| core::iter::repeat(x * inv).take(hw))
                    .collect();
                acc(*a, Tensor::from_parts(av.shape(), d)?);
            }
            Op::RowNorm(a) => {
                let av = self.value(*a);
                let dim = av.shape()[1];
                let mut d = Vec::with_capacity(av.len());
                for (i, row) in av.data().chunks(dim).enumerate() {
                    let r = node.value.data()[i];
                    if r == T::zero() {
                        // subgradient 0 at the origin
                        d.extend(core::iter::repeat(T::zero()).take(dim));
                    } else {
                        let s = gd[i] / r;
                        d.extend(row.iter().map(|&x| x * s));
                    }
                }
                acc(*a, Tensor::from_parts(av.shape(), d)?);
            }
            Op::NormalizeRows(a) => {
                let av = self.value(*a);
                let dim = av.shape()[1];
                let mut d = Vec::with_capacity(av.len());
                for (i, row) in av.data().chunks(dim).enumerate() {
                    let r = norm(row);
                    let u = node.value.row(i);
                    let gr = &gd[i * dim..(i + 1) * dim];
                    let ug = dot(u, gr);
                    d.extend(gr.iter().zip(u).map(|(&g, &u)| (g - u * ug) / r));
                }
                acc(*a, Tensor::from_parts(av.shape(), d)?);
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let dim = av.shape()[1];
                let shared = bv.shape() == [dim];
                let mut da = Vec::with_capacity(av.len());
                let mut db = vec![T::zero(); bv.len()];
                for i in 0..av.shape()[0] {
                    let ra = av.row(i);
                    let rb = if shared { bv.data() } else { bv.row(i) };
                    let (na, nb) = (norm(ra), norm(rb));
                    let c = node.value.data()[i];
                    let gi = gd[i];
                    let inv = T::one() / (na * nb);
                    da.extend(
                        ra.iter()
                            .zip(rb)
                            .map(|(&x, &y)| gi * (y * inv - c * x / (na * na))),
                    );
                    let off = if shared { 0 } else { i * dim };
                    for j in 0..dim {
                        let v = gi * (ra[j] * inv - c * rb[j] / (nb * nb));
                        db[off + j] = db[off + j] + v;
                    }
                }
                acc(*a, Tensor::from_parts(av.shape(), da)?);
                acc(*b, Tensor::from_parts(bv.shape(), db)?);
            }
            Op::ConcatRows(a, b) => {
                let n1 = self.value(*a).len();
                acc(
                    *a,
                    Tensor::from_parts(self.value(*a).shape(), gd[..n1].to_vec())?,
                );
                acc(
                    *b,
                    Tensor::from_parts(self.value(*b).shape(), gd[n1..].to_vec())?,
                );
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                mask,
                active_rows,
            } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let scale = g.item() / T::from_f64(*active_rows as f64);
                let mut d = vec![T::zero(); lv.len()];
                for (i, row) in d.chunks_mut(k).enumerate() {
                    let t = &targets[i * k..(i + 1) * k];
                    if t.iter().all(|&x| x == T::zero()) {
                        continue;
                    }
                    let mass: T = t.iter().copied().sum();
                    for j in 0..k {
                        if mask.as_ref().is_some_and(|m| m[i * k + j]) {
                            continue;
                        }
                        row[j] = scale * (mass * probs[i * k + j] - t[j]);
                    }
                }
                acc(*logits, Tensor::from_parts(lv.shape(), d)?);
            }
        }
        Ok(())
    }
}
