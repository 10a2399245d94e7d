//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. `backward` walks the
//! nodes in exact reverse order of creation and accumulates vector-Jacobian
//! products into the inputs that need them.

use super::float::Float;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over `[B, C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: F },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, rstd: Vec<F> },
    Gelu { a: Var },
    Relu { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    BroadcastTo { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<F> },
    SumAll { a: Var },
    SumRows { a: Var },
    NormalizeRows { a: Var, norms: Vec<F>, eps: F },
    MaskedLogSumExp { a: Var, mask: Vec<bool> },
    Gather { a: Var, index: Vec<usize> },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Relu { .. } => "relu",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::BroadcastTo { .. } => "broadcast_to",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Conv2d { .. } => "conv2d",
            Op::SumAll { .. } => "sum_all",
            Op::SumRows { .. } => "sum_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::MaskedLogSumExp { .. } => "masked_logsumexp",
            Op::Gather { .. } => "gather",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Scale { a, .. }
            | Op::Softmax { a }
            | Op::Gelu { a }
            | Op::Relu { a }
            | Op::Exp { a }
            | Op::Log { a }
            | Op::Permute { a, .. }
            | Op::Reshape { a }
            | Op::BroadcastTo { a }
            | Op::Slice { a, .. }
            | Op::SumAll { a }
            | Op::SumRows { a }
            | Op::NormalizeRows { a, .. }
            | Op::MaskedLogSumExp { a, .. }
            | Op::Gather { a, .. } => vec![*a],
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
    needs_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of a variable, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[F]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a variable; zeros when disconnected from the loss.
    pub fn wrt(&self, var: Var) -> Tensor<F> {
        let shape = self.shapes[var.0].clone();
        match self.get(var) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `0.5·(1 + tanh u)` for the GELU argument `u`, as the equal `σ(2u)`.
fn gelu_gate<F: Float>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    F::one() / (F::one() + (-(u + u)).exp())
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn accumulate<F: Float>(slot: &mut Option<Vec<F>>, len: usize, f: impl FnOnce(&mut [F])) {
    let buf = slot.get_or_insert_with(|| vec![F::zero(); len]);
    f(buf);
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(out_index, in_index)` for every element of a permuted array.
fn for_each_permuted(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let total = numel(&out_shape);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for out in 0..total {
        f(out, src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += mapped[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= mapped[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn im2col<F: Float>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let hw = ho * wo;
    for c in 0..g.in_ch {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            x[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            F::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Float>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let hw = ho * wo;
    for c in 0..g.in_ch {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dx[(c * g.height + iy as usize) * g.width + ix as usize] +=
                                src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded ops in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    /// Scalar value of a one-element variable.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            value: t.into_data(),
            shape,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    fn push(&mut self, value: Vec<F>, shape: Vec<usize>, op: Op<F>) -> Result<Var> {
        debug_assert_eq!(value.len(), numel(&shape));
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric { op: op.name() });
        }
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[..., k] · b[k, n]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || last_dim(sa) != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(sa) / k;
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut c = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut c, false);
        self.push(c, out_shape, Op::MatMul { a, b, m, k, n })
    }

    /// Batched product over the leading dim: `a[B, m, k] · b[B, k, n]`,
    /// or `a · bᵀ` with `b[B, n, k]` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let mut c = vec![F::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            F::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut c[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push(
            c,
            vec![batch, m, n],
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        )
    }

    /// `a + b` where `b`'s shape equals a suffix of `a`'s shape (broadcast over
    /// the leading dims).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", sa, sb));
        }
        let bv = self.value(b);
        let out: Vec<F> = self
            .value(a)
            .iter()
            .zip(bv.iter().cycle())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = sa.to_vec();
        self.push(out, shape, Op::Add { a, b })
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let factor = F::of(factor);
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale { a, factor })
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = last_dim(&shape);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            let inv = F::one() / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        self.push(out, shape, Op::Softmax { a })
    }

    /// Normalizes each vector along the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let e = last_dim(&shape);
        if self.shape(gamma) != [e] || self.shape(beta) != [e] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let eps = F::of(eps);
        let inv_e = F::one() / F::of(e as f64);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = numel(&shape) / e;
        let mut out = vec![F::zero(); rows * e];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for (src, dst) in self.value(x).chunks(e).zip(out.chunks_mut(e)) {
            let mu = src.iter().copied().sum::<F>() * inv_e;
            let var = src.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_e;
            let r = F::one() / (var + eps).sqrt();
            for j in 0..e {
                dst[j] = (src[j] - mu) * r * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(r);
        }
        self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * gelu_gate(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Gelu { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(F::zero())).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Relu { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Log { a })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("permute: {perm:?} is not a permutation of rank {}", shape.len())));
        }
        let src = self.value(a);
        let mut out = vec![F::zero(); src.len()];
        for_each_permuted(&shape, perm, |o, i| out[o] = src[i]);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.push(
            out,
            out_shape,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        self.push(out, shape.to_vec(), Op::Reshape { a })
    }

    /// Repeats `a` over new leading dims; `a`'s shape must be a suffix of `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() > shape.len() || shape[shape.len() - sa.len()..] != *sa {
            return Err(shape_err("broadcast_to", sa, shape));
        }
        let src = self.value(a);
        let out = src.iter().copied().cycle().take(numel(shape)).collect();
        self.push(out, shape.to_vec(), Op::BroadcastTo { a })
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            out,
            shape,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{} along axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(out, out_shape, Op::Slice { a, axis, start })
    }

    /// Square-kernel convolution: `x[B,C,H,W]`, `w[O,C,k,k]`, `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if self.shape(b) != [sw[0]] {
            return Err(shape_err("conv2d bias", &sw, self.shape(b)));
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[2] {
            return Err(Error::Shape(format!("conv2d: kernel {} too large for input {sx:?}", sw[2])));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            out_ch: sw[0],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
            stride,
            pad,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let hw = ho * wo;
        let rows = geom.col_rows();
        let in_len = geom.in_ch * geom.height * geom.width;
        let mut cols = vec![F::zero(); geom.batch * rows * hw];
        let mut out = vec![F::zero(); geom.batch * geom.out_ch * hw];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        for i in 0..geom.batch {
            let col = &mut cols[i * rows * hw..(i + 1) * rows * hw];
            im2col(&xv[i * in_len..(i + 1) * in_len], &geom, col);
            let dst = &mut out[i * geom.out_ch * hw..(i + 1) * geom.out_ch * hw];
            for (o, chunk) in dst.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[o]);
            }
            F::gemm(geom.out_ch, rows, hw, wv, false, col, false, dst, true);
        }
        self.push(
            out,
            vec![geom.batch, geom.out_ch, ho, wo],
            Op::Conv2d { x, w, b, geom, cols },
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![s], vec![1], Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over every axis but the last: `[..., C] -> [C]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let c = last_dim(self.shape(a));
        let mut out = vec![F::zero(); c];
        for row in self.value(a).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        self.push(out, vec![c], Op::SumRows { a })
    }

    /// `x / (‖x‖ + eps)` along the last axis.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = last_dim(&shape);
        let eps = F::of(eps);
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(out.len() / c);
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            let inv = F::one() / (n + eps);
            row.iter_mut().for_each(|v| *v *= inv);
            norms.push(n);
        }
        self.push(out, shape, Op::NormalizeRows { a, norms, eps })
    }

    /// Row-wise `log Σ_{j: mask[r,j]} exp(a[r,j])` over a 2-D input.
    pub fn masked_logsumexp(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || mask.len() != numel(&shape) {
            return Err(Error::Shape(format!("masked_logsumexp: mask does not cover {shape:?}")));
        }
        let c = shape[1];
        let mut out = Vec::with_capacity(shape[0]);
        for (row, m) in self.value(a).chunks(c).zip(mask.chunks(c)) {
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .fold(F::neg_infinity(), |acc, (&v, _)| acc.max(v));
            if mx == F::neg_infinity() {
                return Err(Error::Contract("masked_logsumexp: a row has no selected entries".into()));
            }
            let s: F = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| (v - mx).exp())
                .sum();
            out.push(mx + s.ln());
        }
        self.push(out, vec![shape[0]], Op::MaskedLogSumExp { a, mask })
    }

    /// Picks `a[r, index[r]]` from a 2-D input.
    pub fn gather(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || index.len() != shape[0] || index.iter().any(|&i| i >= shape[1]) {
            return Err(Error::Shape(format!("gather: bad index for {shape:?}")));
        }
        let src = self.value(a);
        let out = index
            .iter()
            .enumerate()
            .map(|(r, &j)| src[r * shape[1] + j])
            .collect();
        self.push(out, vec![shape[0]], Op::Gather { a, index })
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            for input in node.op.inputs() {
                if let Some(buf) = &grads[input.0] {
                    if !buf.iter().all(|v| v.is_finite()) {
                        return Err(Error::Numeric { op: node.op.name() });
                    }
                }
            }
        }
        // Only leaves keep their gradients.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                *slot = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        let len = |v: &Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(a) {
                    let bv = self.value(*b);
                    accumulate(&mut grads[a.0], m * k, |da| {
                        F::gemm(m, n, k, g, false, bv, true, da, true)
                    });
                }
                if wants(b) {
                    let av = self.value(*a);
                    accumulate(&mut grads[b.0], k * n, |db| {
                        F::gemm(k, m, n, av, true, g, false, db, true)
                    });
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(a) {
                    accumulate(&mut grads[a.0], batch * m * k, |da| {
                        for t in 0..*batch {
                            let gs = &g[t * m * n..(t + 1) * m * n];
                            let bs = &bv[t * k * n..(t + 1) * k * n];
                            // da = g · bᵀ, or g · b when b is stored [n, k]
                            F::gemm(m, n, k, gs, false, bs, !*trans_b, &mut da[t * m * k..(t + 1) * m * k], true);
                        }
                    });
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], batch * k * n, |db| {
                        for t in 0..*batch {
                            let gs = &g[t * m * n..(t + 1) * m * n];
                            let as_ = &av[t * m * k..(t + 1) * m * k];
                            let dst = &mut db[t * k * n..(t + 1) * k * n];
                            if *trans_b {
                                F::gemm(n, m, k, gs, true, as_, false, dst, true);
                            } else {
                                F::gemm(k, m, n, as_, true, gs, false, dst, true);
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.len(), |da| {
                        da.iter_mut().zip(g).for_each(|(d, &v)| *d += v)
                    });
                }
                if wants(b) {
                    let nb = len(b);
                    accumulate(&mut grads[b.0], nb, |db| {
                        for chunk in g.chunks(nb) {
                            db.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.len(), |da| {
                        da.iter_mut().zip(g).for_each(|(d, &v)| *d += v)
                    });
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.len(), |db| {
                        db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v)
                    });
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(a) {
                    accumulate(&mut grads[a.0], g.len(), |da| {
                        for j in 0..g.len() {
                            da[j] += g[j] * bv[j];
                        }
                    });
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.len(), |db| {
                        for j in 0..g.len() {
                            db[j] += g[j] * av[j];
                        }
                    });
                }
            }
            Op::Scale { a, factor } => {
                accumulate(&mut grads[a.0], g.len(), |da| {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *factor)
                });
            }
            Op::Softmax { a } => {
                let y = &node.value;
                let c = last_dim(&node.shape);
                accumulate(&mut grads[a.0], g.len(), |da| {
                    for ((dr, yr), gr) in da.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let e = last_dim(&node.shape);
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let inv_e = F::one() / F::of(e as f64);
                if wants(gamma) || wants(beta) {
                    let mut dg = vec![F::zero(); e];
                    let mut db = vec![F::zero(); e];
                    for (r, (xr, gr)) in xv.chunks(e).zip(g.chunks(e)).enumerate() {
                        for j in 0..e {
                            let xhat = (xr[j] - mean[r]) * rstd[r];
                            dg[j] += gr[j] * xhat;
                            db[j] += gr[j];
                        }
                    }
                    if wants(gamma) {
                        accumulate(&mut grads[gamma.0], e, |d| {
                            d.iter_mut().zip(&dg).for_each(|(o, &v)| *o += v)
                        });
                    }
                    if wants(beta) {
                        accumulate(&mut grads[beta.0], e, |d| {
                            d.iter_mut().zip(&db).for_each(|(o, &v)| *o += v)
                        });
                    }
                }
                if wants(x) {
                    accumulate(&mut grads[x.0], g.len(), |dx| {
                        let mut dxhat = vec![F::zero(); e];
                        for (r, ((dr, xr), gr)) in dx
                            .chunks_mut(e)
                            .zip(xv.chunks(e))
                            .zip(g.chunks(e))
                            .enumerate()
                        {
                            let mut s1 = F::zero();
                            let mut s2 = F::zero();
                            for j in 0..e {
                                dxhat[j] = gr[j] * gv[j];
                                let xhat = (xr[j] - mean[r]) * rstd[r];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * xhat;
                            }
                            let (m1, m2) = (s1 * inv_e, s2 * inv_e);
                            for j in 0..e {
                                let xhat = (xr[j] - mean[r]) * rstd[r];
                                dr[j] += rstd[r] * (dxhat[j] - m1 - xhat * m2);
                            }
                        }
                    });
                }
            }
            Op::Gelu { a } => {
                let xv = self.value(*a);
                let (c, k) = (F::of(GELU_C), F::of(GELU_A));
                let (two, three) = (F::of(2.0), F::of(3.0));
                accumulate(&mut grads[a.0], g.len(), |da| {
                    for j in 0..g.len() {
                        let x = xv[j];
                        let s = gelu_gate(x);
                        // d/dx of x·σ(2u) with u' = c·(1 + 3k·x²)
                        let du = c * (F::one() + three * k * x * x);
                        da[j] += g[j] * (s + x * two * s * (F::one() - s) * du);
                    }
                });
            }
            Op::Relu { a } => {
                let xv = self.value(*a);
                accumulate(&mut grads[a.0], g.len(), |da| {
                    for j in 0..g.len() {
                        if xv[j] > F::zero() {
                            da[j] += g[j];
                        }
                    }
                });
            }
            Op::Exp { a } => {
                let y = &node.value;
                accumulate(&mut grads[a.0], g.len(), |da| {
                    for j in 0..g.len() {
                        da[j] += g[j] * y[j];
                    }
                });
            }
            Op::Log { a } => {
                let xv = self.value(*a);
                accumulate(&mut grads[a.0], g.len(), |da| {
                    for j in 0..g.len() {
                        da[j] += g[j] / xv[j];
                    }
                });
            }
            Op::Permute { a, perm } => {
                let in_shape = self.shape(*a);
                accumulate(&mut grads[a.0], g.len(), |da| {
                    for_each_permuted(in_shape, perm, |o, i| da[i] += g[o]);
                });
            }
            Op::Reshape { a } => {
                accumulate(&mut grads[a.0], g.len(), |da| {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v)
                });
            }
            Op::BroadcastTo { a } => {
                let na = len(a);
                accumulate(&mut grads[a.0], na, |da| {
                    for chunk in g.chunks(na) {
                        da.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let plen = self.shape(*p)[*axis] * inner;
                    if wants(p) {
                        accumulate(&mut grads[p.0], outer * plen, |dp| {
                            for o in 0..outer {
                                let src = &g[o * row + offset..o * row + offset + plen];
                                dp[o * plen..(o + 1) * plen]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, &v)| *d += v);
                            }
                        });
                    }
                    offset += plen;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.shape(*a);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let l = node.shape[*axis] * inner;
                let full = in_shape[*axis] * inner;
                accumulate(&mut grads[a.0], outer * full, |da| {
                    for o in 0..outer {
                        let base = o * full + start * inner;
                        da[base..base + l]
                            .iter_mut()
                            .zip(&g[o * l..(o + 1) * l])
                            .for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let hw = geom.out_height() * geom.out_width();
                let rows = geom.col_rows();
                let per_out = geom.out_ch * hw;
                if wants(w) {
                    accumulate(&mut grads[w.0], geom.out_ch * rows, |dw| {
                        for i in 0..geom.batch {
                            F::gemm(
                                geom.out_ch,
                                hw,
                                rows,
                                &g[i * per_out..(i + 1) * per_out],
                                false,
                                &cols[i * rows * hw..(i + 1) * rows * hw],
                                true,
                                dw,
                                true,
                            );
                        }
                    });
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], geom.out_ch, |db| {
                        for gi in g.chunks(per_out) {
                            for (o, chunk) in gi.chunks(hw).enumerate() {
                                db[o] += chunk.iter().copied().sum::<F>();
                            }
                        }
                    });
                }
                if wants(x) {
                    let wv = self.value(*w);
                    let in_len = geom.in_ch * geom.height * geom.width;
                    let mut dcol = vec![F::zero(); rows * hw];
                    accumulate(&mut grads[x.0], geom.batch * in_len, |dx| {
                        for i in 0..geom.batch {
                            F::gemm(
                                rows,
                                geom.out_ch,
                                hw,
                                wv,
                                true,
                                &g[i * per_out..(i + 1) * per_out],
                                false,
                                &mut dcol,
                                false,
                            );
                            col2im(&dcol, geom, &mut dx[i * in_len..(i + 1) * in_len]);
                        }
                    });
                }
            }
            Op::SumAll { a } => {
                accumulate(&mut grads[a.0], len(a), |da| {
                    da.iter_mut().for_each(|d| *d += g[0])
                });
            }
            Op::SumRows { a } => {
                let c = g.len();
                accumulate(&mut grads[a.0], len(a), |da| {
                    for chunk in da.chunks_mut(c) {
                        chunk.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::NormalizeRows { a, norms, eps } => {
                let c = last_dim(&node.shape);
                let xv = self.value(*a);
                accumulate(&mut grads[a.0], g.len(), |da| {
                    for (r, ((dr, xr), gr)) in da
                        .chunks_mut(c)
                        .zip(xv.chunks(c))
                        .zip(g.chunks(c))
                        .enumerate()
                    {
                        let n = norms[r];
                        let denom = n + *eps;
                        let dot: F = xr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        let coef = if n > F::zero() {
                            dot / (denom * denom * n)
                        } else {
                            F::zero()
                        };
                        for j in 0..c {
                            dr[j] += gr[j] / denom - xr[j] * coef;
                        }
                    }
                });
            }
            Op::MaskedLogSumExp { a, mask } => {
                let c = self.shape(*a)[1];
                let xv = self.value(*a);
                let lse = &node.value;
                accumulate(&mut grads[a.0], xv.len(), |da| {
                    for r in 0..lse.len() {
                        for j in 0..c {
                            let k = r * c + j;
                            if mask[k] {
                                da[k] += g[r] * (xv[k] - lse[r]).exp();
                            }
                        }
                    }
                });
            }
            Op::Gather { a, index } => {
                let c = self.shape(*a)[1];
                accumulate(&mut grads[a.0], len(a), |da| {
                    for (r, &j) in index.iter().enumerate() {
                        da[r * c + j] += g[r];
                    }
                });
            }
        }
    }
}
