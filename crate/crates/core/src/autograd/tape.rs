use super::linalg::{gemm, transpose};
use super::tensor::{numel, Real, Tensor};
use crate::error::{MglError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Primitive kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Reshape,
    Binary,
    Unary,
    Scale,
    ScalarMul,
    Softmax,
    Reduce,
    Concat,
    Conv2d,
    Resize,
    GatherRows,
    NormalizeRows,
    Bce,
}

/// Deliberate corruption of one primitive's backward pass. Only used to
/// prove the gradient checker catches broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardFault {
    pub op: OpKind,
    pub factor: f64,
}

/// Counters for silent numeric interventions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Numerics {
    pub clamped_divisions: usize,
}

/// Decomposition of a shape around one axis: `outer × len × inner`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    fn collapse(&self, r: usize) -> usize {
        let o = r / (self.len * self.inner);
        let i = r % self.inner;
        o * self.inner + i
    }
}

/// Broadcast of a singleton axis of one operand against the other.
#[derive(Clone, Copy, Debug)]
struct Broadcast {
    split: AxisSplit,
    a_small: bool,
    b_small: bool,
}

impl Broadcast {
    #[inline]
    fn ia(&self, r: usize) -> usize {
        if self.a_small {
            self.split.collapse(r)
        } else {
            r
        }
    }

    #[inline]
    fn ib(&self, r: usize) -> usize {
        if self.b_small {
            self.split.collapse(r)
        } else {
            r
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// One bilinear tap per output coordinate along an axis.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    w0: T,
    w1: T,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Reshape {
        a: Var,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Option<Broadcast>,
        divisor: Option<Vec<Option<T>>>,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    ScalarMul {
        s: Var,
        a: Var,
    },
    Softmax {
        a: Var,
        split: AxisSplit,
    },
    Reduce {
        kind: ReduceKind,
        a: Var,
        split: AxisSplit,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Resize {
        a: Var,
        channels: usize,
        in_w: usize,
        ys: Vec<Tap<T>>,
        xs: Vec<Tap<T>>,
        in_len: usize,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
        cols: usize,
    },
    NormalizeRows {
        a: Var,
        norms: Vec<T>,
        cols: usize,
    },
    Bce {
        p: Var,
        target: Vec<T>,
        eps: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Binary { .. } => OpKind::Binary,
            Op::Unary { .. } => OpKind::Unary,
            Op::Scale { .. } => OpKind::Scale,
            Op::ScalarMul { .. } => OpKind::ScalarMul,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Reduce { .. } => OpKind::Reduce,
            Op::Concat { .. } => OpKind::Concat,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Resize { .. } => OpKind::Resize,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
            Op::Bce { .. } => OpKind::Bce,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], addressable by the leaf `Var`s
/// that were recorded with `requires_grad`.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    numerics: Numerics,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn numerics(&self) -> Numerics {
        self.numerics
    }
}

/// Append-only record of executed primitives. Nodes are pushed in execution
/// order, so the node list is already topologically sorted.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    numerics: Numerics,
    fault: Option<BackwardFault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> MglError {
    MglError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            numerics: Numerics::default(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn numerics(&self) -> Numerics {
        self.numerics
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Record an input. `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            ta,
            tb,
            m,
            ka,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k: ka,
                n,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(MglError::shape(format!("transpose needs a matrix, got {s:?}")));
        }
        let out = transpose(self.value(a).data(), s[0], s[1]);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&[s[1], s[0]], out)?,
            Op::Transpose {
                a,
                rows: s[0],
                cols: s[1],
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    // ---- elementwise -------------------------------------------------------

    fn broadcast_plan(&self, op: &str, a: Var, b: Var) -> Result<(Vec<usize>, Option<Broadcast>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((sa.to_vec(), None));
        }
        if sa.len() != sb.len() {
            return Err(shape_err(op, sa, sb));
        }
        let diff: Vec<usize> = (0..sa.len()).filter(|&i| sa[i] != sb[i]).collect();
        if diff.len() != 1 {
            return Err(shape_err(op, sa, sb));
        }
        let axis = diff[0];
        let (a_small, b_small) = (sa[axis] == 1, sb[axis] == 1);
        if !a_small && !b_small {
            return Err(shape_err(op, sa, sb));
        }
        let full = if a_small { sb.to_vec() } else { sa.to_vec() };
        Ok((
            full.clone(),
            Some(Broadcast {
                split: AxisSplit::new(&full, axis),
                a_small,
                b_small,
            }),
        ))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (shape, bcast) = self.broadcast_plan(name, a, b)?;
        let n = numel(&shape);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let ia = |r: usize| bcast.map_or(r, |bc| bc.ia(r));
        let ib = |r: usize| bcast.map_or(r, |bc| bc.ib(r));
        let mut out = Vec::with_capacity(n);
        let mut divisor = None;
        match kind {
            BinaryKind::Add => out.extend((0..n).map(|r| xa[ia(r)] + xb[ib(r)])),
            BinaryKind::Sub => out.extend((0..n).map(|r| xa[ia(r)] - xb[ib(r)])),
            BinaryKind::Mul => out.extend((0..n).map(|r| xa[ia(r)] * xb[ib(r)])),
            BinaryKind::Div => {
                // Divisors below machine epsilon are clamped to ±eps; the
                // clamped value is kept so backward treats it as constant.
                let eps = T::epsilon();
                let mut clamps = 0;
                let adjusted: Vec<Option<T>> = xb
                    .iter()
                    .map(|&v| {
                        if v.abs() < eps {
                            clamps += 1;
                            Some(if v < T::zero() { -eps } else { eps })
                        } else {
                            None
                        }
                    })
                    .collect();
                out.extend((0..n).map(|r| {
                    let j = ib(r);
                    xa[ia(r)] / adjusted[j].unwrap_or(xb[j])
                }));
                self.numerics.clamped_divisions += clamps;
                divisor = Some(adjusted);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Binary {
                kind,
                a,
                b,
                bcast,
                divisor,
            },
            rg,
        ))
    }

    /// Elementwise sum. Shapes must match, or differ in exactly one axis
    /// where one operand has size 1 (e.g. a per-row or per-channel vector).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f: fn(T) -> T = match kind {
            UnaryKind::Relu => |x| if x > T::zero() || x.is_nan() { x } else { T::zero() },
            UnaryKind::Sigmoid => |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            UnaryKind::Exp => |x| x.exp(),
            UnaryKind::Neg => |x| -x,
        };
        let v = self.value(a);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Unary { kind, a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.value(a);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, c }, rg)
    }

    /// Multiply every element of `a` by the single value held in `s`.
    pub fn scalar_mul(&mut self, s: Var, a: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(MglError::shape(format!(
                "scalar_mul needs a one-element scale, got {:?}",
                self.shape(s)
            )));
        }
        let c = self.value(s).data()[0];
        let v = self.value(a);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&x| x * c).collect())?;
        let rg = self.rg(&[s, a]);
        Ok(self.push(out, Op::ScalarMul { s, a }, rg))
    }

    // ---- normalisation and reductions -------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(MglError::shape(format!("softmax axis {axis} of {shape:?}")));
        }
        let sp = AxisSplit::new(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..sp.outer {
            for i in 0..sp.inner {
                let idx = |j: usize| (o * sp.len + j) * sp.inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..sp.len {
                    mx = mx.max(x[idx(j)]);
                }
                let mut total = T::zero();
                for j in 0..sp.len {
                    let e = (x[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..sp.len {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a, split: sp }, rg))
    }

    /// Reduction along `axis` (kept with size 1), or over everything into a
    /// one-element tensor when `axis` is `None`.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (sp, out_shape) = match axis {
            None => (
                AxisSplit {
                    outer: 1,
                    len: numel(&shape),
                    inner: 1,
                },
                vec![1],
            ),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(MglError::shape(format!("reduce axis {ax} of {shape:?}")));
                }
                let mut s = shape.clone();
                s[ax] = 1;
                (AxisSplit::new(&shape, ax), s)
            }
        };
        if sp.len == 0 {
            return Err(MglError::shape(format!("reduce over empty axis of {shape:?}")));
        }
        let x = self.value(a).data();
        let mut out = vec![T::zero(); sp.outer * sp.inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; out.len()];
        }
        let inv = T::one() / T::of(sp.len as f64);
        for o in 0..sp.outer {
            for i in 0..sp.inner {
                let r = o * sp.inner + i;
                let idx = |j: usize| (o * sp.len + j) * sp.inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut s = T::zero();
                        for j in 0..sp.len {
                            s += x[idx(j)];
                        }
                        out[r] = if kind == ReduceKind::Mean { s * inv } else { s };
                    }
                    ReduceKind::Max => {
                        // strict comparison keeps the first argmax on ties
                        let mut best = 0;
                        for j in 1..sp.len {
                            if x[idx(j)] > x[idx(best)] {
                                best = j;
                            }
                        }
                        out[r] = x[idx(best)];
                        argmax[r] = idx(best);
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Reduce {
                kind,
                a,
                split: sp,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axis)
    }

    pub fn max(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Max, a, axis)
    }

    /// L2-normalise each row of a matrix. Rows with norm at or below `floor`
    /// become exactly zero and pass no gradient.
    pub fn normalize_rows(&mut self, a: Var, floor: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(MglError::shape(format!("normalize_rows needs a matrix, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let floor = T::of(floor);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); rows * cols];
        let mut norms = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if nrm > floor {
                norms[r] = nrm;
                for c in 0..cols {
                    out[r * cols + c] = row[c] / nrm;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&s, out)?, Op::NormalizeRows { a, norms, cols }, rg))
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| MglError::shape("concat of an empty list"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(MglError::shape(format!("concat axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && (0..s.len()).all(|i| i == axis || s[i] == base[i]);
            if !ok {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&out_shape));
        let parts: Vec<(Var, usize)> = xs.iter().map(|&v| (v, self.shape(v)[axis])).collect();
        for o in 0..outer {
            for &(v, len) in &parts {
                let block = len * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat {
                parts,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Select rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(MglError::shape(format!("gather_rows needs a matrix, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(MglError::shape(format!("gather_rows index {bad} out of {rows} rows")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&[idx.len(), cols], out)?,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
                cols,
            },
            rg,
        ))
    }

    // ---- image ops ---------------------------------------------------------

    /// 2-D cross-correlation of a `c_in×h×w` input with a
    /// `c_out×c_in×kh×kw` kernel, zero padding, optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] || stride == 0 {
            return Err(shape_err("conv2d", &sx, &sk));
        }
        let (c_in, h, w) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(MglError::shape(format!("conv2d kernel must be odd-sized, got {sk:?}")));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0
        {
            return Err(MglError::shape(format!(
                "conv2d output size not integral for input {sx:?}, kernel {sk:?}, stride {stride}, pad {pad}"
            )));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: (span_h - kh) / stride + 1,
            ow: (span_w - kw) / stride + 1,
        };
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return Err(shape_err("conv2d bias", &sk, self.shape(b)));
            }
        }
        let cols = im2col(self.value(x).data(), &geom);
        let p = geom.out_pixels();
        let mut out = vec![T::zero(); c_out * p];
        gemm(
            false,
            false,
            c_out,
            geom.patch(),
            p,
            self.value(kernel).data(),
            &cols,
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for co in 0..c_out {
                out[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv[co]);
            }
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::new(&[c_out, geom.oh, geom.ow], out)?,
            Op::Conv2d {
                x,
                w: kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Bilinear resampling of a `c×h×w` tensor (half-pixel centres, i.e.
    /// align-corners off).
    pub fn resize_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(MglError::shape(format!(
                "resize_bilinear of {s:?} to {out_h}×{out_w}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let ys = taps::<T>(h, out_h);
        let xs = taps::<T>(w, out_w);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            let src = &x[ch * h * w..(ch + 1) * h * w];
            for (oy, ty) in ys.iter().enumerate() {
                for (ox, tx) in xs.iter().enumerate() {
                    let v = ty.w0 * (tx.w0 * src[ty.i0 * w + tx.i0] + tx.w1 * src[ty.i0 * w + tx.i1])
                        + ty.w1 * (tx.w0 * src[ty.i1 * w + tx.i0] + tx.w1 * src[ty.i1 * w + tx.i1]);
                    out[(ch * out_h + oy) * out_w + ox] = v;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&[c, out_h, out_w], out)?,
            Op::Resize {
                a,
                channels: c,
                in_w: w,
                ys,
                xs,
                in_len: h * w,
            },
            rg,
        ))
    }

    // ---- losses ------------------------------------------------------------

    /// Mean binary cross-entropy of probabilities `p` against constant
    /// targets, with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        if self.value(p).len() != target.len() {
            return Err(shape_err("bce", self.shape(p), target.shape()));
        }
        let eps = T::of(eps);
        let hi = T::one() - eps;
        let pv = self.value(p).data();
        let mut total = 0.0f64;
        for (&x, &g) in pv.iter().zip(target.data()) {
            let xc = x.max(eps).min(hi);
            let l = -(g * xc.ln() + (T::one() - g) * (T::one() - xc).ln());
            total += l.as_f64();
        }
        let loss = T::of(total / pv.len() as f64);
        let rg = self.rg(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.data().to_vec(),
                eps,
            },
            rg,
        ))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(MglError::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            let g = match self.fault {
                Some(f) if f.op == node.op.kind() => {
                    let c = T::of(f.factor);
                    g.into_iter().map(|v| v * c).collect()
                }
                _ => g,
            };
            self.backprop(id, &g, &mut grads);
        }
        Ok(Gradients {
            grads: leaf_grads,
            numerics: self.numerics,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn backprop(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                // C = op(A)·op(B); dop(A) = G·op(B)ᵀ, dop(B) = op(A)ᵀ·G
                if let Some(ga) = self.slot(grads, a) {
                    if ta {
                        // A stored k×m: dA = op(B)·Gᵀ
                        gemm(tb, true, k, n, m, bv, g, ga, true);
                    } else {
                        gemm(false, !tb, m, n, k, g, bv, ga, true);
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    if tb {
                        // B stored n×k: dB = Gᵀ·op(A)
                        gemm(true, ta, n, m, k, g, av, gb, true);
                    } else {
                        gemm(!ta, false, k, m, n, av, g, gb, true);
                    }
                }
            }
            &Op::Transpose { a, rows, cols } => {
                if let Some(ga) = self.slot(grads, a) {
                    let gt = transpose(g, cols, rows);
                    ga.iter_mut().zip(gt).for_each(|(x, y)| *x += y);
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Binary {
                kind,
                a,
                b,
                bcast,
                divisor,
            } => {
                let (a, b, bcast) = (*a, *b, *bcast);
                let ia = |r: usize| bcast.map_or(r, |bc| bc.ia(r));
                let ib = |r: usize| bcast.map_or(r, |bc| bc.ib(r));
                let (xa, xb) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = self.slot(grads, a) {
                    for (r, &gr) in g.iter().enumerate() {
                        ga[ia(r)] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gr,
                            BinaryKind::Mul => gr * xb[ib(r)],
                            BinaryKind::Div => {
                                let j = ib(r);
                                let d = divisor.as_ref().and_then(|dv| dv[j]).unwrap_or(xb[j]);
                                gr / d
                            }
                        };
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (r, &gr) in g.iter().enumerate() {
                        let j = ib(r);
                        gb[j] += match kind {
                            BinaryKind::Add => gr,
                            BinaryKind::Sub => -gr,
                            BinaryKind::Mul => gr * xa[ia(r)],
                            BinaryKind::Div => match divisor.as_ref().and_then(|dv| dv[j]) {
                                Some(_) => T::zero(),
                                None => -gr * xa[ia(r)] / (xb[j] * xb[j]),
                            },
                        };
                    }
                }
            }
            &Op::Unary { kind, a } => {
                let x = self.value(a).data();
                if let Some(ga) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        ga[i] += match kind {
                            UnaryKind::Relu => {
                                if x[i] > T::zero() {
                                    g[i]
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Sigmoid => g[i] * out[i] * (T::one() - out[i]),
                            UnaryKind::Exp => g[i] * out[i],
                            UnaryKind::Neg => -g[i],
                        };
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c);
                }
            }
            &Op::ScalarMul { s, a } => {
                let c = self.value(s).data()[0];
                let av = self.value(a).data();
                if let Some(gs) = self.slot(grads, s) {
                    gs[0] += g.iter().zip(av).map(|(&gi, &ai)| gi * ai).sum::<T>();
                }
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c);
                }
            }
            &Op::Softmax { a, split: sp } => {
                if let Some(ga) = self.slot(grads, a) {
                    for o in 0..sp.outer {
                        for i in 0..sp.inner {
                            let idx = |j: usize| (o * sp.len + j) * sp.inner + i;
                            let dot: T = (0..sp.len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..sp.len {
                                ga[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Reduce {
                kind,
                a,
                split: sp,
                argmax,
            } => {
                let sp = *sp;
                if let Some(ga) = self.slot(grads, *a) {
                    let inv = T::one() / T::of(sp.len as f64);
                    for o in 0..sp.outer {
                        for i in 0..sp.inner {
                            let r = o * sp.inner + i;
                            match kind {
                                ReduceKind::Sum | ReduceKind::Mean => {
                                    let gv = if *kind == ReduceKind::Mean { g[r] * inv } else { g[r] };
                                    for j in 0..sp.len {
                                        ga[(o * sp.len + j) * sp.inner + i] += gv;
                                    }
                                }
                                ReduceKind::Max => ga[argmax[r]] += g[r],
                            }
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(v, len) in parts {
                    if let Some(gv) = self.slot(grads, v) {
                        let block = len * inner;
                        for o in 0..*outer {
                            let src = o * total * inner + offset * inner;
                            for t in 0..block {
                                gv[o * block + t] += g[src + t];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            } => {
                let p = geom.out_pixels();
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(false, true, geom.c_out, p, geom.patch(), g, cols, gw, true);
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.slot(grads, *b) {
                        for co in 0..geom.c_out {
                            gb[co] += g[co * p..(co + 1) * p].iter().copied().sum::<T>();
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![T::zero(); geom.patch() * p];
                    gemm(
                        true,
                        false,
                        geom.patch(),
                        geom.c_out,
                        p,
                        self.value(*w).data(),
                        g,
                        &mut dcols,
                        false,
                    );
                    if let Some(gx) = self.slot(grads, *x) {
                        col2im(&dcols, geom, gx);
                    }
                }
            }
            Op::Resize {
                a,
                channels,
                in_w,
                ys,
                xs,
                in_len,
            } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let (oh, ow) = (ys.len(), xs.len());
                    for ch in 0..*channels {
                        let dst = &mut ga[ch * in_len..(ch + 1) * in_len];
                        for (oy, ty) in ys.iter().enumerate() {
                            for (ox, tx) in xs.iter().enumerate() {
                                let gv = g[(ch * oh + oy) * ow + ox];
                                dst[ty.i0 * in_w + tx.i0] += gv * ty.w0 * tx.w0;
                                dst[ty.i0 * in_w + tx.i1] += gv * ty.w0 * tx.w1;
                                dst[ty.i1 * in_w + tx.i0] += gv * ty.w1 * tx.w0;
                                dst[ty.i1 * in_w + tx.i1] += gv * ty.w1 * tx.w1;
                            }
                        }
                    }
                }
            }
            Op::GatherRows {
                a,
                idx,
                cols,
            } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..*cols {
                            ga[i * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::NormalizeRows { a, norms, cols } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let cols = *cols;
                    for (r, &nrm) in norms.iter().enumerate() {
                        if nrm == T::zero() {
                            continue;
                        }
                        let y = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += (gr[c] - y[c] * dot) / nrm;
                        }
                    }
                }
            }
            Op::Bce { p, target, eps } => {
                let pv = self.value(*p).data();
                let (eps, hi) = (*eps, T::one() - *eps);
                let scale = g[0] / T::of(pv.len() as f64);
                if let Some(gp) = self.slot(grads, *p) {
                    for i in 0..pv.len() {
                        let x = pv[i];
                        if x > eps && x < hi {
                            let t = target[i];
                            gp[i] += scale * (-t / x + (T::one() - t) / (T::one() - x));
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_pixels();
    let mut cols = vec![T::zero(); g.patch() * p];
    for ci in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_pixels();
    for ci in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn taps<T: Real>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: T::of(1.0 - l),
                w1: T::of(l),
            }
        })
        .collect()
}
