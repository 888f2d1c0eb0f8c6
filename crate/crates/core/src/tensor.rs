//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! A [`Tape`] owns every value computed during one forward pass. Operations
//! append nodes and hand back [`Var`] handles; [`Tape::backward`] walks the
//! nodes in reverse and consumes the tape. The tape is rebuilt for every
//! training step, so there is no persistent graph to manage.
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`Error::Numeric`] instead of letting a diverging run continue silently.

use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        let (r, c) = a.dim();
        Tensor {
            shape: vec![r, c],
            data: a.iter().copied().collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        let (r, c) = as_matrix(&self.shape)?;
        Ok(Array2::from_shape_vec((r, c), self.data.clone()).expect("shape checked"))
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }
}

fn as_matrix(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape(format!(
            "expected a matrix, got shape {shape:?}"
        ))),
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation kinds, used for fault injection in gradient-check tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    BroadcastAdd,
    Sigmoid,
    Tanh,
    Relu,
    Silu,
    Concat,
    Slice,
    Scale,
    ScaleRows,
    GatherRows,
    Sum,
    Mean,
    MseLoss,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastAdd(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Silu(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Scale(Var, f64),
    ScaleRows(Var, Arc<[f64]>),
    GatherRows(Var, Arc<[usize]>),
    Sum(Var),
    Mean(Var),
    MseLoss(Var, Var),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::BroadcastAdd(..) => OpKind::BroadcastAdd,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Silu(_) => OpKind::Silu,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Scale(..) => OpKind::Scale,
            Op::ScaleRows(..) => OpKind::ScaleRows,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MseLoss(..) => OpKind::MseLoss,
        })
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(OpKind, f64)>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// `C (+)= op(A) · op(B)` on row-major slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // a is stored m×k (or k×m when transposed), b is k×n (or n×k).
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths match the m/k/n extents and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to the kept
    /// nodes stay valid, so constants bound once can be reused across many
    /// inference passes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Scales the input gradients of every `kind` node by `factor` during
    /// backward. Only meant for negative-control tests of gradient checks.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_array2(&self, v: Var) -> Result<Array2<f64>> {
        let (r, c) = as_matrix(self.shape(v))?;
        Ok(Array2::from_shape_vec((r, c), self.value(v).to_vec()).expect("shape checked"))
    }

    /// The scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if let Some(pos) = value.iter().position(|x| !x.is_finite()) {
            let what = match op.kind() {
                Some(k) => format!("{k:?}"),
                None => "input".to_string(),
            };
            return Err(Error::Numeric(format!(
                "non-finite value {} at index {pos} of {what} output with shape {shape:?}",
                value[pos]
            )));
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Places a tensor on the tape, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn constant_array(&mut self, a: &Array2<f64>) -> Result<Var> {
        let t = Tensor::from_array2(a);
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.shape(a))?;
        let (k2, n) = as_matrix(self.shape(b))?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: [{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push(vec![m, n], out, Op::MatMul(a, b), rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, "elementwise op")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a + b` where `b` repeats along the leading axes of `a`.
    ///
    /// `b`'s shape, with leading 1s stripped, must equal the trailing
    /// dimensions of `a`. A `[n, c]` matrix also broadcasts onto `[k·n, c]`,
    /// reading `a` as `[k, n, c]`.
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb: Vec<usize> = {
            let s = self.shape(b);
            let first = s.iter().position(|&d| d != 1).unwrap_or(s.len());
            s[first..].to_vec()
        };
        let row_blocks =
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1] && sa[0].is_multiple_of(sb[0]);
        let suffix = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..];
        if !(suffix || row_blocks) {
            return Err(Error::Shape(format!(
                "broadcast_add: {:?} cannot broadcast onto {sa:?}",
                self.shape(b)
            )));
        }
        let bv = self.value(b);
        let inner = bv.len();
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % inner])
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(sa, out, Op::BroadcastAdd(a, b), rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `x · σ(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    /// Multiplies row `r` of a matrix by `weights[r % weights.len()]`.
    ///
    /// With rows laid out as `batch × node`, a length-`N` weight vector acts
    /// as the same diagonal operator on every batch element.
    pub fn scale_rows(&mut self, a: Var, weights: Arc<[f64]>) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(a))?;
        let w = weights.len();
        if w == 0 || r % w != 0 {
            return Err(Error::Shape(format!(
                "scale_rows: {r} rows not a multiple of {w} weights"
            )));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for row in 0..r {
            let s = weights[row % w];
            out.extend(src[row * c..(row + 1) * c].iter().map(|&x| s * x));
        }
        let rg = self.rg(&[a]);
        self.push(vec![r, c], out, Op::ScaleRows(a, weights), rg)
    }

    /// Output row `i` is input row `index[i]`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(a))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!(
                "gather_rows: index {bad} >= {r} rows"
            )));
        }
        if index.is_empty() {
            return Err(Error::Shape("gather_rows: empty index".into()));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        self.push(vec![index.len(), c], out, Op::GatherRows(a, index), rg)
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Shape(format!(
                "concat: {} parts along axis {axis}",
                parts.len()
            )));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| as_matrix(self.shape(p)))
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let out_shape = if axis == 0 {
            if dims.iter().any(|d| d.1 != c0) {
                return Err(Error::Shape(format!("concat rows: column counts {dims:?}")));
            }
            vec![dims.iter().map(|d| d.0).sum(), c0]
        } else {
            if dims.iter().any(|d| d.0 != r0) {
                return Err(Error::Shape(format!("concat cols: row counts {dims:?}")));
            }
            vec![r0, dims.iter().map(|d| d.1).sum()]
        };
        let mut out = Vec::with_capacity(out_shape[0] * out_shape[1]);
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
        } else {
            for row in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(p)[row * c..(row + 1) * c]);
                }
            }
        }
        let rg = self.rg(parts);
        self.push(
            out_shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Half-open range `start..end` of a matrix along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(a))?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start >= end || end > extent {
            return Err(Error::Shape(format!(
                "slice {start}..{end} on axis {axis} of [{r}, {c}]"
            )));
        }
        let src = self.value(a);
        let (shape, out) = if axis == 0 {
            (vec![end - start, c], src[start * c..end * c].to_vec())
        } else {
            let mut out = Vec::with_capacity(r * (end - start));
            for row in 0..r {
                out.extend_from_slice(&src[row * c + start..row * c + end]);
            }
            (vec![r, end - start], out)
        };
        let rg = self.rg(&[a]);
        self.push(
            shape,
            out,
            Op::Slice {
                src: a,
                axis,
                start,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Mean(a), rg)
    }

    /// Mean of squared differences.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse_loss")?;
        let p = self.value(pred);
        let t = self.value(target);
        let s = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(&[pred, target]);
        self.push(Vec::new(), vec![s], Op::MseLoss(pred, target), rg)
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::Usage("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let factor = match (self.fault, node.op.kind()) {
                (Some((kind, f)), Some(k)) if kind == k => f,
                _ => 1.0,
            };
            let mut contrib: Vec<(Var, Vec<f64>)> = Vec::new();
            self.rule(node, &g, &mut contrib);
            for (v, mut d) in contrib {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if factor != 1.0 {
                    d.iter_mut().for_each(|x| *x *= factor);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node.
    fn rule(&self, node: &Node, g: &[f64], out: &mut Vec<(Var, Vec<f64>)>) {
        let val = |v: Var| self.value(v);
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(*b), true, &mut ga, false);
                    out.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), true, g, false, &mut gb, false);
                    out.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect()));
                }
                if wants(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect()));
                }
            }
            Op::BroadcastAdd(a, b) => {
                out.push((*a, g.to_vec()));
                if wants(*b) {
                    let inner = val(*b).len();
                    let mut gb = vec![0.0; inner];
                    for (i, x) in g.iter().enumerate() {
                        gb[i % inner] += x;
                    }
                    out.push((*b, gb));
                }
            }
            Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(&node.value)
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                out.push((*a, d));
            }
            Op::Tanh(a) => {
                let d = g
                    .iter()
                    .zip(&node.value)
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect();
                out.push((*a, d));
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                out.push((*a, d));
            }
            Op::Silu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                out.push((*a, d));
            }
            Op::Concat { parts, axis } => {
                let cols = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = (self.shape(p)[0], self.shape(p)[1]);
                    if wants(p) {
                        let d = if *axis == 0 {
                            g[offset * cols..(offset + r) * cols].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(r * c);
                            for row in 0..r {
                                d.extend_from_slice(
                                    &g[row * cols + offset..row * cols + offset + c],
                                );
                            }
                            d
                        };
                        out.push((p, d));
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { src, axis, start } => {
                let (r, c) = (self.shape(*src)[0], self.shape(*src)[1]);
                let mut d = vec![0.0; r * c];
                if *axis == 0 {
                    d[start * c..start * c + g.len()].copy_from_slice(g);
                } else {
                    let w = node.shape[1];
                    for row in 0..r {
                        d[row * c + start..row * c + start + w]
                            .copy_from_slice(&g[row * w..(row + 1) * w]);
                    }
                }
                out.push((*src, d));
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|x| c * x).collect())),
            Op::ScaleRows(a, w) => {
                let c = node.shape[1];
                let mut d = Vec::with_capacity(g.len());
                for (row, chunk) in g.chunks(c).enumerate() {
                    let s = w[row % w.len()];
                    d.extend(chunk.iter().map(|x| s * x));
                }
                out.push((*a, d));
            }
            Op::GatherRows(a, index) => {
                let c = node.shape[1];
                let mut d = vec![0.0; val(*a).len()];
                for (i, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        d[src * c + j] += g[i * c + j];
                    }
                }
                out.push((*a, d));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; val(*a).len()])),
            Op::Mean(a) => {
                let n = val(*a).len();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::MseLoss(p, t) => {
                let n = val(*p).len() as f64;
                let d: Vec<f64> = val(*p)
                    .iter()
                    .zip(val(*t))
                    .map(|(a, b)| 2.0 * g[0] * (a - b) / n)
                    .collect();
                if wants(*t) {
                    out.push((*t, d.iter().map(|x| -x).collect()));
                }
                out.push((*p, d));
            }
        }
    }
}
