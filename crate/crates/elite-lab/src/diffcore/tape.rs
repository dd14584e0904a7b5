//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records every operation as a node holding its result tensor
//! and the indices of its inputs. [`Tape::backward`] walks the node list in
//! reverse, accumulating vector-Jacobian products. Handles are plain
//! [`Var`] indices, so graphs are cheap to build and drop.
//!
//! Matrix semantics: tensors with more than two dimensions are treated as
//! `[d0, rest]` matrices by the row-wise ops (concat, slicing, row means),
//! which is exactly the layout the models need (`[tokens, channels]` and
//! `[channels, h*w]`).

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::diffcore::params::{ParamRef, ParamSet};
use crate::diffcore::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Geometry and cached column matrix for a 2-D convolution node.
#[derive(Debug)]
struct ConvInfo<S: Scalar> {
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    cin: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cols: Vec<S>,
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var, S),
    Neg(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat0(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    GatherElems { x: Var, ids: Vec<usize> },
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    Gelu(Var),
    Silu(Var),
    RowNorm { x: Var, cache: Vec<(S, S)> },
    MulRow { x: Var, row: Var },
    AddRow { x: Var, row: Var },
    MulCol { x: Var, col: Var },
    AddCol { x: Var, col: Var },
    SumAll(Var),
    MeanAll(Var),
    L1All(Var),
    MaxAll { x: Var, argmax: usize },
    MeanRows(Var),
    DivScalarVar { x: Var, s: Var },
    MulScalarVar { x: Var, s: Var },
    Conv2d(Box<ConvInfo<S>>),
    Upsample2x(Var),
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by leaf [`Var`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates gradients for every tracked parameter into the grad
    /// slots of `ps`, in parameter registration order.
    pub fn apply_to_params(&self, tape: &Tape<S>, ps: &mut ParamSet<S>) -> Result<()> {
        for (&idx, &var) in tape.param_vars.borrow().iter() {
            if let Some(g) = self.wrt(var) {
                ps.get_mut(ParamRef(idx)).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Recording tape for one forward/backward pass.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    param_vars: RefCell<BTreeMap<usize, Var>>,
    trainable: BTreeSet<usize>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    /// Tape where no registered parameter receives gradients.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(BTreeMap::new()),
            trainable: BTreeSet::new(),
        }
    }

    /// Tape where exactly the listed parameters receive gradients.
    pub fn with_trainable(refs: &[ParamRef]) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(BTreeMap::new()),
            trainable: refs.iter().map(|r| r.0).collect(),
        }
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Copies a constant tensor onto the tape.
    pub fn leaf(&self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies a tensor onto the tape and tracks its gradient.
    pub fn leaf_grad(&self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings a registered parameter onto the tape, caching the node so
    /// repeated lookups share one leaf. Gradient tracking follows the
    /// tape's trainable set.
    pub fn param(&self, ps: &ParamSet<S>, r: ParamRef) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&r.0) {
            return v;
        }
        let v = self.push(ps.get(r).clone(), Op::Leaf, self.trainable.contains(&r.0));
        self.param_vars.borrow_mut().insert(r.0, v);
        v
    }

    /// Clones the value held at `v`.
    pub fn value(&self, v: Var) -> Tensor<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Shape of the value held at `v`.
    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value held at `v`.
    pub fn item(&self, v: Var) -> Result<S> {
        self.nodes.borrow()[v.0].value.item()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Errors with a numeric failure if `v` holds any non-finite value.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if !self.nodes.borrow()[v.0].value.all_finite() {
            return Err(Error::Numeric(format!("{what} contains a non-finite value")));
        }
        Ok(())
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::Shape(format!("{name}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            for (o, &v) in out.data_mut().iter_mut().zip(nodes[b.0].value.data()) {
                *o += v;
            }
            out
        };
        Ok(self.push(value, Op::Add(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            for (o, &v) in out.data_mut().iter_mut().zip(nodes[b.0].value.data()) {
                *o -= v;
            }
            out
        };
        Ok(self.push(value, Op::Sub(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            for (o, &v) in out.data_mut().iter_mut().zip(nodes[b.0].value.data()) {
                *o *= v;
            }
            out
        };
        Ok(self.push(value, Op::Mul(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn scale(&self, a: Var, c: S) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v * c);
        self.push(value, Op::Scale(a, c), self.needs(a))
    }

    pub fn add_scalar(&self, a: Var, c: S) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v + c);
        self.push(value, Op::AddScalar(a, c), self.needs(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| -v);
        self.push(value, Op::Neg(a), self.needs(a))
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape().len() != 2 || tb.shape().len() != 2 {
                return Err(Error::Shape(format!(
                    "matmul needs 2-D operands, got {:?} and {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let (m, k) = (ta.dim(0), ta.dim(1));
            let (k2, n) = (tb.dim(0), tb.dim(1));
            if k != k2 {
                return Err(Error::Shape(format!(
                    "matmul inner dims differ: {:?} x {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let data = matmul_raw(ta.data(), tb.data(), m, k, n);
            Tensor::new(vec![m, n], data)?
        };
        Ok(self.push(value, Op::MatMul(a, b), self.needs(a) || self.needs(b)))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.shape().len() != 2 {
                return Err(Error::Shape(format!(
                    "transpose needs a 2-D tensor, got {:?}",
                    t.shape()
                )));
            }
            let (r, c) = (t.dim(0), t.dim(1));
            let mut data = vec![S::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = t.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], data)?
        };
        Ok(self.push(value, Op::Transpose(a), self.needs(a)))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), self.needs(a)))
    }

    /// Concatenates along the first dimension. Inputs must agree on their
    /// trailing dimensions.
    pub fn concat0(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat0 needs at least one input".into()));
        }
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            let tail: Vec<usize> = if first.shape().is_empty() {
                return Err(Error::Shape("concat0 cannot take 0-D inputs".into()));
            } else {
                first.shape()[1..].to_vec()
            };
            let tail_numel: usize = tail.iter().product();
            let mut rows = 0usize;
            let mut data = Vec::new();
            let mut ng = false;
            for &p in parts {
                let t = &nodes[p.0].value;
                if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                    return Err(Error::Shape(format!(
                        "concat0 tail mismatch: {:?} vs [_, {:?}]",
                        t.shape(),
                        tail
                    )));
                }
                rows += t.dim(0);
                data.extend_from_slice(t.data());
                ng |= nodes[p.0].needs_grad;
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(&tail);
            debug_assert_eq!(rows * tail_numel, data.len());
            (Tensor::new(shape, data)?, ng)
        };
        Ok(self.push(value, Op::Concat0(parts.to_vec()), ng))
    }

    /// Rows `start..start+len` along the first dimension.
    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().is_empty() || start + len > t.dim(0) {
                return Err(Error::Shape(format!(
                    "slice_rows {start}..{} out of bounds for {:?}",
                    start + len,
                    t.shape()
                )));
            }
            let row: usize = t.shape()[1..].iter().product();
            let mut shape = vec![len];
            shape.extend_from_slice(&t.shape()[1..]);
            Tensor::new(shape, t.data()[start * row..(start + len) * row].to_vec())?
        };
        Ok(self.push(value, Op::SliceRows { x, start }, self.needs(x)))
    }

    /// Looks up rows of a `[vocab, d]` table: output `[ids.len(), d]`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            if t.shape().len() != 2 {
                return Err(Error::Shape(format!(
                    "gather_rows needs a 2-D table, got {:?}",
                    t.shape()
                )));
            }
            let (v, d) = (t.dim(0), t.dim(1));
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(Error::Contract(format!("row id {id} out of table size {v}")));
                }
                data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
            }
            Tensor::new(vec![ids.len(), d], data)?
        };
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, self.needs(table)))
    }

    /// Picks one element per row: output `[rows]` with `out[i] = x[i, ids[i]]`.
    pub fn gather_elems(&self, x: Var, ids: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (r, c) = t.as_matrix_dims();
            if ids.len() != r {
                return Err(Error::Shape(format!(
                    "gather_elems needs one id per row: {} ids for {r} rows",
                    ids.len()
                )));
            }
            let mut data = Vec::with_capacity(r);
            for (i, &id) in ids.iter().enumerate() {
                if id >= c {
                    return Err(Error::Contract(format!("column id {id} out of width {c}")));
                }
                data.push(t.data()[i * c + id]);
            }
            Tensor::new(vec![r], data)?
        };
        Ok(self.push(value, Op::GatherElems { x, ids: ids.to_vec() }, self.needs(x)))
    }

    /// Softmax over the last dimension, rows treated independently.
    /// Errors with a numeric failure on non-finite input.
    pub fn softmax_lastdim(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().is_empty() {
                return Err(Error::Shape("softmax needs at least one dimension".into()));
            }
            if !t.all_finite() {
                return Err(Error::Numeric("softmax input contains a non-finite value".into()));
            }
            let c = *t.shape().last().unwrap();
            if c == 0 {
                return Err(Error::Shape("softmax over an empty last dimension".into()));
            }
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(c) {
                softmax_row_inplace(row);
            }
            out
        };
        Ok(self.push(value, Op::SoftmaxLast(x), self.needs(x)))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax_lastdim(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().is_empty() {
                return Err(Error::Shape("log_softmax needs at least one dimension".into()));
            }
            if !t.all_finite() {
                return Err(Error::Numeric(
                    "log_softmax input contains a non-finite value".into(),
                ));
            }
            let c = *t.shape().last().unwrap();
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(c) {
                let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
                let lse = row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln() + mx;
                for v in row.iter_mut() {
                    *v = *v - lse;
                }
            }
            out
        };
        Ok(self.push(value, Op::LogSoftmaxLast(x), self.needs(x)))
    }

    pub fn gelu(&self, x: Var) -> Var {
        let value = self.nodes.borrow()[x.0].value.map(gelu_fwd);
        self.push(value, Op::Gelu(x), self.needs(x))
    }

    pub fn silu(&self, x: Var) -> Var {
        let value = self.nodes.borrow()[x.0].value.map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x), self.needs(x))
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn row_norm(&self, x: Var, eps: S) -> Result<Var> {
        let (value, cache) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (r, c) = t.as_matrix_dims();
            if c == 0 {
                return Err(Error::Shape("row_norm over empty rows".into()));
            }
            let cn = S::from_f64(c as f64);
            let mut out = t.clone();
            let mut cache = Vec::with_capacity(r);
            for row in out.data_mut().chunks_mut(c) {
                let mean = row.iter().copied().sum::<S>() / cn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cn;
                let rstd = S::one() / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * rstd;
                }
                cache.push((mean, rstd));
            }
            (out, cache)
        };
        Ok(self.push(value, Op::RowNorm { x, cache }, self.needs(x)))
    }

    /// Multiplies every row of `x` elementwise by the vector `row`.
    pub fn mul_row(&self, x: Var, row: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (t, rv) = (&nodes[x.0].value, &nodes[row.0].value);
            let (_, c) = t.as_matrix_dims();
            if rv.numel() != c {
                return Err(Error::Shape(format!(
                    "mul_row: row length {} vs {c} columns",
                    rv.numel()
                )));
            }
            let mut out = t.clone();
            for chunk in out.data_mut().chunks_mut(c) {
                for (v, &s) in chunk.iter_mut().zip(rv.data()) {
                    *v *= s;
                }
            }
            out
        };
        Ok(self.push(value, Op::MulRow { x, row }, self.needs(x) || self.needs(row)))
    }

    /// Adds the vector `row` to every row of `x`.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (t, rv) = (&nodes[x.0].value, &nodes[row.0].value);
            let (_, c) = t.as_matrix_dims();
            if rv.numel() != c {
                return Err(Error::Shape(format!(
                    "add_row: row length {} vs {c} columns",
                    rv.numel()
                )));
            }
            let mut out = t.clone();
            for chunk in out.data_mut().chunks_mut(c) {
                for (v, &s) in chunk.iter_mut().zip(rv.data()) {
                    *v += s;
                }
            }
            out
        };
        Ok(self.push(value, Op::AddRow { x, row }, self.needs(x) || self.needs(row)))
    }

    /// Scales row `i` of `x` by `col[i]`.
    pub fn mul_col(&self, x: Var, col: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (t, cv) = (&nodes[x.0].value, &nodes[col.0].value);
            let (r, c) = t.as_matrix_dims();
            if cv.numel() != r {
                return Err(Error::Shape(format!(
                    "mul_col: column length {} vs {r} rows",
                    cv.numel()
                )));
            }
            let mut out = t.clone();
            for (i, chunk) in out.data_mut().chunks_mut(c).enumerate() {
                let s = cv.data()[i];
                for v in chunk.iter_mut() {
                    *v *= s;
                }
            }
            out
        };
        Ok(self.push(value, Op::MulCol { x, col }, self.needs(x) || self.needs(col)))
    }

    /// Adds `col[i]` to every element of row `i`.
    pub fn add_col(&self, x: Var, col: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (t, cv) = (&nodes[x.0].value, &nodes[col.0].value);
            let (r, c) = t.as_matrix_dims();
            if cv.numel() != r {
                return Err(Error::Shape(format!(
                    "add_col: column length {} vs {r} rows",
                    cv.numel()
                )));
            }
            let mut out = t.clone();
            for (i, chunk) in out.data_mut().chunks_mut(c).enumerate() {
                let s = cv.data()[i];
                for v in chunk.iter_mut() {
                    *v += s;
                }
            }
            out
        };
        Ok(self.push(value, Op::AddCol { x, col }, self.needs(x) || self.needs(col)))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.nodes.borrow()[x.0].value.data().iter().copied().sum());
        self.push(value, Op::SumAll(x), self.needs(x))
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let n = self.nodes.borrow()[x.0].value.numel();
        if n == 0 {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(
            self.nodes.borrow()[x.0].value.data().iter().copied().sum::<S>()
                / S::from_f64(n as f64),
        );
        Ok(self.push(value, Op::MeanAll(x), self.needs(x)))
    }

    /// Sum of absolute values.
    pub fn l1_all(&self, x: Var) -> Var {
        let value =
            Tensor::scalar(self.nodes.borrow()[x.0].value.data().iter().map(|v| v.abs()).sum());
        self.push(value, Op::L1All(x), self.needs(x))
    }

    /// Maximum element; ties resolve to the first occurrence.
    pub fn max_all(&self, x: Var) -> Result<Var> {
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.numel() == 0 {
                return Err(Error::Shape("max of an empty tensor".into()));
            }
            let mut best = 0usize;
            for (i, &v) in t.data().iter().enumerate() {
                if v > t.data()[best] {
                    best = i;
                }
            }
            (Tensor::scalar(t.data()[best]), best)
        };
        Ok(self.push(value, Op::MaxAll { x, argmax }, self.needs(x)))
    }

    /// Mean over the first dimension: `[r, c]` becomes `[c]`.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (r, c) = t.as_matrix_dims();
            if r == 0 {
                return Err(Error::Shape("mean_rows over zero rows".into()));
            }
            let rn = S::from_f64(r as f64);
            let mut data = vec![S::zero(); c];
            for chunk in t.data().chunks(c) {
                for (o, &v) in data.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            for o in data.iter_mut() {
                *o /= rn;
            }
            Tensor::new(vec![c], data)?
        };
        Ok(self.push(value, Op::MeanRows(x), self.needs(x)))
    }

    /// Divides every element of `x` by the 1-element tensor `s`.
    pub fn div_scalar_var(&self, x: Var, s: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let sv = nodes[s.0].value.item()?;
            if sv == S::zero() {
                return Err(Error::Numeric("division by a zero scalar".into()));
            }
            nodes[x.0].value.map(|v| v / sv)
        };
        Ok(self.push(value, Op::DivScalarVar { x, s }, self.needs(x) || self.needs(s)))
    }

    /// Multiplies every element of `x` by the 1-element tensor `s`.
    pub fn mul_scalar_var(&self, x: Var, s: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let sv = nodes[s.0].value.item()?;
            nodes[x.0].value.map(|v| v * sv)
        };
        Ok(self.push(value, Op::MulScalarVar { x, s }, self.needs(x) || self.needs(s)))
    }

    /// 2-D convolution over a `[cin, h, w]` input with kernels stored as a
    /// `[cout, cin*kh*kw]` matrix and an optional `[cout]` bias.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (value, info, ng) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let tw = &nodes[w.0].value;
            if tx.shape().len() != 3 {
                return Err(Error::Shape(format!(
                    "conv2d input must be [c, h, w], got {:?}",
                    tx.shape()
                )));
            }
            if stride == 0 {
                return Err(Error::Contract("conv2d stride must be positive".into()));
            }
            let (cin, h, wd) = (tx.dim(0), tx.dim(1), tx.dim(2));
            if tw.shape().len() != 2 || tw.dim(1) != cin * kh * kw {
                return Err(Error::Shape(format!(
                    "conv2d kernel must be [cout, {}], got {:?}",
                    cin * kh * kw,
                    tw.shape()
                )));
            }
            let cout = tw.dim(0);
            if h + 2 * pad < kh || wd + 2 * pad < kw {
                return Err(Error::Shape(format!(
                    "conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}+{pad}"
                )));
            }
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (wd + 2 * pad - kw) / stride + 1;
            let cols = im2col(tx.data(), cin, h, wd, kh, kw, stride, pad, oh, ow);
            let mut data = matmul_raw(tw.data(), &cols, cout, cin * kh * kw, oh * ow);
            let mut ng = nodes[x.0].needs_grad || nodes[w.0].needs_grad;
            if let Some(bv) = b {
                let tb = &nodes[bv.0].value;
                if tb.numel() != cout {
                    return Err(Error::Shape(format!(
                        "conv2d bias length {} vs {cout} output channels",
                        tb.numel()
                    )));
                }
                for (c, chunk) in data.chunks_mut(oh * ow).enumerate() {
                    let bias = tb.data()[c];
                    for v in chunk.iter_mut() {
                        *v += bias;
                    }
                }
                ng |= nodes[bv.0].needs_grad;
            }
            let info = ConvInfo { x, w, b, stride, pad, cin, h, wd, kh, kw, oh, ow, cols };
            (Tensor::new(vec![cout, oh, ow], data)?, info, ng)
        };
        Ok(self.push(value, Op::Conv2d(Box::new(info)), ng))
    }

    /// Nearest-neighbor 2x upsampling of a `[c, h, w]` tensor.
    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 3 {
                return Err(Error::Shape(format!(
                    "upsample2x input must be [c, h, w], got {:?}",
                    t.shape()
                )));
            }
            let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
            let mut data = vec![S::zero(); c * 4 * h * w];
            for ci in 0..c {
                for y in 0..h {
                    for x2 in 0..w {
                        let v = t.data()[(ci * h + y) * w + x2];
                        for dy in 0..2 {
                            for dx in 0..2 {
                                data[(ci * 2 * h + 2 * y + dy) * 2 * w + 2 * x2 + dx] = v;
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![c, 2 * h, 2 * w], data)?
        };
        Ok(self.push(value, Op::Upsample2x(x), self.needs(x)))
    }

    /// Runs reverse-mode accumulation from a scalar loss. Returns the
    /// gradients of every reached leaf; interior gradients are discarded
    /// as soon as their contributions have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        if !nodes[loss.0].value.all_finite() {
            return Err(Error::Numeric("loss is non-finite before backward".into()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let add_to = |v: Var, contrib: GradContrib<S>, grads: &mut Vec<Option<Vec<S>>>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                let slot = grads[v.0]
                    .get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.numel()]);
                contrib.apply(slot);
            };
            match &nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    add_to(*a, GradContrib::Dense(g.clone()), &mut grads);
                    add_to(*b, GradContrib::Dense(g), &mut grads);
                }
                Op::Sub(a, b) => {
                    add_to(*a, GradContrib::Dense(g.clone()), &mut grads);
                    add_to(*b, GradContrib::Dense(g.iter().map(|&v| -v).collect()), &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<S> =
                        g.iter().zip(nodes[b.0].value.data()).map(|(&x, &y)| x * y).collect();
                    let gb: Vec<S> =
                        g.iter().zip(nodes[a.0].value.data()).map(|(&x, &y)| x * y).collect();
                    add_to(*a, GradContrib::Dense(ga), &mut grads);
                    add_to(*b, GradContrib::Dense(gb), &mut grads);
                }
                Op::Scale(a, c) => {
                    add_to(*a, GradContrib::Dense(g.iter().map(|&v| v * *c).collect()), &mut grads);
                }
                Op::AddScalar(a, _) => {
                    add_to(*a, GradContrib::Dense(g), &mut grads);
                }
                Op::Neg(a) => {
                    add_to(*a, GradContrib::Dense(g.iter().map(|&v| -v).collect()), &mut grads);
                }
                Op::MatMul(a, b) => {
                    let ta = &nodes[a.0].value;
                    let tb = &nodes[b.0].value;
                    let (m, k) = (ta.dim(0), ta.dim(1));
                    let n = tb.dim(1);
                    if nodes[a.0].needs_grad {
                        let bt = transpose_raw(tb.data(), k, n);
                        let da = matmul_raw(&g, &bt, m, n, k);
                        add_to(*a, GradContrib::Dense(da), &mut grads);
                    }
                    if nodes[b.0].needs_grad {
                        let at = transpose_raw(ta.data(), m, k);
                        let db = matmul_raw(&at, &g, k, m, n);
                        add_to(*b, GradContrib::Dense(db), &mut grads);
                    }
                }
                Op::Transpose(a) => {
                    let t = &nodes[i].value;
                    let (r, c) = (t.dim(0), t.dim(1));
                    add_to(*a, GradContrib::Dense(transpose_raw(&g, r, c)), &mut grads);
                }
                Op::Reshape(a) => {
                    add_to(*a, GradContrib::Dense(g), &mut grads);
                }
                Op::Concat0(parts) => {
                    let mut offset = 0usize;
                    for &p in parts {
                        let n = nodes[p.0].value.numel();
                        add_to(p, GradContrib::Dense(g[offset..offset + n].to_vec()), &mut grads);
                        offset += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let row: usize = nodes[x.0].value.shape()[1..].iter().product();
                    add_to(
                        *x,
                        GradContrib::Offset { offset: *start * row.max(1), g },
                        &mut grads,
                    );
                }
                Op::Gather { table, ids } => {
                    let d = nodes[table.0].value.dim(1);
                    add_to(*table, GradContrib::ScatterRows { ids: ids.clone(), d, g }, &mut grads);
                }
                Op::GatherElems { x, ids } => {
                    let (_, c) = nodes[x.0].value.as_matrix_dims();
                    add_to(*x, GradContrib::ScatterElems { ids: ids.clone(), c, g }, &mut grads);
                }
                Op::SoftmaxLast(x) => {
                    let y = nodes[i].value.data();
                    let c = *nodes[i].value.shape().last().unwrap();
                    let mut dx = vec![S::zero(); y.len()];
                    for r in 0..y.len() / c {
                        let ys = &y[r * c..(r + 1) * c];
                        let gs = &g[r * c..(r + 1) * c];
                        let dot: S = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    add_to(*x, GradContrib::Dense(dx), &mut grads);
                }
                Op::LogSoftmaxLast(x) => {
                    let y = nodes[i].value.data();
                    let c = *nodes[i].value.shape().last().unwrap();
                    let mut dx = vec![S::zero(); y.len()];
                    for r in 0..y.len() / c {
                        let ys = &y[r * c..(r + 1) * c];
                        let gs = &g[r * c..(r + 1) * c];
                        let gsum: S = gs.iter().copied().sum();
                        for j in 0..c {
                            dx[r * c + j] = gs[j] - ys[j].exp() * gsum;
                        }
                    }
                    add_to(*x, GradContrib::Dense(dx), &mut grads);
                }
                Op::Gelu(x) => {
                    let vx = nodes[x.0].value.data();
                    let dx: Vec<S> =
                        g.iter().zip(vx).map(|(&gv, &v)| gv * gelu_bwd(v)).collect();
                    add_to(*x, GradContrib::Dense(dx), &mut grads);
                }
                Op::Silu(x) => {
                    let vx = nodes[x.0].value.data();
                    let dx: Vec<S> = g
                        .iter()
                        .zip(vx)
                        .map(|(&gv, &v)| {
                            let s = sigmoid(v);
                            gv * (s + v * s * (S::one() - s))
                        })
                        .collect();
                    add_to(*x, GradContrib::Dense(dx), &mut grads);
                }
                Op::RowNorm { x, cache } => {
                    let y = nodes[i].value.data();
                    let c = nodes[i].value.as_matrix_dims().1;
                    let cn = S::from_f64(c as f64);
                    let mut dx = vec![S::zero(); y.len()];
                    for (r, &(_, rstd)) in cache.iter().enumerate() {
                        let ys = &y[r * c..(r + 1) * c];
                        let gs = &g[r * c..(r + 1) * c];
                        let gmean: S = gs.iter().copied().sum::<S>() / cn;
                        let gy_mean: S =
                            gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<S>() / cn;
                        for j in 0..c {
                            dx[r * c + j] = rstd * (gs[j] - gmean - ys[j] * gy_mean);
                        }
                    }
                    add_to(*x, GradContrib::Dense(dx), &mut grads);
                }
                Op::MulRow { x, row } => {
                    let c = nodes[x.0].value.as_matrix_dims().1;
                    if nodes[x.0].needs_grad {
                        let rv = nodes[row.0].value.data();
                        let mut dx = g.clone();
                        for chunk in dx.chunks_mut(c) {
                            for (v, &s) in chunk.iter_mut().zip(rv) {
                                *v *= s;
                            }
                        }
                        add_to(*x, GradContrib::Dense(dx), &mut grads);
                    }
                    if nodes[row.0].needs_grad {
                        let vx = nodes[x.0].value.data();
                        let mut dr = vec![S::zero(); c];
                        for (gc, xc) in g.chunks(c).zip(vx.chunks(c)) {
                            for j in 0..c {
                                dr[j] += gc[j] * xc[j];
                            }
                        }
                        add_to(*row, GradContrib::Dense(dr), &mut grads);
                    }
                }
                Op::AddRow { x, row } => {
                    let c = nodes[x.0].value.as_matrix_dims().1;
                    if nodes[row.0].needs_grad {
                        let mut dr = vec![S::zero(); c];
                        for gc in g.chunks(c) {
                            for j in 0..c {
                                dr[j] += gc[j];
                            }
                        }
                        add_to(*row, GradContrib::Dense(dr), &mut grads);
                    }
                    add_to(*x, GradContrib::Dense(g), &mut grads);
                }
                Op::MulCol { x, col } => {
                    let (r, c) = nodes[x.0].value.as_matrix_dims();
                    if nodes[x.0].needs_grad {
                        let cv = nodes[col.0].value.data();
                        let mut dx = g.clone();
                        for (i2, chunk) in dx.chunks_mut(c).enumerate() {
                            for v in chunk.iter_mut() {
                                *v *= cv[i2];
                            }
                        }
                        add_to(*x, GradContrib::Dense(dx), &mut grads);
                    }
                    if nodes[col.0].needs_grad {
                        let vx = nodes[x.0].value.data();
                        let mut dc = vec![S::zero(); r];
                        for i2 in 0..r {
                            for j in 0..c {
                                dc[i2] += g[i2 * c + j] * vx[i2 * c + j];
                            }
                        }
                        add_to(*col, GradContrib::Dense(dc), &mut grads);
                    }
                }
                Op::AddCol { x, col } => {
                    let (r, c) = nodes[x.0].value.as_matrix_dims();
                    if nodes[col.0].needs_grad {
                        let mut dc = vec![S::zero(); r];
                        for i2 in 0..r {
                            for j in 0..c {
                                dc[i2] += g[i2 * c + j];
                            }
                        }
                        add_to(*col, GradContrib::Dense(dc), &mut grads);
                    }
                    add_to(*x, GradContrib::Dense(g), &mut grads);
                }
                Op::SumAll(x) => {
                    let n = nodes[x.0].value.numel();
                    add_to(*x, GradContrib::Dense(vec![g[0]; n]), &mut grads);
                }
                Op::MeanAll(x) => {
                    let n = nodes[x.0].value.numel();
                    let v = g[0] / S::from_f64(n as f64);
                    add_to(*x, GradContrib::Dense(vec![v; n]), &mut grads);
                }
                Op::L1All(x) => {
                    let dx: Vec<S> = nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .map(|&v| {
                            if v > S::zero() {
                                g[0]
                            } else if v < S::zero() {
                                -g[0]
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    add_to(*x, GradContrib::Dense(dx), &mut grads);
                }
                Op::MaxAll { x, argmax } => {
                    let mut dx = vec![S::zero(); nodes[x.0].value.numel()];
                    dx[*argmax] = g[0];
                    add_to(*x, GradContrib::Dense(dx), &mut grads);
                }
                Op::MeanRows(x) => {
                    let (r, c) = nodes[x.0].value.as_matrix_dims();
                    let rn = S::from_f64(r as f64);
                    let mut dx = vec![S::zero(); r * c];
                    for chunk in dx.chunks_mut(c) {
                        for (v, &gv) in chunk.iter_mut().zip(&g) {
                            *v = gv / rn;
                        }
                    }
                    add_to(*x, GradContrib::Dense(dx), &mut grads);
                }
                Op::DivScalarVar { x, s } => {
                    let sv = nodes[s.0].value.data()[0];
                    if nodes[x.0].needs_grad {
                        let dx: Vec<S> = g.iter().map(|&v| v / sv).collect();
                        add_to(*x, GradContrib::Dense(dx), &mut grads);
                    }
                    if nodes[s.0].needs_grad {
                        let vx = nodes[x.0].value.data();
                        let dot: S = g.iter().zip(vx).map(|(&a, &b)| a * b).sum();
                        add_to(*s, GradContrib::Dense(vec![-dot / (sv * sv)]), &mut grads);
                    }
                }
                Op::MulScalarVar { x, s } => {
                    let sv = nodes[s.0].value.data()[0];
                    if nodes[x.0].needs_grad {
                        let dx: Vec<S> = g.iter().map(|&v| v * sv).collect();
                        add_to(*x, GradContrib::Dense(dx), &mut grads);
                    }
                    if nodes[s.0].needs_grad {
                        let vx = nodes[x.0].value.data();
                        let dot: S = g.iter().zip(vx).map(|(&a, &b)| a * b).sum();
                        add_to(*s, GradContrib::Dense(vec![dot]), &mut grads);
                    }
                }
                Op::Conv2d(info) => {
                    let cout = nodes[info.w.0].value.dim(0);
                    let kdim = info.cin * info.kh * info.kw;
                    let spatial = info.oh * info.ow;
                    if let Some(bv) = info.b {
                        if nodes[bv.0].needs_grad {
                            let mut db = vec![S::zero(); cout];
                            for (ci, chunk) in g.chunks(spatial).enumerate() {
                                db[ci] = chunk.iter().copied().sum();
                            }
                            add_to(bv, GradContrib::Dense(db), &mut grads);
                        }
                    }
                    if nodes[info.w.0].needs_grad {
                        let colst = transpose_raw(&info.cols, kdim, spatial);
                        let dw = matmul_raw(&g, &colst, cout, spatial, kdim);
                        add_to(info.w, GradContrib::Dense(dw), &mut grads);
                    }
                    if nodes[info.x.0].needs_grad {
                        let wt = transpose_raw(nodes[info.w.0].value.data(), cout, kdim);
                        let dcols = matmul_raw(&wt, &g, kdim, cout, spatial);
                        let dx = col2im(
                            &dcols, info.cin, info.h, info.wd, info.kh, info.kw, info.stride,
                            info.pad, info.oh, info.ow,
                        );
                        add_to(info.x, GradContrib::Dense(dx), &mut grads);
                    }
                }
                Op::Upsample2x(x) => {
                    let t = &nodes[x.0].value;
                    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
                    let mut dx = vec![S::zero(); c * h * w];
                    for ci in 0..c {
                        for y in 0..h {
                            for x2 in 0..w {
                                let mut acc = S::zero();
                                for dy in 0..2 {
                                    for dxo in 0..2 {
                                        acc += g
                                            [(ci * 2 * h + 2 * y + dy) * 2 * w + 2 * x2 + dxo];
                                    }
                                }
                                dx[(ci * h + y) * w + x2] = acc;
                            }
                        }
                    }
                    add_to(*x, GradContrib::Dense(dx), &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// How a child's gradient folds into a parent's accumulator.
enum GradContrib<S: Scalar> {
    Dense(Vec<S>),
    Offset { offset: usize, g: Vec<S> },
    ScatterRows { ids: Vec<usize>, d: usize, g: Vec<S> },
    ScatterElems { ids: Vec<usize>, c: usize, g: Vec<S> },
}

impl<S: Scalar> GradContrib<S> {
    fn apply(self, slot: &mut [S]) {
        match self {
            GradContrib::Dense(g) => {
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
            GradContrib::Offset { offset, g } => {
                for (s, v) in slot[offset..offset + g.len()].iter_mut().zip(g) {
                    *s += v;
                }
            }
            GradContrib::ScatterRows { ids, d, g } => {
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        slot[id * d + j] += g[i * d + j];
                    }
                }
            }
            GradContrib::ScatterElems { ids, c, g } => {
                for (i, &id) in ids.iter().enumerate() {
                    slot[i * c + id] += g[i];
                }
            }
        }
    }
}

/// Row-major matrix product: `a` is `m x k`, `b` is `k x n`.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == S::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw<S: Scalar>(a: &[S], r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softmax_row_inplace<S: Scalar>(row: &mut [S]) {
    let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

fn gelu_fwd<S: Scalar>(v: S) -> S {
    let half = S::from_f64(0.5);
    let c = S::from_f64(SQRT_2_OVER_PI);
    let a = S::from_f64(GELU_COEF);
    half * v * (S::one() + (c * (v + a * v * v * v)).tanh())
}

fn gelu_bwd<S: Scalar>(v: S) -> S {
    let half = S::from_f64(0.5);
    let c = S::from_f64(SQRT_2_OVER_PI);
    let a = S::from_f64(GELU_COEF);
    let three = S::from_f64(3.0);
    let u = c * (v + a * v * v * v);
    let t = u.tanh();
    let du = c * (S::one() + three * a * v * v);
    half * (S::one() + t) + half * v * (S::one() - t * t) * du
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut cols = vec![S::zero(); cin * kh * kw * oh * ow];
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row * oh * ow + oy * ow + ox] =
                            x[(ci * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut x = vec![S::zero(); cin * h * w];
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci * h + iy as usize) * w + ix as usize] +=
                            cols[row * oh * ow + oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_input() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t2(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_matches_hand_computed_product() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t2(2, 1, &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t2(2, 3, &[0.0; 6]));
        let b = tape.leaf(t2(2, 2, &[0.0; 4]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_uniform_singleton_and_known_rows() {
        let tape = Tape::<f64>::new();
        let u = tape.leaf(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let su = tape.softmax_lastdim(u).unwrap();
        for &v in tape.value(su).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let k = tape.leaf(Tensor::new(vec![2], vec![0.0, 3.0f64.ln()]).unwrap());
        let sk = tape.softmax_lastdim(k).unwrap();
        assert!((tape.value(sk).data()[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(sk).data()[1] - 0.75).abs() < 1e-12);
        let one = tape.leaf(Tensor::new(vec![1], vec![5.0]).unwrap());
        let so = tape.softmax_lastdim(one).unwrap();
        assert_eq!(tape.value(so).data(), &[1.0]);
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax_lastdim(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreached_leaf_gets_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.leaf_grad(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 1.0]);
        assert!(grads.wrt(y).is_none());
    }

    #[test]
    fn matmul_backward_matches_closed_form() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf_grad(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf_grad(t2(2, 1, &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(grads.wrt(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn conv2d_matches_direct_sum_on_small_case() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap());
        let w = tape.leaf(t2(1, 9, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]));
        let y = tape.conv2d(x, w, None, 3, 3, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 3]);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn upsample2x_repeats_pixels_and_backward_pools() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 4]);
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn gather_rows_scatters_gradients_back() {
        let tape = Tape::<f64>::new();
        let table = tape.leaf_grad(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = tape.gather_rows(table, &[2, 0, 2]).unwrap();
        let loss = tape.sum_all(picked);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }
}
