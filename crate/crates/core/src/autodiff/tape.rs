use std::sync::{Arc, LazyLock};

use rand::Rng;

use super::gemm::{gemm, Strides};
use super::tensor::axis_split;
use super::{AutodiffError, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which keys each query row may attend to.
#[derive(Clone, Debug)]
pub enum AttentionMask {
    /// Every query sees every key.
    Full,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Query `i` sees exactly the listed key rows.
    Neighbors(Arc<Vec<Vec<usize>>>),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        sa: Strides,
        sb: Strides,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        axis: usize,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Stack(Vec<Var>),
    IndexSelect {
        x: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: Vec<Vec<usize>>,
        weights: Vec<f64>,
        offsets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    /// `None` for parameter leaves, whose values live in the [`ParamStore`].
    value: Option<Vec<f64>>,
    param: Option<ParamId>,
    requires_grad: bool,
    op: Op,
}

static NO_PARAMS: LazyLock<ParamStore> = LazyLock::new(ParamStore::new);

/// Record of a forward computation, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order of the computation.
#[derive(Debug)]
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    params_require_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter, `None` if the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.param_vars
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.of(v))
    }
}

impl Tape<'static> {
    /// A tape with no parameter store, for standalone tensor computations.
    pub fn detached() -> Self {
        Tape::new(&NO_PARAMS)
    }
}

impl<'p> Tape<'p> {
    /// Training tape: parameter leaves require gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            params_require_grad: true,
        }
    }

    /// Inference tape: nothing requires gradients.
    pub fn inference(params: &'p ParamStore) -> Self {
        Tape {
            params_require_grad: false,
            ..Tape::new(params)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Leaf for a parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            shape: self.params.get(id).shape().to_vec(),
            value: None,
            param: Some(id),
            requires_grad: self.params_require_grad,
            op: Op::Leaf,
        });
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Non-parameter leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), requires_grad, Op::Leaf)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            shape,
            value: Some(value),
            param: None,
            requires_grad,
            op,
        });
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(value), _) => value,
            (None, Some(id)) => self.params.get(id).data(),
            (None, None) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("consistent node")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(AutodiffError::RankMismatch {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    fn check_axis(&self, v: Var, axis: usize, op: &'static str) -> Result<(), AutodiffError> {
        let rank = self.shape(v).len();
        if axis >= rank {
            return Err(AutodiffError::InvalidAxis { op, axis, rank });
        }
        if self.shape(v)[axis] == 0 {
            return Err(AutodiffError::EmptyAxis { op });
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---------------------------------------------------------------- primitives

    /// `a @ b` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) @ op(b)` where `op` optionally transposes its rank-2 operand.
    pub fn matmul_t(
        &mut self,
        a: Var,
        transpose_a: bool,
        b: Var,
        transpose_b: bool,
    ) -> Result<Var, AutodiffError> {
        let (ar, ac) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (m, k) = if transpose_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let sa = Strides::row_major(ac, transpose_a);
        let sb = Strides::row_major(bc, transpose_b);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            sa,
            self.value(b),
            sb,
            0.0,
            &mut out,
            Strides::row_major(n, false),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            vec![m, n],
            out,
            rg,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                sa,
                sb,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    fn broadcast_row(
        &self,
        a: Var,
        row: Var,
        op: &'static str,
    ) -> Result<usize, AutodiffError> {
        let last = *self.shape(a).last().ok_or(AutodiffError::RankMismatch {
            op,
            expected: 1,
            shape: vec![],
        })?;
        if self.shape(row) != [last] {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        Ok(last)
    }

    /// Adds a vector to every row (last axis) of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let n = self.broadcast_row(a, row, "add_row")?;
        let r = self.value(row);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + r[i % n])
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::AddRow(a, row)))
    }

    /// Multiplies every row (last axis) of `a` by a vector elementwise.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let n = self.broadcast_row(a, row, "mul_row")?;
        let r = self.value(row);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * r[i % n])
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Log(a))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.check_axis(a, axis, "softmax")?;
        let out = softmax_along(self.value(a), self.shape(a), axis, false);
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Softmax(a, axis)))
    }

    /// Log-softmax along `axis` via log-sum-exp.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.check_axis(a, axis, "log_softmax")?;
        let out = softmax_along(self.value(a), self.shape(a), axis, true);
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::LogSoftmax(a, axis)))
    }

    /// Normalizes to zero mean and unit (population) variance along `axis`.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var, AutodiffError> {
        self.check_axis(x, axis, "layer_norm")?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let xs = self.value(x);
        let mut out = vec![0.0; xs.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let mean = (0..n).map(|j| xs[idx(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (xs[idx(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    out[idx(j)] = (xs[idx(j)] - mean) * r;
                }
                inv_std.push(r);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, rg, Op::LayerNorm { x, axis, inv_std }))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`. With `rate == 0` this is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
    ) -> Result<Var, AutodiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::Dropout { x, mask }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = *inputs.first().ok_or(AutodiffError::InvalidArgument(
            "concat of zero tensors".into(),
        ))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let first = *inputs.first().ok_or(AutodiffError::InvalidArgument(
            "stack of zero tensors".into(),
        ))?;
        let base = self.shape(first).to_vec();
        let mut out = Vec::with_capacity(base.iter().product::<usize>() * inputs.len());
        for &v in inputs {
            self.same_shape(first, v, "stack")?;
            out.extend_from_slice(self.value(v));
        }
        let mut shape = vec![inputs.len()];
        shape.extend(base);
        let rg = self.rg(inputs);
        Ok(self.push(shape, out, rg, Op::Stack(inputs.to_vec())))
    }

    /// Gathers slices along axis 0.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or(AutodiffError::RankMismatch {
            op: "index_select",
            expected: 1,
            shape: vec![],
        })?;
        let width: usize = shape[1..].iter().product();
        let src = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange { index: i, len: rows });
            }
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::IndexSelect {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(AutodiffError::EmptyAxis { op: "mean" });
        }
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(vec![], vec![s], rg, Op::Mean(x)))
    }

    /// Multi-head scaled dot-product attention restricted by `mask`.
    ///
    /// `q` is `nq x d`, `k` and `v` are `nk x d`; `d` must be divisible by
    /// `heads`. Head `h` uses columns `h*d/heads .. (h+1)*d/heads` and the
    /// heads are concatenated back into a `nq x d` output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttentionMask,
    ) -> Result<Var, AutodiffError> {
        let (nq, d) = self.matrix_dims(q, "attention")?;
        let (nk, dk) = self.matrix_dims(k, "attention")?;
        if dk != d {
            return Err(AutodiffError::ShapeMismatch {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        self.same_shape(k, v, "attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(AutodiffError::InvalidArgument(format!(
                "attention width {d} not divisible into {heads} heads"
            )));
        }
        let keys: Vec<Vec<usize>> = match mask {
            AttentionMask::Full => vec![(0..nk).collect(); nq],
            AttentionMask::Causal => {
                if nk < nq {
                    return Err(AutodiffError::InvalidArgument(format!(
                        "causal attention needs at least {nq} keys, got {nk}"
                    )));
                }
                (0..nq).map(|i| (0..=i).collect()).collect()
            }
            AttentionMask::Neighbors(lists) => {
                if lists.len() != nq {
                    return Err(AutodiffError::InvalidArgument(format!(
                        "{} neighbor lists for {nq} queries",
                        lists.len()
                    )));
                }
                lists.as_ref().clone()
            }
        };
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; nq * d];
        let mut offsets = Vec::with_capacity(nq);
        let mut weights = Vec::new();
        for (i, allowed) in keys.iter().enumerate() {
            if allowed.is_empty() {
                return Err(AutodiffError::EmptyAxis { op: "attention" });
            }
            if let Some(&bad) = allowed.iter().find(|&&j| j >= nk) {
                return Err(AutodiffError::IndexOutOfRange { index: bad, len: nk });
            }
            offsets.push(weights.len());
            for h in 0..heads {
                let qi = &qs[i * d + h * dh..i * d + (h + 1) * dh];
                let start = weights.len();
                let mut max = f64::NEG_INFINITY;
                for &j in allowed {
                    let kj = &ks[j * d + h * dh..j * d + (h + 1) * dh];
                    let s = dot(qi, kj) * scale;
                    max = max.max(s);
                    weights.push(s);
                }
                let w = &mut weights[start..];
                let mut total = 0.0;
                for s in w.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (s, &j) in w.iter_mut().zip(allowed) {
                    *s /= total;
                    let vj = &vs[j * d + h * dh..j * d + (h + 1) * dh];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += *s * vc;
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![nq, d],
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                keys,
                weights,
                offsets,
            },
        ))
    }

    /// Attention weights recorded by an [`Tape::attention`] node: for query
    /// `i` and head `h`, the distribution over its allowed keys.
    pub fn attention_weights(&self, out: Var, i: usize, h: usize) -> Option<(&[usize], &[f64])> {
        match &self.nodes[out.0].op {
            Op::Attention {
                keys,
                weights,
                offsets,
                ..
            } => {
                let len = keys[i].len();
                let start = offsets[i] + h * len;
                Some((&keys[i], &weights[start..start + len]))
            }
            _ => None,
        }
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let node = &self.nodes[loss.0];
        if node.shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: node.shape.clone(),
            });
        }
        if !node.requires_grad {
            return Err(AutodiffError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        f: impl Fn(usize) -> f64,
    ) {
        if let Some(buf) = self.buf(grads, v) {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += f(i);
            }
        }
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.as_deref().unwrap_or(&[]);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                sa,
                sb,
            } => {
                let sg = Strides::row_major(n, false);
                if let Some(buf) = self.buf(grads, a) {
                    let sbt = Strides {
                        row: sb.col,
                        col: sb.row,
                    };
                    gemm(m, n, k, g, sg, self.value(b), sbt, 1.0, buf, sa);
                }
                if let Some(buf) = self.buf(grads, b) {
                    let sat = Strides {
                        row: sa.col,
                        col: sa.row,
                    };
                    gemm(k, m, n, self.value(a), sat, g, sg, 1.0, buf, sb);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |i| g[i]);
                self.accumulate(grads, b, |i| g[i]);
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.accumulate(grads, a, |i| g[i] * bv[i]);
                self.accumulate(grads, b, |i| g[i] * av[i]);
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, |i| g[i]);
                if let Some(buf) = self.buf(grads, row) {
                    let n = buf.len();
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % n] += gi;
                    }
                }
            }
            &Op::MulRow(a, row) => {
                let (av, rv) = (self.value(a), self.value(row));
                let n = rv.len();
                self.accumulate(grads, a, |i| g[i] * rv[i % n]);
                if let Some(buf) = self.buf(grads, row) {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % n] += gi * av[i];
                    }
                }
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, |i| g[i] * c),
            &Op::Relu(a) => {
                let av = self.value(a);
                self.accumulate(grads, a, |i| if av[i] > 0.0 { g[i] } else { 0.0 });
            }
            &Op::Log(a) => {
                let av = self.value(a);
                self.accumulate(grads, a, |i| g[i] / av[i]);
            }
            &Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split(&node.shape, axis);
                if let Some(buf) = self.buf(grads, a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| o * n * inner + j * inner + i;
                            let dotp: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..n {
                                buf[idx(j)] += out[idx(j)] * (g[idx(j)] - dotp);
                            }
                        }
                    }
                }
            }
            &Op::LogSoftmax(a, axis) => {
                let (outer, n, inner) = axis_split(&node.shape, axis);
                if let Some(buf) = self.buf(grads, a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| o * n * inner + j * inner + i;
                            let total: f64 = (0..n).map(|j| g[idx(j)]).sum();
                            for j in 0..n {
                                buf[idx(j)] += g[idx(j)] - out[idx(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                if let Some(buf) = self.buf(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| o * n * inner + j * inner + i;
                            let r = inv_std[o * inner + i];
                            let mean_g = (0..n).map(|j| g[idx(j)]).sum::<f64>() / n as f64;
                            let mean_gy =
                                (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum::<f64>() / n as f64;
                            for j in 0..n {
                                buf[idx(j)] += r * (g[idx(j)] - mean_g - out[idx(j)] * mean_gy);
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => self.accumulate(grads, *x, |i| g[i] * mask[i]),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let width = self.shape(v)[*axis];
                    if let Some(buf) = self.buf(grads, v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + width) * inner];
                            let dst = &mut buf[o * width * inner..(o + 1) * width * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::Stack(inputs) => {
                let width = g.len() / inputs.len();
                for (slot, &v) in inputs.iter().enumerate() {
                    let part = &g[slot * width..(slot + 1) * width];
                    self.accumulate(grads, v, |i| part[i]);
                }
            }
            Op::IndexSelect { x, indices } => {
                let width = g.len().checked_div(indices.len()).unwrap_or(0);
                if let Some(buf) = self.buf(grads, *x) {
                    for (slot, &row) in indices.iter().enumerate() {
                        let src = &g[slot * width..(slot + 1) * width];
                        for (d, s) in buf[row * width..(row + 1) * width].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            &Op::Reshape(x) => self.accumulate(grads, x, |i| g[i]),
            &Op::Sum(x) => self.accumulate(grads, x, |_| g[0]),
            &Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                self.accumulate(grads, x, |_| g[0] / n);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                keys,
                weights,
                offsets,
            } => self.attention_backward(g, grads, (*q, *k, *v), *heads, keys, weights, offsets),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        keys: &[Vec<usize>],
        weights: &[f64],
        offsets: &[usize],
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut dq = self.nodes[q.0].requires_grad.then(|| vec![0.0; qs.len()]);
        let mut dk = self.nodes[k.0].requires_grad.then(|| vec![0.0; ks.len()]);
        let mut dv = self.nodes[v.0].requires_grad.then(|| vec![0.0; vs.len()]);
        let mut ds = Vec::new();
        for (i, allowed) in keys.iter().enumerate() {
            let len = allowed.len();
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let gi = &g[i * d + cols.start..i * d + cols.end];
                let w = &weights[offsets[i] + h * len..offsets[i] + (h + 1) * len];
                ds.clear();
                let mut weighted = 0.0;
                for (&wj, &j) in w.iter().zip(allowed) {
                    let vj = &vs[j * d + cols.start..j * d + cols.end];
                    let dw = dot(gi, vj);
                    weighted += wj * dw;
                    ds.push(dw);
                    if let Some(dv) = dv.as_mut() {
                        for (acc, gc) in dv[j * d + cols.start..j * d + cols.end].iter_mut().zip(gi) {
                            *acc += wj * gc;
                        }
                    }
                }
                for (s, &wj) in ds.iter_mut().zip(w) {
                    *s = wj * (*s - weighted) * scale;
                }
                let qi = &qs[i * d + cols.start..i * d + cols.end];
                for (&s, &j) in ds.iter().zip(allowed) {
                    if let Some(dq) = dq.as_mut() {
                        let kj = &ks[j * d + cols.start..j * d + cols.end];
                        for (acc, kc) in dq[i * d + cols.start..i * d + cols.end].iter_mut().zip(kj) {
                            *acc += s * kc;
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        for (acc, qc) in dk[j * d + cols.start..j * d + cols.end].iter_mut().zip(qi) {
                            *acc += s * qc;
                        }
                    }
                }
            }
        }
        for (var, part) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(part) = part {
                self.accumulate(grads, var, |i| part[i]);
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_along(xs: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| xs[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..n).map(|j| (xs[idx(j)] - max).exp()).sum();
            let lse = total.ln();
            for j in 0..n {
                let shifted = xs[idx(j)] - max;
                out[idx(j)] = if log {
                    shifted - lse
                } else {
                    shifted.exp() / total
                };
            }
        }
    }
    out
}
