// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Tape`] holding its output value and
//! whatever it needs for the backward pass. [`Tape::backward`] walks the
//! nodes in reverse order and accumulates gradients into every node that
//! (transitively) depends on a leaf created with `requires_grad = true`.
//! Only leaf gradients are kept once the pass has finished.
//!
//! The op family is the one a small pre-norm transformer needs: matmul,
//! elementwise add/mul, bias broadcast, embedding lookup, layer norm, GELU
//! (tanh approximation), softmax, causal multi-head attention and
//! cross-entropy against soft or hard targets.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor, View};

/// Additive bias applied to attention scores above the diagonal.
pub const CAUSAL_MASK_BIAS: f64 = -1e9;

/// Target id that [`Tape::cross_entropy_ids`] skips.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: F,
    },
    SigmoidScaled {
        x: Var,
        scale: F,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<F>,
    },
    CrossEntropySoft {
        logits: Var,
        targets: Vec<F>,
        probs: Vec<F>,
    },
    CrossEntropyIds {
        logits: Var,
        ids: Vec<usize>,
        probs: Vec<F>,
        counted: usize,
    },
    Sum {
        x: Var,
    },
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Ordered record of executed operations.
///
/// A tape is single-threaded; independent workers each own their own.
pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::InvalidArgument(format!("{op}: {detail}"))
}

fn check_finite<F: Scalar>(op: &str, data: &[F]) -> Result<()> {
    if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NumericFailure {
            op: op.to_string(),
            detail: format!("non-finite value at flat index {pos}"),
        });
    }
    Ok(())
}

fn softmax_rows_in_place<F: Scalar>(data: &mut [F], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
        let mut total = F::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total = total + *x;
        }
        let inv = total.recip();
        for x in row.iter_mut() {
            *x = *x * inv;
        }
    }
}

/// Row-wise softmax of a matrix, outside of any tape.
pub fn softmax_rows<F: Scalar>(data: &[F], cols: usize) -> Vec<F> {
    let mut out = data.to_vec();
    softmax_rows_in_place(&mut out, cols);
    out
}

/// Row-wise log-softmax, outside of any tape.
pub fn log_softmax_rows<F: Scalar>(data: &[F], cols: usize) -> Vec<F> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
        let lse = row
            .iter()
            .fold(F::zero(), |acc, &x| acc + (x - max).exp())
            .ln()
            + max;
        for x in row.iter_mut() {
            *x = *x - lse;
        }
    }
    out
}

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = F::lit(0.044715);
    let half = F::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t)
        + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x);
    (y, dy)
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads[v.0].take()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| shape_err(op, format!("expected matrix, got {:?}", self.shape(v))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] @ [{k2},{n}]")));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a).data(),
            View::rows(0, k),
            self.value(b).data(),
            View::rows(0, n),
            F::zero(),
            &mut out,
            View::rows(0, n),
        );
        check_finite("matmul", &out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        check_finite("add", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Add { a, b }))
    }

    /// `x[m, n] + bias[n]`, broadcasting over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o = *o + bb;
            }
        }
        check_finite("add_bias", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::AddBias { x, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        check_finite("mul", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let out: Vec<F> = self.value(x).data().iter().map(|&v| v * c).collect();
        check_finite("scale", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Scale { x, c }))
    }

    /// Elementwise `sigmoid(x * scale)`.
    ///
    /// Outputs below `sqrt(F::min_positive_value())` are flushed to zero.
    /// Saturated masks otherwise fill the forward pass with subnormal
    /// products, which run an order of magnitude slower on x86.
    pub fn sigmoid_scaled(&mut self, x: Var, scale: F) -> Result<Var> {
        let floor = F::min_positive_value().sqrt();
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                let s = sigmoid(v * scale);
                if s < floor {
                    F::zero()
                } else {
                    s
                }
            })
            .collect();
        check_finite("sigmoid", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::SigmoidScaled { x, scale }))
    }

    /// Gathers rows `ids` of `table[v, d]` into an `[ids.len(), d]` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err(
                "embedding",
                format!("id {bad} out of range for table of {rows} rows"),
            ));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain {:?} bias {:?} for width {n}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let eps = F::lit(LAYER_NORM_EPS);
        let nf = F::from_usize(n).unwrap();
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) / nf;
            let var = row
                .iter()
                .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
                / nf;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        check_finite("layer_norm", &out)?;
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| gelu_parts(v).0)
            .collect();
        check_finite("gelu", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Gelu { x }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = *self
            .shape(x)
            .last()
            .ok_or_else(|| shape_err("softmax", "scalar input".into()))?;
        check_finite("softmax input", self.value(x).data())?;
        let out = softmax_rows(self.value(x).data(), cols);
        check_finite("softmax", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Softmax { x }))
    }

    /// Causal scaled-dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, d]` with rows grouped by sequence;
    /// head `h` uses columns `h*d/heads .. (h+1)*d/heads`. Scores above the
    /// diagonal receive [`CAUSAL_MASK_BIAS`] before the softmax.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.dims2(q, "attention")?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(shape_err(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        if batch == 0 || n % batch != 0 || heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("{n} rows, width {d}, batch {batch}, heads {heads}"),
            ));
        }
        let t = n / batch;
        let dh = d / heads;
        let scale = F::from_usize(dh).unwrap().sqrt().recip();
        let mask = F::lit(CAUSAL_MASK_BIAS);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![F::zero(); batch * heads * t * t];
        let mut out = vec![F::zero(); n * d];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * t * d + h * dh;
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                gemm(
                    t,
                    dh,
                    t,
                    scale,
                    qd,
                    View::rows(base, d),
                    kd,
                    View::trans(base, d),
                    F::zero(),
                    p,
                    View::rows(0, t),
                );
                for i in 0..t {
                    for j in i + 1..t {
                        p[i * t + j] = p[i * t + j] + mask;
                    }
                }
                softmax_rows_in_place(p, t);
                gemm(
                    t,
                    t,
                    dh,
                    F::one(),
                    p,
                    View::rows(0, t),
                    vd,
                    View::rows(base, d),
                    F::zero(),
                    &mut out,
                    View::rows(base, d),
                );
            }
        }
        check_finite("attention", &out)?;
        let rg = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            rg,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
        ))
    }

    /// Mean over rows of `-sum_j target[i, j] * log_softmax(logits)[i, j]`.
    ///
    /// `targets` is a full distribution per row (soft targets) and is not
    /// differentiated.
    pub fn cross_entropy_soft(&mut self, logits: Var, targets: &[F]) -> Result<Var> {
        let (m, n) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != m * n {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for logits [{m},{n}]", targets.len()),
            ));
        }
        check_finite("cross_entropy targets", targets)?;
        check_finite("cross_entropy logits", self.value(logits).data())?;
        let logp = log_softmax_rows(self.value(logits).data(), n);
        let mut total = F::zero();
        for (lp, t) in logp.iter().zip(targets) {
            if *t != F::zero() {
                total = total - *t * *lp;
            }
        }
        let loss = total / F::from_usize(m).unwrap();
        check_finite("cross_entropy", &[loss])?;
        let probs = logp.into_iter().map(|x| x.exp()).collect();
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropySoft {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over rows of `-log_softmax(logits)[i, ids[i]]`.
    ///
    /// Rows whose id is [`IGNORE_INDEX`] contribute nothing and are left out
    /// of the mean.
    pub fn cross_entropy_ids(&mut self, logits: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(logits, "cross_entropy")?;
        if ids.len() != m || ids.iter().any(|&i| i >= n && i != IGNORE_INDEX) {
            return Err(shape_err(
                "cross_entropy",
                format!("{} ids for logits [{m},{n}]", ids.len()),
            ));
        }
        let counted = ids.iter().filter(|&&i| i != IGNORE_INDEX).count();
        if counted == 0 {
            return Err(shape_err("cross_entropy", "every row is ignored".into()));
        }
        check_finite("cross_entropy logits", self.value(logits).data())?;
        let logp = log_softmax_rows(self.value(logits).data(), n);
        let mut total = F::zero();
        for (r, &i) in ids.iter().enumerate() {
            if i != IGNORE_INDEX {
                total = total - logp[r * n + i];
            }
        }
        let loss = total / F::from_usize(counted).unwrap();
        check_finite("cross_entropy", &[loss])?;
        let probs = logp.into_iter().map(|x| x.exp()).collect();
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropyIds {
                logits,
                ids: ids.to_vec(),
                probs,
                counted,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(F::zero(), |a, &v| a + v);
        check_finite("sum", &[s])?;
        let rg = self.needs(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum { x }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, F::from_usize(n).unwrap().recip())
    }


    /// Back-propagates from a single-element `loss`.
    ///
    /// Afterwards every `requires_grad` leaf reachable from `loss` holds a
    /// gradient; intermediate gradients are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &gout)?;
        }
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                check_finite("backward", g)?;
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, gout: &[F]) -> Result<()> {
        // Temporarily take the op so parent gradients can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let result = self.backward_op(idx, &op, gout);
        self.nodes[idx].op = op;
        result
    }

    fn backward_op(&mut self, idx: usize, op: &Op<F>, gout: &[F]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(a).dims2()?;
                let n = self.value(b).dims2()?.1;
                if self.needs(a) {
                    let bv = self.nodes[b.0].value.data();
                    let ga = acc(&mut self.grads, &self.nodes, a);
                    gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        gout,
                        View::rows(0, n),
                        bv,
                        View::trans(0, n),
                        F::one(),
                        ga,
                        View::rows(0, k),
                    );
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].value.data();
                    let gb = acc(&mut self.grads, &self.nodes, b);
                    gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        av,
                        View::trans(0, k),
                        gout,
                        View::rows(0, n),
                        F::one(),
                        gb,
                        View::rows(0, n),
                    );
                }
            }
            Op::Add { a, b } => {
                for p in [a, b] {
                    if self.needs(p) {
                        for (g, &d) in acc(&mut self.grads, &self.nodes, p).iter_mut().zip(gout) {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(x) {
                    for (g, &d) in acc(&mut self.grads, &self.nodes, x).iter_mut().zip(gout) {
                        *g = *g + d;
                    }
                }
                if self.needs(bias) {
                    let n = self.value(bias).len();
                    let gb = acc(&mut self.grads, &self.nodes, bias);
                    for row in gout.chunks(n) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let bv = self.nodes[b.0].value.data();
                    for ((g, &d), &o) in acc(&mut self.grads, &self.nodes, a).iter_mut().zip(gout).zip(bv) {
                        *g = *g + d * o;
                    }
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].value.data();
                    for ((g, &d), &o) in acc(&mut self.grads, &self.nodes, b).iter_mut().zip(gout).zip(av) {
                        *g = *g + d * o;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(x) {
                    for (g, &d) in acc(&mut self.grads, &self.nodes, x).iter_mut().zip(gout) {
                        *g = *g + d * c;
                    }
                }
            }
            Op::SigmoidScaled { x, scale } => {
                if self.needs(x) {
                    let y = self.nodes[idx].value.data();
                    for ((g, &d), &s) in acc(&mut self.grads, &self.nodes, x).iter_mut().zip(gout).zip(y) {
                        *g = *g + d * scale * s * (F::one() - s);
                    }
                }
            }
            Op::Embedding { table, ref ids } => {
                if self.needs(table) {
                    let d = self.value(table).dims2()?.1;
                    let gt = acc(&mut self.grads, &self.nodes, table);
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] = gt[i * d + c] + gout[r * d + c];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                ref xhat,
                ref rstd,
            } => {
                let (m, n) = self.value(x).dims2()?;
                let g = self.nodes[gain.0].value.data();
                if self.needs(gain) {
                    let gg = acc(&mut self.grads, &self.nodes, gain);
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] = gg[c] + gout[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if self.needs(bias) {
                    let gb = acc(&mut self.grads, &self.nodes, bias);
                    for row in gout.chunks(n) {
                        for (a, &d) in gb.iter_mut().zip(row) {
                            *a = *a + d;
                        }
                    }
                }
                if self.needs(x) {
                    let nf = F::from_usize(n).unwrap();
                    let gx = acc(&mut self.grads, &self.nodes, x);
                    let mut dxhat = vec![F::zero(); n];
                    for r in 0..m {
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for c in 0..n {
                            let v = gout[r * n + c] * g[c];
                            dxhat[c] = v;
                            mean_d = mean_d + v;
                            mean_dx = mean_dx + v * xhat[r * n + c];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for c in 0..n {
                            let h = xhat[r * n + c];
                            gx[r * n + c] =
                                gx[r * n + c] + rstd[r] * (dxhat[c] - mean_d - h * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.needs(x) {
                    let xv = self.nodes[x.0].value.data();
                    for ((g, &d), &v) in acc(&mut self.grads, &self.nodes, x).iter_mut().zip(gout).zip(xv) {
                        *g = *g + d * gelu_parts(v).1;
                    }
                }
            }
            Op::Softmax { x } => {
                if self.needs(x) {
                    let cols = *self.shape(x).last().unwrap();
                    let y = self.nodes[idx].value.data();
                    let gx = acc(&mut self.grads, &self.nodes, x);
                    for ((gr, dr), yr) in gx
                        .chunks_mut(cols)
                        .zip(gout.chunks(cols))
                        .zip(y.chunks(cols))
                    {
                        let dot = dr
                            .iter()
                            .zip(yr)
                            .fold(F::zero(), |a, (&d, &s)| a + d * s);
                        for ((g, &d), &s) in gr.iter_mut().zip(dr).zip(yr) {
                            *g = *g + s * (d - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                ref probs,
            } => self.attention_backward(q, k, v, batch, heads, probs, gout)?,
            Op::CrossEntropySoft {
                logits,
                ref targets,
                ref probs,
            } => {
                if self.needs(logits) {
                    let (m, n) = self.value(logits).dims2()?;
                    let scale = gout[0] / F::from_usize(m).unwrap();
                    let gl = acc(&mut self.grads, &self.nodes, logits);
                    for r in 0..m {
                        let tr = &targets[r * n..(r + 1) * n];
                        let mass = tr.iter().fold(F::zero(), |a, &t| a + t);
                        for c in 0..n {
                            let i = r * n + c;
                            gl[i] = gl[i] + scale * (probs[i] * mass - tr[c]);
                        }
                    }
                }
            }
            Op::CrossEntropyIds {
                logits,
                ref ids,
                ref probs,
                counted,
            } => {
                if self.needs(logits) {
                    let n = self.value(logits).shape()[1];
                    let scale = gout[0] / F::from_usize(counted).unwrap();
                    let gl = acc(&mut self.grads, &self.nodes, logits);
                    for (r, &i) in ids.iter().enumerate() {
                        if i == IGNORE_INDEX {
                            continue;
                        }
                        let row = &mut gl[r * n..(r + 1) * n];
                        for (g, &p) in row.iter_mut().zip(&probs[r * n..(r + 1) * n]) {
                            *g = *g + scale * p;
                        }
                        row[i] = row[i] - scale;
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(x) {
                    let d = gout[0];
                    for g in acc(&mut self.grads, &self.nodes, x).iter_mut() {
                        *g = *g + d;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: &[F],
        gout: &[F],
    ) -> Result<()> {
        let (n, d) = self.value(q).dims2()?;
        let t = n / batch;
        let dh = d / heads;
        let scale = F::from_usize(dh).unwrap().sqrt().recip();
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let mut gq = vec![F::zero(); n * d];
        let mut gk = vec![F::zero(); n * d];
        let mut gv = vec![F::zero(); n * d];
        let mut dp = vec![F::zero(); t * t];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * t * d + h * dh;
                let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                // dV = P^T dO
                gemm(
                    t,
                    t,
                    dh,
                    F::one(),
                    p,
                    View::trans(0, t),
                    gout,
                    View::rows(base, d),
                    F::one(),
                    &mut gv,
                    View::rows(base, d),
                );
                // dP = dO V^T
                gemm(
                    t,
                    dh,
                    t,
                    F::one(),
                    gout,
                    View::rows(base, d),
                    vd,
                    View::trans(base, d),
                    F::zero(),
                    &mut dp,
                    View::rows(0, t),
                );
                // dS = P * (dP - rowsum(dP * P))
                for i in 0..t {
                    let row = i * t;
                    let dot = (0..t).fold(F::zero(), |a, j| a + dp[row + j] * p[row + j]);
                    for j in 0..t {
                        dp[row + j] = p[row + j] * (dp[row + j] - dot);
                    }
                }
                gemm(
                    t,
                    t,
                    dh,
                    scale,
                    &dp,
                    View::rows(0, t),
                    kd,
                    View::rows(base, d),
                    F::one(),
                    &mut gq,
                    View::rows(base, d),
                );
                gemm(
                    t,
                    t,
                    dh,
                    scale,
                    &dp,
                    View::trans(0, t),
                    qd,
                    View::rows(base, d),
                    F::one(),
                    &mut gk,
                    View::rows(base, d),
                );
            }
        }
        for (p, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.needs(p) {
                for (a, &x) in acc(&mut self.grads, &self.nodes, p).iter_mut().zip(&g) {
                    *a = *a + x;
                }
            }
        }
        Ok(())
    }
}

fn acc<'g, F: Scalar>(grads: &'g mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> &'g mut Vec<F> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

/// Numerically stable logistic function.
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetric_pair() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_self_is_entropy() {
        let mut tape = Tape::<f64>::new();
        let p = [0.25, 0.75];
        let logits = tape.constant(t64(&[1, 2], &[0.25f64.ln(), 0.75f64.ln()]));
        let ce = tape.cross_entropy_soft(logits, &p).unwrap();
        let expected = -0.25 * 0.25f64.ln() - 0.75 * 0.75f64.ln();
        assert_abs_diff_eq!(tape.value(ce).item().unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.5623, epsilon = 1e-4);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn saturated_sigmoid_flushes_to_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0f32, -0.1, 0.0]).unwrap(), true);
        let y = tape.sigmoid_scaled(x, 100.0).unwrap();
        let v = tape.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert!(v[1] > 0.0 && v[1] < 1e-4);
        assert_eq!(v[2], 0.5);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g[0], 0.0);
        assert!((g[2] - 25.0).abs() < 1e-5);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        let y = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn shape_mismatch_is_invalid_argument() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::InvalidArgument(_))));
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, c), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_output_names_op() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[2], f32::MAX));
        match tape.add(a, a) {
            Err(Error::NumericFailure { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 2.0, 11.0]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn attention_first_position_copies_value() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_fn(&[3, 2], |i| i as f64 * 0.3));
        let k = tape.constant(Tensor::from_fn(&[3, 2], |i| 1.0 - i as f64 * 0.2));
        let v = tape.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
        let o = tape.causal_attention(q, k, v, 1, 1).unwrap();
        assert_abs_diff_eq!(tape.value(o).data()[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(o).data()[1], 1.0, epsilon = 1e-12);
    }
}
