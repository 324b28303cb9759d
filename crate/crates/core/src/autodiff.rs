//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value; nodes that depend on a
//! gradient-requiring leaf also hold a backward rule. Because nodes are only
//! ever appended, the tape is already in topological order and `backward`
//! walks it once in reverse.

use crate::error::{EksError, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward rule.
pub struct BackwardCtx<'a> {
    pub grad_out: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: &'a [&'a Tensor],
    /// `needs[i]` is false when input `i` has no path to a gradient leaf.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> EksError {
    EksError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            requires_grad,
            inputs: vec![],
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    /// Accumulated gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Records an operation. `backward` is dropped when no input needs a gradient.
    pub fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var],
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(EksError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates d(loss)/d(node) back to every gradient-requiring leaf.
    /// Leaf gradients add onto whatever earlier calls left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(EksError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Ok(());
        }
        let n = self.nodes.len();
        self.grads.resize_with(n, || None);
        let mut pending: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::ones(loss_node.value.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                if node.requires_grad {
                    match &mut self.grads[i] {
                        Some(acc) => acc.axpy(1.0, &g)?,
                        slot => *slot = Some(g),
                    }
                }
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let ctx = BackwardCtx {
                grad_out: &g,
                output: &node.value,
                inputs: &inputs,
                needs: &needs,
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(
                input_grads.len(),
                node.inputs.len(),
                "backward arity of {}",
                node.op
            );
            for (&j, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                if !ig.is_finite() {
                    return Err(EksError::NonFinite { op: node.op });
                }
                match &mut pending[j] {
                    Some(acc) => acc.axpy(1.0, &ig)?,
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", out, &[a, b], |c| {
            vec![Some(c.grad_out.clone()), Some(c.grad_out.clone())]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("sub", out, &[a, b], |c| {
            let neg = Tensor::from_fn(c.grad_out.shape(), |i| -c.grad_out.data()[i]);
            vec![Some(c.grad_out.clone()), Some(neg)]
        })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", out, &[a, b], |c| {
            let g = c.grad_out.data();
            let (x, y) = (c.inputs[0], c.inputs[1]);
            let ga = c.needs[0].then(|| Tensor::from_fn(x.shape(), |i| g[i] * y.data()[i]));
            let gb = c.needs[1].then(|| Tensor::from_fn(y.shape(), |i| g[i] * x.data()[i]));
            vec![ga, gb]
        })
    }

    /// Multiplication by a scalar constant (the only broadcasting supported).
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] * s);
        self.push("scale", out, &[a], move |c| {
            vec![Some(Tensor::from_fn(c.grad_out.shape(), |i| {
                c.grad_out.data()[i] * s
            }))]
        })
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] + s);
        self.push("add_scalar", out, &[a], |c| vec![Some(c.grad_out.clone())])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = ta.matmul(tb)?;
        self.push("matmul", out, &[a, b], move |c| {
            let g = c.grad_out.data();
            let ga = c.needs[0].then(|| {
                // dA = G · Bᵀ
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g, false, c.inputs[1].data(), true, &mut d, false);
                Tensor::new(vec![m, k], d).unwrap()
            });
            let gb = c.needs[1].then(|| {
                // dB = Aᵀ · G
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, c.inputs[0].data(), true, g, false, &mut d, false);
                Tensor::new(vec![k, n], d).unwrap()
            });
            vec![ga, gb]
        })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(EksError::InvalidShape {
                op: "transpose",
                msg: format!("expected rank 2, got {:?}", ta.shape()),
            });
        }
        let (r, cols) = (ta.shape()[0], ta.shape()[1]);
        let out = Tensor::from_fn(&[cols, r], |i| ta.data()[(i % r) * cols + i / r]);
        self.push("transpose", out, &[a], move |c| {
            let g = c.grad_out.data();
            vec![Some(Tensor::from_fn(&[r, cols], |i| {
                g[(i % cols) * r + i / cols]
            }))]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.reshape(shape)?;
        let orig = ta.shape().to_vec();
        self.push("reshape", out, &[a], move |c| {
            vec![Some(c.grad_out.reshape(&orig).unwrap())]
        })
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| EksError::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        })?);
        if axis >= first.rank() {
            return Err(EksError::InvalidShape {
                op: "concat",
                msg: format!("axis {axis} out of range for {:?}", first.shape()),
            });
        }
        let base = first.shape().to_vec();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let compatible = t.rank() == base.len()
                && t.shape()
                    .iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", first, t));
            }
            sizes.push(t.shape()[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &s) in parts.iter().zip(&sizes) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, parts, move |c| {
            let g = c.grad_out.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for (idx, &s) in sizes.iter().enumerate() {
                if c.needs[idx] {
                    let mut d = Vec::with_capacity(outer * s * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + s * inner]);
                    }
                    grads.push(Some(
                        Tensor::new(c.inputs[idx].shape().to_vec(), d).unwrap(),
                    ));
                } else {
                    grads.push(None);
                }
                offset += s;
            }
            grads
        })
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() || start >= end || end > ta.shape()[axis] {
            return Err(EksError::InvalidShape {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of {:?}", ta.shape()),
            });
        }
        let shape = ta.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let s = (o * len + start) * inner;
            data.extend_from_slice(&ta.data()[s..s + width * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = width;
        let out = Tensor::new(out_shape, data)?;
        self.push("slice", out, &[a], move |c| {
            let mut d = Tensor::zeros(&shape);
            let g = c.grad_out.data();
            for o in 0..outer {
                let s = (o * len + start) * inner;
                d.data_mut()[s..s + width * inner]
                    .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
            }
            vec![Some(d)]
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, &[a], |c| {
            vec![Some(Tensor::full(c.inputs[0].shape(), c.grad_out.item()))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Row sums of an n×m matrix, giving a length-n vector.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (n, m) = rows_cols("sum_rows", ta)?;
        let out = Tensor::from_fn(&[n], |i| ta.data()[i * m..(i + 1) * m].iter().sum());
        self.push("sum_rows", out, &[a], move |c| {
            let g = c.grad_out.data();
            vec![Some(Tensor::from_fn(&[n, m], |i| g[i / m]))]
        })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i].max(0.0));
        self.push("relu", out, &[a], |c| {
            let x = c.inputs[0].data();
            let g = c.grad_out.data();
            vec![Some(Tensor::from_fn(c.grad_out.shape(), |i| {
                if x[i] > 0.0 {
                    g[i]
                } else {
                    0.0
                }
            }))]
        })
    }

    /// `x[n, m] + b[m]` row by row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (n, m) = rows_cols("add_row_bias", tx)?;
        if tb.shape() != [m] {
            return Err(mismatch("add_row_bias", tx, tb));
        }
        let out = Tensor::from_fn(&[n, m], |i| tx.data()[i] + tb.data()[i % m]);
        self.push("add_row_bias", out, &[x, b], move |c| {
            let g = c.grad_out.data();
            let gb = c.needs[1].then(|| {
                let mut d = vec![0.0; m];
                for row in g.chunks_exact(m) {
                    for (acc, v) in d.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::new(vec![m], d).unwrap()
            });
            vec![Some(c.grad_out.clone()), gb]
        })
    }

    /// `x[N, C, H, W] + b[C]` per channel.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() != 4 || tb.shape() != [tx.shape()[1]] {
            return Err(mismatch("add_channel_bias", tx, tb));
        }
        let ch = tx.shape()[1];
        let plane = tx.shape()[2] * tx.shape()[3];
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + tb.data()[(i / plane) % ch]);
        self.push("add_channel_bias", out, &[x, b], move |c| {
            let g = c.grad_out.data();
            let gb = c.needs[1].then(|| {
                let mut d = vec![0.0; ch];
                for (p, chunk) in g.chunks_exact(plane).enumerate() {
                    d[p % ch] += chunk.iter().sum::<f64>();
                }
                Tensor::new(vec![ch], d).unwrap()
            });
            vec![Some(c.grad_out.clone()), gb]
        })
    }

    /// Mean over the spatial dimensions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(EksError::InvalidShape {
                op: "global_avg_pool",
                msg: format!("expected rank 4, got {:?}", tx.shape()),
            });
        }
        let shape = tx.shape().to_vec();
        let plane = shape[2] * shape[3];
        let inv = 1.0 / plane as f64;
        let out = Tensor::from_fn(&[shape[0], shape[1]], |i| {
            tx.data()[i * plane..(i + 1) * plane].iter().sum::<f64>() * inv
        });
        self.push("global_avg_pool", out, &[x], move |c| {
            let g = c.grad_out.data();
            vec![Some(Tensor::from_fn(&shape, |i| g[i / plane] * inv))]
        })
    }

    /// Row-wise `softmax(x / alpha)`.
    pub fn softmax_rows(&mut self, x: Var, alpha: f64) -> Result<Var> {
        check_temperature(alpha)?;
        let tx = self.value(x);
        let (n, m) = rows_cols("softmax_rows", tx)?;
        let mut out = vec![0.0; n * m];
        for (src, dst) in tx.data().chunks_exact(m).zip(out.chunks_exact_mut(m)) {
            softmax_into(src, alpha, dst);
        }
        let out = Tensor::new(vec![n, m], out)?;
        self.push("softmax_rows", out, &[x], move |c| {
            // dx = p ⊙ (g − Σ g⊙p) / alpha
            let p = c.output.data();
            let g = c.grad_out.data();
            let mut d = vec![0.0; n * m];
            for r in 0..n {
                let row = r * m..(r + 1) * m;
                let dot: f64 = g[row.clone()]
                    .iter()
                    .zip(&p[row.clone()])
                    .map(|(a, b)| a * b)
                    .sum();
                for j in row {
                    d[j] = p[j] * (g[j] - dot) / alpha;
                }
            }
            vec![Some(Tensor::new(vec![n, m], d).unwrap())]
        })
    }

    /// Row-wise `log_softmax(x / alpha)`.
    pub fn log_softmax_rows(&mut self, x: Var, alpha: f64) -> Result<Var> {
        check_temperature(alpha)?;
        let tx = self.value(x);
        let (n, m) = rows_cols("log_softmax_rows", tx)?;
        let mut out = vec![0.0; n * m];
        for (src, dst) in tx.data().chunks_exact(m).zip(out.chunks_exact_mut(m)) {
            log_softmax_into(src, alpha, dst);
        }
        let out = Tensor::new(vec![n, m], out)?;
        self.push("log_softmax_rows", out, &[x], move |c| {
            // dx = (g − softmax · Σ g) / alpha
            let lp = c.output.data();
            let g = c.grad_out.data();
            let mut d = vec![0.0; n * m];
            for r in 0..n {
                let row = r * m..(r + 1) * m;
                let gs: f64 = g[row.clone()].iter().sum();
                for j in row {
                    d[j] = (g[j] - lp[j].exp() * gs) / alpha;
                }
            }
            vec![Some(Tensor::new(vec![n, m], d).unwrap())]
        })
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = rows_cols("pick", tx)?;
        if idx.len() != n || idx.iter().any(|&j| j >= m) {
            return Err(EksError::InvalidShape {
                op: "pick",
                msg: format!("indices {:?} do not fit {:?}", idx, tx.shape()),
            });
        }
        let out = Tensor::from_fn(&[n], |i| tx.data()[i * m + idx[i]]);
        let idx = idx.to_vec();
        self.push("pick", out, &[x], move |c| {
            let mut d = Tensor::zeros(&[n, m]);
            for (i, &j) in idx.iter().enumerate() {
                d.data_mut()[i * m + j] = c.grad_out.data()[i];
            }
            vec![Some(d)]
        })
    }

    /// Selects rows (first-axis slices) by index; repeated indices accumulate in backward.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() == 0 || idx.iter().any(|&j| j >= tx.shape()[0]) {
            return Err(EksError::InvalidShape {
                op: "gather_rows",
                msg: format!("indices {:?} do not fit {:?}", idx, tx.shape()),
            });
        }
        let src_shape = tx.shape().to_vec();
        let row: usize = src_shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &j in idx {
            data.extend_from_slice(&tx.data()[j * row..(j + 1) * row]);
        }
        let mut shape = src_shape.clone();
        shape[0] = idx.len();
        let out = Tensor::new(shape, data)?;
        let idx = idx.to_vec();
        self.push("gather_rows", out, &[x], move |c| {
            let mut d = Tensor::zeros(&src_shape);
            let g = c.grad_out.data();
            for (i, &j) in idx.iter().enumerate() {
                for (acc, v) in d.data_mut()[j * row..(j + 1) * row]
                    .iter_mut()
                    .zip(&g[i * row..(i + 1) * row])
                {
                    *acc += v;
                }
            }
            vec![Some(d)]
        })
    }
}

fn rows_cols(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, m] => Ok((*n, *m)),
        s => Err(EksError::InvalidShape {
            op,
            msg: format!("expected a matrix, got {s:?}"),
        }),
    }
}

pub(crate) fn check_temperature(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha > 0.0 {
        Ok(())
    } else {
        Err(EksError::InvalidArgument(format!(
            "temperature must be > 0, got {alpha}"
        )))
    }
}

/// Max-shifted `softmax(x / alpha)`.
pub(crate) fn softmax_into(x: &[f64], alpha: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = ((v - max) / alpha).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn log_softmax_into(x: &[f64], alpha: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x
        .iter()
        .map(|v| ((v - max) / alpha).exp())
        .sum::<f64>()
        .ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max) / alpha - lse;
    }
}
