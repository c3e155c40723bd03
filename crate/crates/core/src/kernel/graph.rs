//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Operations append nodes to a [`Graph`]; parents always precede children,
//! so walking the tape backwards from the loss visits each node once in a
//! valid reverse topological order. Gradients from multiple use sites add.

use super::tensor::{shape_err, ShapeError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bilinear {
        u: Var,
        w: Var,
        v: Var,
    },
    BilinearGrid {
        a: Var,
        w: Var,
        b: Var,
    },
    PairAdd {
        p: Var,
        q: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Stack(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SpanAttention {
        h: Var,
        upper: Var,
        lower: Var,
    },
    CrissCross {
        q: Var,
        k: Var,
        v: Var,
    },
    Sum(Var),
    Mean(Var),
    Nll {
        probs: Var,
        targets: Vec<usize>,
        weights: Option<Vec<f64>>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probabilities below this are clamped before taking the log in [`Graph::nll`].
pub const NLL_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let data = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), data.clone()).expect("gradient shape"))
    }

    pub fn data(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0)?.as_deref()
    }
}

/// Tokens covered by grid cell `(i, j)`: `i..=j` above the diagonal,
/// `j..=i` below it, `i` alone on it.
pub fn span_range(i: usize, j: usize) -> std::ops::RangeInclusive<usize> {
    i.min(j)..=i.max(j)
}

/// Cells attended to by `(i, j)`: all of row `i`, then column `j` without `(i, j)`.
pub fn criss_cross_cells(n: usize, i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n)
        .map(move |c| (i, c))
        .chain((0..n).filter(move |&r| r != i).map(move |r| (r, j)))
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn val(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// `x W + b` over the last axis of `x`; leading axes are batch axes.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, ShapeError> {
        let (xv, wv) = (self.val(x), self.val(w));
        if wv.rank() != 2 || xv.rank() == 0 || xv.last_dim() != wv.shape()[0] {
            return shape_err(format!(
                "affine input {:?} against weight {:?}",
                xv.shape(),
                wv.shape()
            ));
        }
        let (a, out) = (wv.shape()[0], wv.shape()[1]);
        if let Some(b) = b {
            if self.val(b).shape() != [out] {
                return shape_err(format!(
                    "affine bias {:?} against weight {:?}",
                    self.val(b).shape(),
                    wv.shape()
                ));
            }
        }
        let rows = xv.numel() / a;
        let mut y = vec![0.0; rows * out];
        let (xd, wd) = (xv.data(), wv.data());
        for r in 0..rows {
            let yr = &mut y[r * out..(r + 1) * out];
            if let Some(b) = b {
                yr.copy_from_slice(self.val(b).data());
            }
            for p in 0..a {
                let xp = xd[r * a + p];
                if xp == 0.0 {
                    continue;
                }
                let wr = &wd[p * out..(p + 1) * out];
                for (yc, wc) in yr.iter_mut().zip(wr) {
                    *yc += xp * wc;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let value = Tensor::new(shape, y)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Affine { x, w, b }, &parents))
    }

    /// `out[k] = sum_{p,q} u[p] W[p,k,q] v[q]`.
    pub fn bilinear(&mut self, u: Var, w: Var, v: Var) -> Result<Var, ShapeError> {
        let (uv, wv, vv) = (self.val(u), self.val(w), self.val(v));
        if uv.rank() != 1
            || vv.rank() != 1
            || wv.rank() != 3
            || wv.shape()[0] != uv.numel()
            || wv.shape()[2] != vv.numel()
        {
            return shape_err(format!(
                "bilinear {:?} x {:?} x {:?}",
                uv.shape(),
                wv.shape(),
                vv.shape()
            ));
        }
        let (p, k, q) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        let mut out = vec![0.0; k];
        for pi in 0..p {
            let up = uv.data()[pi];
            for (ki, o) in out.iter_mut().enumerate() {
                let row = &wv.data()[(pi * k + ki) * q..(pi * k + ki + 1) * q];
                let dot: f64 = row.iter().zip(vv.data()).map(|(a, b)| a * b).sum();
                *o += up * dot;
            }
        }
        let value = Tensor::vector(out);
        Ok(self.push(value, Op::Bilinear { u, w, v }, &[u, w, v]))
    }

    /// Pairwise bilinear form: `out[i,j,k] = sum_{p,q} A[i,p] W[p,k,q] B[j,q]`.
    pub fn bilinear_grid(&mut self, a: Var, w: Var, b: Var) -> Result<Var, ShapeError> {
        let (av, wv, bv) = (self.val(a), self.val(w), self.val(b));
        if av.rank() != 2
            || bv.rank() != 2
            || wv.rank() != 3
            || wv.shape()[0] != av.shape()[1]
            || wv.shape()[2] != bv.shape()[1]
        {
            return shape_err(format!(
                "bilinear grid {:?} x {:?} x {:?}",
                av.shape(),
                wv.shape(),
                bv.shape()
            ));
        }
        let (n, m) = (av.shape()[0], bv.shape()[0]);
        let k = wv.shape()[1];
        let t = bilinear_left(av, wv);
        let q = wv.shape()[2];
        let mut out = vec![0.0; n * m * k];
        for i in 0..n {
            for j in 0..m {
                let bj = &bv.data()[j * q..(j + 1) * q];
                for ki in 0..k {
                    let ti = &t[(i * k + ki) * q..(i * k + ki + 1) * q];
                    out[(i * m + j) * k + ki] = ti.iter().zip(bj).map(|(x, y)| x * y).sum();
                }
            }
        }
        let value = Tensor::new(vec![n, m, k], out)?;
        Ok(self.push(value, Op::BilinearGrid { a, w, b }, &[a, w, b]))
    }

    /// `out[i,j,:] = P[i,:] + Q[j,:]`.
    pub fn pair_add(&mut self, p: Var, q: Var) -> Result<Var, ShapeError> {
        let (pv, qv) = (self.val(p), self.val(q));
        if pv.rank() != 2 || qv.rank() != 2 || pv.shape()[1] != qv.shape()[1] {
            return shape_err(format!("pair_add {:?} and {:?}", pv.shape(), qv.shape()));
        }
        let (n, m, d) = (pv.shape()[0], qv.shape()[0], pv.shape()[1]);
        let mut out = vec![0.0; n * m * d];
        for i in 0..n {
            for j in 0..m {
                for c in 0..d {
                    out[(i * m + j) * d + c] = pv.data()[i * d + c] + qv.data()[j * d + c];
                }
            }
        }
        let value = Tensor::new(vec![n, m, d], out)?;
        Ok(self.push(value, Op::PairAdd { p, q }, &[p, q]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), ShapeError> {
        if self.val(a).shape() != self.val(b).shape() {
            return shape_err(format!(
                "{what} {:?} and {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.same_shape(a, b, "add")?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.val(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.val(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.val(x);
        let value = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| a.tanh()).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.val(x);
        let value = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| sigmoid(a)).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var, ShapeError> {
        let Some(first) = inputs.first() else {
            return shape_err("concat of nothing");
        };
        let lead = {
            let s = self.val(*first).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.val(v).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return shape_err(format!("concat {:?} onto leading {:?}", s, lead));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.val(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec()), inputs))
    }

    /// `x[..., start..start + len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, ShapeError> {
        let v = self.val(x);
        let w = v.last_dim();
        if v.rank() == 0 || start + len > w {
            return shape_err(format!("slice {start}..{} of {:?}", start + len, v.shape()));
        }
        let rows = v.numel() / w;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x, start, len }, &[x]))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var, ShapeError> {
        let Some(first) = inputs.first() else {
            return shape_err("stack of nothing");
        };
        let inner = self.val(*first).shape().to_vec();
        let mut out = Vec::with_capacity(inputs.len() * self.val(*first).numel());
        for &v in inputs {
            if self.val(v).shape() != inner.as_slice() {
                return shape_err(format!("stack {:?} with {:?}", self.val(v).shape(), inner));
            }
            out.extend_from_slice(self.val(v).data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend(inner);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Stack(inputs.to_vec()), inputs))
    }

    /// Row lookup: `out[r, :] = table[ids[r], :]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, ShapeError> {
        let t = self.val(table);
        if t.rank() != 2 {
            return shape_err(format!("gather from {:?}", t.shape()));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return shape_err(format!("row {id} of table with {rows} rows"));
            }
            out.extend_from_slice(&t.data()[id * width..(id + 1) * width]);
        }
        let value = Tensor::new(vec![ids.len(), width], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, ShapeError> {
        let v = self.val(x);
        if axis >= v.rank() {
            return shape_err(format!("softmax axis {axis} of {:?}", v.shape()));
        }
        let (outer, size, inner) = axis_split(v.shape(), axis);
        let mut out = v.data().to_vec();
        let mut buf = vec![0.0; size];
        for o in 0..outer {
            for i in 0..inner {
                for s in 0..size {
                    buf[s] = out[(o * size + s) * inner + i];
                }
                softmax_in_place(&mut buf);
                for s in 0..size {
                    out[(o * size + s) * inner + i] = buf[s];
                }
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Multiplies by a fixed mask. Callers build the mask (already scaled).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var, ShapeError> {
        let v = self.val(x);
        if mask.len() != v.numel() {
            return shape_err(format!(
                "dropout mask of {} for {:?}",
                mask.len(),
                v.shape()
            ));
        }
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Inverted dropout drawing its mask from `rng`; identity when `rate == 0`.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Var, ShapeError> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask = (0..self.val(x).numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.dropout_mask(x, mask)
    }

    /// Linear attention inside each grid cell's token span.
    ///
    /// For cell `(i, j)` the weights are a softmax of `upper[t]` (when `i < j`)
    /// or `lower[t]` (when `i > j`) over the tokens of [`span_range`], and the
    /// output is the weighted sum of `h[t]`. Diagonal cells reduce to `h[i]`.
    pub fn span_attention(&mut self, h: Var, upper: Var, lower: Var) -> Result<Var, ShapeError> {
        let hv = self.val(h);
        if hv.rank() != 2 {
            return shape_err(format!("span attention values {:?}", hv.shape()));
        }
        let (n, d) = (hv.shape()[0], hv.shape()[1]);
        let (uv, lv) = (self.val(upper), self.val(lower));
        if uv.numel() != n || lv.numel() != n {
            return shape_err(format!(
                "span attention scores {:?}/{:?} for {n} tokens",
                uv.shape(),
                lv.shape()
            ));
        }
        let mut out = vec![0.0; n * n * d];
        for i in 0..n {
            for j in 0..n {
                let weights = span_weights(uv.data(), lv.data(), i, j);
                let cell = &mut out[(i * n + j) * d..(i * n + j + 1) * d];
                for (t, a) in span_range(i, j).zip(&weights) {
                    for (o, x) in cell.iter_mut().zip(&hv.data()[t * d..(t + 1) * d]) {
                        *o += a * x;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, n, d], out)?;
        Ok(self.push(
            value,
            Op::SpanAttention { h, upper, lower },
            &[h, upper, lower],
        ))
    }

    /// Criss-cross attention: each cell attends over its row and column
    /// (`2n - 1` cells, see [`criss_cross_cells`]) with scaled dot products.
    pub fn criss_cross(&mut self, q: Var, k: Var, v: Var) -> Result<Var, ShapeError> {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        if qv.rank() != 3
            || qv.shape() != kv.shape()
            || vv.rank() != 3
            || vv.shape()[..2] != qv.shape()[..2]
            || qv.shape()[0] != qv.shape()[1]
        {
            return shape_err(format!(
                "criss-cross q {:?} k {:?} v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            ));
        }
        let n = qv.shape()[0];
        let dv = vv.shape()[2];
        let mut out = vec![0.0; n * n * dv];
        for i in 0..n {
            for j in 0..n {
                let weights = criss_cross_weights(qv, kv, i, j);
                let cell = &mut out[(i * n + j) * dv..(i * n + j + 1) * dv];
                for ((r, c), a) in criss_cross_cells(n, i, j).zip(&weights) {
                    let src = &vv.data()[(r * n + c) * dv..(r * n + c + 1) * dv];
                    for (o, x) in cell.iter_mut().zip(src) {
                        *o += a * x;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, n, dv], out)?;
        Ok(self.push(value, Op::CrissCross { q, k, v }, &[q, k, v]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.val(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean negative log-likelihood over the rows of `probs` (last axis = classes):
    /// `-(1/rows) sum_r w[t_r] ln max(p[r, t_r], NLL_FLOOR)`.
    pub fn nll(
        &mut self,
        probs: Var,
        targets: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var, ShapeError> {
        let p = self.val(probs);
        let classes = p.last_dim();
        if p.rank() == 0 || p.numel() / classes != targets.len() {
            return shape_err(format!(
                "nll over {:?} with {} targets",
                p.shape(),
                targets.len()
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return shape_err(format!("target class {bad} of {classes}"));
        }
        if let Some(w) = weights {
            if w.len() != classes {
                return shape_err(format!("{} class weights for {classes} classes", w.len()));
            }
        }
        let rows = targets.len();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[t]);
            total -= w * p.data()[r * classes + t].max(NLL_FLOOR).ln();
        }
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            value,
            Op::Nll {
                probs,
                targets: targets.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
            },
            &[probs],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, ShapeError> {
        let value = self.val(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Reverse accumulation from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, ShapeError> {
        let root = self.val(loss);
        if root.numel() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", root.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (a, o) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / a;
                self.accumulate(grads, *x, |dx| {
                    for r in 0..rows {
                        let gr = &g[r * o..(r + 1) * o];
                        for p in 0..a {
                            let wr = &wv.data()[p * o..(p + 1) * o];
                            dx[r * a + p] += gr.iter().zip(wr).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for r in 0..rows {
                        let gr = &g[r * o..(r + 1) * o];
                        for p in 0..a {
                            let xp = xv.data()[r * a + p];
                            if xp == 0.0 {
                                continue;
                            }
                            for (d, gc) in dw[p * o..(p + 1) * o].iter_mut().zip(gr) {
                                *d += xp * gc;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |db| {
                        for r in 0..rows {
                            for (d, gc) in db.iter_mut().zip(&g[r * o..(r + 1) * o]) {
                                *d += gc;
                            }
                        }
                    });
                }
            }
            Op::Bilinear { u, w, v } => {
                let (uv, wv, vv) = (self.val(*u), self.val(*w), self.val(*v));
                let (p, k, q) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let wd = wv.data();
                let at = |pi: usize, ki: usize, qi: usize| wd[(pi * k + ki) * q + qi];
                self.accumulate(grads, *u, |du| {
                    for pi in 0..p {
                        for ki in 0..k {
                            for qi in 0..q {
                                du[pi] += g[ki] * at(pi, ki, qi) * vv.data()[qi];
                            }
                        }
                    }
                });
                self.accumulate(grads, *v, |dv| {
                    for pi in 0..p {
                        for ki in 0..k {
                            for qi in 0..q {
                                dv[qi] += g[ki] * uv.data()[pi] * at(pi, ki, qi);
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for pi in 0..p {
                        for ki in 0..k {
                            for qi in 0..q {
                                dw[(pi * k + ki) * q + qi] += g[ki] * uv.data()[pi] * vv.data()[qi];
                            }
                        }
                    }
                });
            }
            Op::BilinearGrid { a, w, b } => {
                let (av, wv, bv) = (self.val(*a), self.val(*w), self.val(*b));
                let (n, m) = (av.shape()[0], bv.shape()[0]);
                let (p, k, q) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let needs_left = self.nodes[a.0].requires_grad || self.nodes[w.0].requires_grad;
                if self.nodes[b.0].requires_grad {
                    let t = bilinear_left(av, wv);
                    self.accumulate(grads, *b, |db| {
                        for i in 0..n {
                            for j in 0..m {
                                for ki in 0..k {
                                    let gv = g[(i * m + j) * k + ki];
                                    let ti = &t[(i * k + ki) * q..(i * k + ki + 1) * q];
                                    for (d, tv) in db[j * q..(j + 1) * q].iter_mut().zip(ti) {
                                        *d += gv * tv;
                                    }
                                }
                            }
                        }
                    });
                }
                if needs_left {
                    // dT[i,k,q] = sum_j G[i,j,k] B[j,q]
                    let mut dt = vec![0.0; n * k * q];
                    for i in 0..n {
                        for j in 0..m {
                            let bj = &bv.data()[j * q..(j + 1) * q];
                            for ki in 0..k {
                                let gv = g[(i * m + j) * k + ki];
                                for (d, bq) in dt[(i * k + ki) * q..(i * k + ki + 1) * q]
                                    .iter_mut()
                                    .zip(bj)
                                {
                                    *d += gv * bq;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *a, |da| {
                        for i in 0..n {
                            let dti = &dt[i * k * q..(i + 1) * k * q];
                            for pi in 0..p {
                                let wp = &wv.data()[pi * k * q..(pi + 1) * k * q];
                                da[i * p + pi] +=
                                    dti.iter().zip(wp).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                    self.accumulate(grads, *w, |dw| {
                        for i in 0..n {
                            let dti = &dt[i * k * q..(i + 1) * k * q];
                            for pi in 0..p {
                                let ap = av.data()[i * p + pi];
                                if ap == 0.0 {
                                    continue;
                                }
                                for (d, x) in dw[pi * k * q..(pi + 1) * k * q].iter_mut().zip(dti) {
                                    *d += ap * x;
                                }
                            }
                        }
                    });
                }
            }
            Op::PairAdd { p, q } => {
                let s = out.shape();
                let (n, m, d) = (s[0], s[1], s[2]);
                self.accumulate(grads, *p, |dp| {
                    for i in 0..n {
                        for j in 0..m {
                            for c in 0..d {
                                dp[i * d + c] += g[(i * m + j) * d + c];
                            }
                        }
                    }
                });
                self.accumulate(grads, *q, |dq| {
                    for i in 0..n {
                        for j in 0..m {
                            for c in 0..d {
                                dq[j * d + c] += g[(i * m + j) * d + c];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                self.accumulate(grads, *b, |db| add_into(db, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                self.accumulate(grads, *a, |da| {
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv.data()) {
                        *d += gv * y;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(av.data()) {
                        *d += gv * x;
                    }
                });
            }
            Op::Tanh(x) => self.accumulate(grads, *x, |dx| {
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(x) => self.accumulate(grads, *x, |dx| {
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y * (1.0 - y);
                }
            }),
            Op::Concat(inputs) => {
                let total = out.last_dim();
                let rows = out.numel() / total;
                let mut offset = 0;
                for &v in inputs {
                    let w = self.val(v).last_dim();
                    self.accumulate(grads, v, |dv| {
                        for r in 0..rows {
                            add_into(
                                &mut dv[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { x, start, len } => {
                let w = self.val(*x).last_dim();
                let rows = out.numel() / len;
                self.accumulate(grads, *x, |dx| {
                    for r in 0..rows {
                        add_into(
                            &mut dx[r * w + start..r * w + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::Stack(inputs) => {
                let each = out.numel() / inputs.len().max(1);
                for (k, &v) in inputs.iter().enumerate() {
                    self.accumulate(grads, v, |dv| add_into(dv, &g[k * each..(k + 1) * each]));
                }
            }
            Op::Gather { table, ids } => {
                let width = self.val(*table).shape()[1];
                self.accumulate(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(
                            &mut dt[id * width..(id + 1) * width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, size, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                self.accumulate(grads, *x, |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |s: usize| (o * size + s) * inner + i;
                            let dot: f64 = (0..size).map(|s| g[at(s)] * y[at(s)]).sum();
                            for s in 0..size {
                                dx[at(s)] += y[at(s)] * (g[at(s)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => self.accumulate(grads, *x, |dx| {
                for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }),
            Op::SpanAttention { h, upper, lower } => {
                let hv = self.val(*h);
                let (n, d) = (hv.shape()[0], hv.shape()[1]);
                let (uv, lv) = (self.val(*upper), self.val(*lower));
                let mut dh = vec![0.0; n * d];
                let mut du = vec![0.0; n];
                let mut dl = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        let gc = &g[(i * n + j) * d..(i * n + j + 1) * d];
                        let weights = span_weights(uv.data(), lv.data(), i, j);
                        let mut dalpha = Vec::with_capacity(weights.len());
                        for (t, a) in span_range(i, j).zip(&weights) {
                            let ht = &hv.data()[t * d..(t + 1) * d];
                            dalpha.push(gc.iter().zip(ht).map(|(x, y)| x * y).sum::<f64>());
                            for (dd, gv) in dh[t * d..(t + 1) * d].iter_mut().zip(gc) {
                                *dd += a * gv;
                            }
                        }
                        if i == j {
                            continue;
                        }
                        let mean: f64 = weights.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
                        let scores = if i < j { &mut du } else { &mut dl };
                        for ((t, a), da) in span_range(i, j).zip(&weights).zip(&dalpha) {
                            scores[t] += a * (da - mean);
                        }
                    }
                }
                self.accumulate(grads, *h, |x| add_into(x, &dh));
                self.accumulate(grads, *upper, |x| add_into(x, &du));
                self.accumulate(grads, *lower, |x| add_into(x, &dl));
            }
            Op::CrissCross { q, k, v } => {
                let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                let n = qv.shape()[0];
                let dq_w = qv.shape()[2];
                let dv_w = vv.shape()[2];
                let scale = 1.0 / (dq_w as f64).sqrt();
                let mut dq = vec![0.0; qv.numel()];
                let mut dk = vec![0.0; kv.numel()];
                let mut dvv = vec![0.0; vv.numel()];
                for i in 0..n {
                    for j in 0..n {
                        let cell = i * n + j;
                        let gc = &g[cell * dv_w..(cell + 1) * dv_w];
                        let weights = criss_cross_weights(qv, kv, i, j);
                        let mut dalpha = Vec::with_capacity(weights.len());
                        for ((r, c), a) in criss_cross_cells(n, i, j).zip(&weights) {
                            let src = r * n + c;
                            let vs = &vv.data()[src * dv_w..(src + 1) * dv_w];
                            dalpha.push(gc.iter().zip(vs).map(|(x, y)| x * y).sum::<f64>());
                            for (dd, gv) in dvv[src * dv_w..(src + 1) * dv_w].iter_mut().zip(gc) {
                                *dd += a * gv;
                            }
                        }
                        let mean: f64 = weights.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
                        let qc = &qv.data()[cell * dq_w..(cell + 1) * dq_w];
                        for (((r, c), a), da) in
                            criss_cross_cells(n, i, j).zip(&weights).zip(&dalpha)
                        {
                            let de = a * (da - mean) * scale;
                            let src = r * n + c;
                            let ks = &kv.data()[src * dq_w..(src + 1) * dq_w];
                            for (dd, kx) in dq[cell * dq_w..(cell + 1) * dq_w].iter_mut().zip(ks) {
                                *dd += de * kx;
                            }
                            for (dd, qx) in dk[src * dq_w..(src + 1) * dq_w].iter_mut().zip(qc) {
                                *dd += de * qx;
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, |x| add_into(x, &dq));
                self.accumulate(grads, *k, |x| add_into(x, &dk));
                self.accumulate(grads, *v, |x| add_into(x, &dvv));
            }
            Op::Sum(x) => self.accumulate(grads, *x, |dx| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(x) => {
                let scale = g[0] / self.val(*x).numel() as f64;
                self.accumulate(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += scale;
                    }
                });
            }
            Op::Nll {
                probs,
                targets,
                weights,
            } => {
                let p = self.val(*probs);
                let classes = p.last_dim();
                let rows = targets.len() as f64;
                self.accumulate(grads, *probs, |dp| {
                    for (r, &t) in targets.iter().enumerate() {
                        let pv = p.data()[r * classes + t];
                        if pv > NLL_FLOOR {
                            let w = weights.as_ref().map_or(1.0, |w| w[t]);
                            dp[r * classes + t] -= g[0] * w / (rows * pv);
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |dx| add_into(dx, g)),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[var.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(buf);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `T[i,k,q] = sum_p A[i,p] W[p,k,q]`.
fn bilinear_left(a: &Tensor, w: &Tensor) -> Vec<f64> {
    let n = a.shape()[0];
    let (p, k, q) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let mut t = vec![0.0; n * k * q];
    for i in 0..n {
        let ti = &mut t[i * k * q..(i + 1) * k * q];
        for pi in 0..p {
            let ap = a.data()[i * p + pi];
            if ap == 0.0 {
                continue;
            }
            for (d, wv) in ti.iter_mut().zip(&w.data()[pi * k * q..(pi + 1) * k * q]) {
                *d += ap * wv;
            }
        }
    }
    t
}

/// Linear-attention weights of cell `(i, j)` over [`span_range`].
pub fn span_weights(upper: &[f64], lower: &[f64], i: usize, j: usize) -> Vec<f64> {
    let scores = if i <= j { upper } else { lower };
    let mut w: Vec<f64> = span_range(i, j).map(|t| scores[t]).collect();
    softmax_in_place(&mut w);
    w
}

/// Criss-cross weights of cell `(i, j)`, ordered like [`criss_cross_cells`].
pub fn criss_cross_weights(q: &Tensor, k: &Tensor, i: usize, j: usize) -> Vec<f64> {
    let n = q.shape()[0];
    let dq = q.shape()[2];
    let scale = 1.0 / (dq as f64).sqrt();
    let cell = i * n + j;
    let qc = &q.data()[cell * dq..(cell + 1) * dq];
    let mut e: Vec<f64> = criss_cross_cells(n, i, j)
        .map(|(r, c)| {
            let ks = &k.data()[(r * n + c) * dq..(r * n + c + 1) * dq];
            qc.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale
        })
        .collect();
    softmax_in_place(&mut e);
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::gradcheck::{check_gradients, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn affine_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let w = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);

        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = g.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![3.0]));
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn affine_shape_error_names_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let w = g.constant(Tensor::zeros(&[2, 4]));
        let err = g.affine(x, w, None).unwrap_err().to_string();
        assert!(err.contains("[3]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn bilinear_examples() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::vector(vec![2.0]));
        let w = g.constant(Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap());
        let v = g.constant(Tensor::vector(vec![3.0]));
        let y = g.bilinear(u, w, v).unwrap();
        assert_eq!(g.value(y).data(), &[30.0]);

        let u = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let w = g.constant(Tensor::zeros(&[3, 3, 3]));
        let y = g.bilinear(u, w, u).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 3]);
        let bad = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.bilinear(bad, w, u).is_err());
    }

    #[test]
    fn bilinear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let (uv, wv, vv) = (
            random(&mut rng, &[d]),
            random(&mut rng, &[d, d, d]),
            random(&mut rng, &[d]),
        );
        let mut naive = vec![0.0; d];
        for (k, o) in naive.iter_mut().enumerate() {
            for p in 0..d {
                for q in 0..d {
                    *o += uv.get(&[p]) * wv.get(&[p, k, q]) * vv.get(&[q]);
                }
            }
        }
        let mut g = Graph::new();
        let (u, w, v) = (g.constant(uv), g.constant(wv), g.constant(vv));
        let y = g.bilinear(u, w, v).unwrap();
        assert_close(g.value(y).data(), &naive, 1e-12);
    }

    #[test]
    fn bilinear_grid_matches_per_pair_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (3, 4);
        let a = random(&mut rng, &[n, d]);
        let b = random(&mut rng, &[n, d]);
        let w = random(&mut rng, &[d, d, d]);
        let mut g = Graph::new();
        let (av, wv, bv) = (
            g.constant(a.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let grid = g.bilinear_grid(av, wv, bv).unwrap();
        for i in 0..n {
            for j in 0..n {
                let ui = g.constant(Tensor::vector(a.data()[i * d..(i + 1) * d].to_vec()));
                let vj = g.constant(Tensor::vector(b.data()[j * d..(j + 1) * d].to_vec()));
                let y = g.bilinear(ui, wv, vj).unwrap();
                let cell = &g.value(grid).data()[(i * n + j) * d..(i * n + j + 1) * d];
                assert_close(cell, g.value(y).data(), 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_middle_axis_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(random(&mut rng, &[2, 3, 4]));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|k| v.get(&[o, k, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_sum_and_diamond() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.data(x).unwrap(), &[1.0, 1.0, 1.0]);

        // y = x * x + x -> dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.data(x).unwrap(), &[7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let q = g.leaf(random(&mut rng, &[3, 3, 2]), true);
        let k = g.leaf(random(&mut rng, &[3, 3, 2]), true);
        let v = g.leaf(random(&mut rng, &[3, 3, 4]), true);
        let y = g.criss_cross(q, k, v).unwrap();
        let t = g.tanh(y);
        let s = g.sum(t);
        let a = g.backward(s).unwrap();
        let b = g.backward(s).unwrap();
        for var in [q, k, v] {
            let (x, y) = (a.data(var).unwrap(), b.data(var).unwrap());
            assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0]), true);
        let c = g.constant(Tensor::vector(vec![2.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.data(c).is_none());
        assert_eq!(grads.data(x).unwrap(), &[2.0]);
    }

    #[test]
    fn span_attention_diagonal_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d) = (4, 3);
        let h = random(&mut rng, &[n, d]);
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let up = g.constant(Tensor::zeros(&[n, 1]));
        let lo = g.constant(random(&mut rng, &[n, 1]));
        let out = g.span_attention(hv, up, lo).unwrap();
        let ov = g.value(out);
        for i in 0..n {
            for c in 0..d {
                assert_eq!(ov.get(&[i, i, c]), h.get(&[i, c]));
            }
        }
        // zero upper scores: plain mean over i..=j
        for c in 0..d {
            let mean = (1..=3).map(|t| h.get(&[t, c])).sum::<f64>() / 3.0;
            assert!((ov.get(&[1, 3, c]) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let l = g.nll(p, &[1, 0], None).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let u = g.constant(Tensor::new(vec![2, 4], vec![0.25; 8]).unwrap());
        let l = g.nll(u, &[3, 0], None).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
        assert!(g.nll(u, &[4, 0], None).is_err());
        let z = g.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let l = g.nll(z, &[0], None).unwrap();
        assert!((g.value(l).item() + NLL_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn dropout_keeps_expectation_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1000], |_| 1.0));
        let same = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(same, x);
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|&a| a == 0.0 || a == 2.0));
        let kept = v.iter().filter(|&&a| a > 0.0).count();
        assert!((400..600).contains(&kept), "{kept}");
    }

    // Finite-difference checks of every differentiable op.

    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let report =
            check_gradients::<ShapeError>(&inputs, &GradCheckConfig::default(), |g, vars| {
                Ok(f(g, vars))
            })
            .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    /// Reduces to a scalar with non-uniform weights so gradients are not trivially equal.
    fn weighted_sum(g: &mut Graph, x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        let w = g.constant(Tensor::from_fn(&shape, |k| {
            ((k * 7 % 5) as f64 - 1.7) / 3.0
        }));
        let y = g.mul(x, w).unwrap();
        g.sum(y)
    }

    #[test]
    fn gradcheck_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        check(
            vec![
                random(&mut rng, &[2, 3, 4]),
                random(&mut rng, &[4, 5]),
                random(&mut rng, &[5]),
            ],
            |g, v| {
                let y = g.affine(v[0], v[1], Some(v[2])).unwrap();
                weighted_sum(g, y)
            },
        );
        // sum(affine) with respect to W
        check(
            vec![
                random(&mut rng, &[3, 4]),
                random(&mut rng, &[4, 2]),
                random(&mut rng, &[2]),
            ],
            |g, v| {
                let y = g.affine(v[0], v[1], Some(v[2])).unwrap();
                g.sum(y)
            },
        );
    }

    #[test]
    fn gradcheck_bilinear_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        check(
            vec![
                random(&mut rng, &[3]),
                random(&mut rng, &[3, 3, 3]),
                random(&mut rng, &[3]),
            ],
            |g, v| {
                let y = g.bilinear(v[0], v[1], v[2]).unwrap();
                weighted_sum(g, y)
            },
        );
        check(
            vec![
                random(&mut rng, &[3, 2]),
                random(&mut rng, &[2, 4, 3]),
                random(&mut rng, &[2, 3]),
            ],
            |g, v| {
                let y = g.bilinear_grid(v[0], v[1], v[2]).unwrap();
                weighted_sum(g, y)
            },
        );
        check(
            vec![random(&mut rng, &[3, 2]), random(&mut rng, &[4, 2])],
            |g, v| {
                let y = g.pair_add(v[0], v[1]).unwrap();
                weighted_sum(g, y)
            },
        );
    }

    #[test]
    fn gradcheck_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        check(
            vec![random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3])],
            |g, v| {
                let a = g.add(v[0], v[1]).unwrap();
                let m = g.mul(a, v[1]).unwrap();
                let t = g.tanh(m);
                let s = g.sigmoid(t);
                weighted_sum(g, s)
            },
        );
    }

    #[test]
    fn gradcheck_shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        check(
            vec![random(&mut rng, &[2, 3]), random(&mut rng, &[2, 2])],
            |g, v| {
                let c = g.concat(&[v[0], v[1]]).unwrap();
                let s = g.slice_last(c, 1, 3).unwrap();
                let r = g.reshape(s, vec![6]).unwrap();
                let t = g.tanh(r);
                weighted_sum(g, t)
            },
        );
        check(
            vec![random(&mut rng, &[3]), random(&mut rng, &[3])],
            |g, v| {
                let s = g.stack(&[v[0], v[1], v[0]]).unwrap();
                weighted_sum(g, s)
            },
        );
        check(vec![random(&mut rng, &[4, 3])], |g, v| {
            let s = g.gather_rows(v[0], &[2, 0, 2]).unwrap();
            weighted_sum(g, s)
        });
    }

    #[test]
    fn gradcheck_softmax_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        check(vec![random(&mut rng, &[2, 3, 4])], |g, v| {
            let s = g.softmax(v[0], 2).unwrap();
            weighted_sum(g, s)
        });
        check(vec![random(&mut rng, &[2, 3, 4])], |g, v| {
            let s = g.softmax(v[0], 1).unwrap();
            let t = g.tanh(s);
            g.mean(t)
        });
    }

    #[test]
    fn gradcheck_dropout_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        check(vec![random(&mut rng, &[5])], |g, v| {
            let y = g.dropout_mask(v[0], vec![2.0, 0.0, 2.0, 2.0, 0.0]).unwrap();
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_span_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        check(
            vec![
                random(&mut rng, &[4, 3]),
                random(&mut rng, &[4, 1]),
                random(&mut rng, &[4, 1]),
            ],
            |g, v| {
                let y = g.span_attention(v[0], v[1], v[2]).unwrap();
                weighted_sum(g, y)
            },
        );
    }

    #[test]
    fn gradcheck_criss_cross() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        check(
            vec![
                random(&mut rng, &[3, 3, 2]),
                random(&mut rng, &[3, 3, 2]),
                random(&mut rng, &[3, 3, 3]),
            ],
            |g, v| {
                let y = g.criss_cross(v[0], v[1], v[2]).unwrap();
                weighted_sum(g, y)
            },
        );
    }

    #[test]
    fn gradcheck_nll_through_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        check(vec![random(&mut rng, &[3, 3, 4])], |g, v| {
            let p = g.softmax(v[0], 2).unwrap();
            g.nll(p, &[0, 1, 2, 3, 0, 1, 2, 3, 0], Some(&[1.0, 2.0, 0.5, 1.5]))
                .unwrap()
        });
    }
}
