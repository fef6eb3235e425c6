//! Dense row-major matrices and a small tape-based reverse-mode autodiff
//! graph. Everything is f64 and two-dimensional; vectors are 1-row matrices.
//!
//! The graph is rebuilt per forward pass. Frozen model weights enter as
//! constants, trainable weights as leaves; `Graph::backward` walks the tape
//! in reverse and returns a gradient per node id.

use std::rc::Rc;

use rand::{Rng, RngExt};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Gaussian init, mean 0 and the given standard deviation.
    pub fn randn(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(gaussian(rng) * std);
        }
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    /// C = A · B
    pub fn matmul_raw(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// C = A · Bᵀ
    pub fn matmul_nt_raw(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_nt shape mismatch");
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let brow = other.row(j);
                let mut s = 0.0;
                for (a, b) in arow.iter().zip(brow) {
                    s += a * b;
                }
                out.data[i * other.rows + j] = s;
            }
        }
        out
    }

    /// C = Aᵀ · B
    pub fn matmul_tn_raw(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "matmul_tn shape mismatch");
        let mut out = Tensor::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, a) in arow.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }
}

/// Box–Muller, so we only depend on the uniform source.
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Node id inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type GradFn = Box<dyn Fn(&Tensor, &mut [Tensor])>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a leaf, zeros if the leaf never influenced the loss.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.0, shape.1),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, grad_fn: Option<GradFn>) -> Var {
        let requires_grad =
            grad_fn.is_some() && parents.iter().any(|&p| self.nodes[p].requires_grad);
        let grad_fn = if requires_grad { grad_fn } else { None };
        self.nodes.push(Node {
            value: Rc::new(value),
            parents,
            grad_fn,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients are collected for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: vec![],
            grad_fn: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: vec![],
            grad_fn: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let mut out = (*ta).clone();
        out.add_assign(&tb);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|up, parents| {
                parents[0].add_assign(up);
                parents[1].add_assign(up);
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|up, parents| {
                parents[0].add_assign(up);
                for (g, u) in parents[1].data_mut().iter_mut().zip(up.data()) {
                    *g -= u;
                }
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let (ca, cb) = (Rc::clone(&ta), Rc::clone(&tb));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |up, parents| {
                for ((g, u), y) in parents[0].data_mut().iter_mut().zip(up.data()).zip(cb.data()) {
                    *g += u * y;
                }
                for ((g, u), x) in parents[1].data_mut().iter_mut().zip(up.data()).zip(ca.data()) {
                    *g += u * x;
                }
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.rc(a);
        let out = ta.map(|v| v * c);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |up, parents| {
                for (g, u) in parents[0].data_mut().iter_mut().zip(up.data()) {
                    *g += u * c;
                }
            })),
        )
    }

    /// `a` is n×d, `bias` is 1×d; adds the bias to every row.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(bias));
        assert_eq!(tb.rows(), 1, "bias must be a row vector");
        assert_eq!(ta.cols(), tb.cols(), "bias width mismatch");
        let mut out = (*ta).clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tb.row(0)) {
                *o += b;
            }
        }
        self.push(
            out,
            vec![a.0, bias.0],
            Some(Box::new(|up, parents| {
                parents[0].add_assign(up);
                let cols = up.cols();
                for r in 0..up.rows() {
                    for c in 0..cols {
                        let v = up.get(r, c);
                        let cur = parents[1].get(0, c);
                        parents[1].set(0, c, cur + v);
                    }
                }
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        let out = ta.matmul_raw(&tb);
        let (ca, cb) = (Rc::clone(&ta), Rc::clone(&tb));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |up, parents| {
                parents[0].add_assign(&up.matmul_nt_raw(&cb));
                parents[1].add_assign(&ca.matmul_tn_raw(up));
            })),
        )
    }

    /// A · Bᵀ, used for attention scores and unembedding.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        let out = ta.matmul_nt_raw(&tb);
        let (ca, cb) = (Rc::clone(&ta), Rc::clone(&tb));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |up, parents| {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                parents[0].add_assign(&up.matmul_raw(&cb));
                parents[1].add_assign(&up.matmul_tn_raw(&ca));
            })),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let mut out = Tensor::zeros(ta.rows(), ta.cols());
        for r in 0..ta.rows() {
            softmax_into(ta.row(r), out.row_mut(r));
        }
        let cy = Rc::new(out.clone());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |up, parents| {
                for r in 0..up.rows() {
                    let yrow = cy.row(r);
                    let urow = up.row(r);
                    let dot: f64 = yrow.iter().zip(urow).map(|(y, u)| y * u).sum();
                    for (c, g) in parents[0].row_mut(r).iter_mut().enumerate() {
                        *g += yrow[c] * (urow[c] - dot);
                    }
                }
            })),
        )
    }

    /// Layer normalization applied independently to every row, then an
    /// elementwise affine with `gamma`/`beta` (both 1×d).
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (tx, tg, tb) = (self.rc(x), self.rc(gamma), self.rc(beta));
        let d = tx.cols();
        assert_eq!(tg.cols(), d);
        assert_eq!(tb.cols(), d);
        let mut normalized = Tensor::zeros(tx.rows(), d);
        let mut inv_std = vec![0.0; tx.rows()];
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in normalized.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let mut out = Tensor::zeros(tx.rows(), d);
        for r in 0..tx.rows() {
            for c in 0..d {
                out.set(r, c, normalized.get(r, c) * tg.get(0, c) + tb.get(0, c));
            }
        }
        let cn = Rc::new(normalized);
        let cg = Rc::clone(&tg);
        self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |up, parents| {
                let d = up.cols();
                for r in 0..up.rows() {
                    let xhat = cn.row(r);
                    let urow = up.row(r);
                    // dgamma, dbeta
                    for c in 0..d {
                        let g = parents[1].get(0, c);
                        parents[1].set(0, c, g + urow[c] * xhat[c]);
                        let b = parents[2].get(0, c);
                        parents[2].set(0, c, b + urow[c]);
                    }
                    // dx via the standard layernorm backward
                    let gvec: Vec<f64> = (0..d).map(|c| urow[c] * cg.get(0, c)).collect();
                    let mean_g = gvec.iter().sum::<f64>() / d as f64;
                    let mean_gx = gvec
                        .iter()
                        .zip(xhat)
                        .map(|(g, xh)| g * xh)
                        .sum::<f64>()
                        / d as f64;
                    let is = inv_std[r];
                    for c in 0..d {
                        let dx = is * (gvec[c] - mean_g - xhat[c] * mean_gx);
                        let cur = parents[0].get(r, c);
                        parents[0].set(r, c, cur + dx);
                    }
                }
            })),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let out = ta.map(gelu_scalar);
        let ca = Rc::clone(&ta);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |up, parents| {
                for ((g, u), x) in parents[0].data_mut().iter_mut().zip(up.data()).zip(ca.data()) {
                    *g += u * gelu_grad_scalar(*x);
                }
            })),
        )
    }

    /// Mean over rows: n×d → 1×d.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let n = ta.rows() as f64;
        let mut out = Tensor::zeros(1, ta.cols());
        for r in 0..ta.rows() {
            for (o, v) in out.row_mut(0).iter_mut().zip(ta.row(r)) {
                *o += v / n;
            }
        }
        let rows = ta.rows();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |up, parents| {
                for r in 0..rows {
                    for (g, u) in parents[0].row_mut(r).iter_mut().zip(up.row(0)) {
                        *g += u / rows as f64;
                    }
                }
            })),
        )
    }

    /// Gather rows by index (duplicates allowed); backward scatter-adds.
    pub fn select_rows(&mut self, a: Var, ids: &[usize]) -> Var {
        let ta = self.rc(a);
        let mut out = Tensor::zeros(ids.len(), ta.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(ta.row(id));
        }
        let ids = ids.to_vec();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |up, parents| {
                for (r, &id) in ids.iter().enumerate() {
                    for (g, u) in parents[0].row_mut(id).iter_mut().zip(up.row(r)) {
                        *g += u;
                    }
                }
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.rc(a);
        assert!(start + len <= ta.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(ta.rows(), len);
        for r in 0..ta.rows() {
            out.row_mut(r).copy_from_slice(&ta.row(r)[start..start + len]);
        }
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |up, parents| {
                for r in 0..up.rows() {
                    for (c, u) in up.row(r).iter().enumerate() {
                        let cur = parents[0].get(r, start + c);
                        parents[0].set(r, start + c, cur + u);
                    }
                }
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tensors: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.rc(p)).collect();
        let cols = tensors[0].cols();
        let total: usize = tensors.iter().map(|t| t.rows()).sum();
        let mut out = Tensor::zeros(total, cols);
        let mut r = 0;
        for t in &tensors {
            assert_eq!(t.cols(), cols, "concat_rows width mismatch");
            for i in 0..t.rows() {
                out.row_mut(r).copy_from_slice(t.row(i));
                r += 1;
            }
        }
        let row_counts: Vec<usize> = tensors.iter().map(|t| t.rows()).collect();
        self.push(
            out,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |up, parents| {
                let mut r = 0;
                for (pi, &n) in row_counts.iter().enumerate() {
                    for i in 0..n {
                        for (g, u) in parents[pi].row_mut(i).iter_mut().zip(up.row(r)) {
                            *g += u;
                        }
                        r += 1;
                    }
                }
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tensors: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.rc(p)).collect();
        let rows = tensors[0].rows();
        let total: usize = tensors.iter().map(|t| t.cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        for r in 0..rows {
            let mut c = 0;
            for t in &tensors {
                assert_eq!(t.rows(), rows, "concat_cols height mismatch");
                out.row_mut(r)[c..c + t.cols()].copy_from_slice(t.row(r));
                c += t.cols();
            }
        }
        let col_counts: Vec<usize> = tensors.iter().map(|t| t.cols()).collect();
        self.push(
            out,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |up, parents| {
                for r in 0..up.rows() {
                    let mut c = 0;
                    for (pi, &w) in col_counts.iter().enumerate() {
                        for (g, u) in parents[pi].row_mut(r).iter_mut().zip(&up.row(r)[c..c + w]) {
                            *g += u;
                        }
                        c += w;
                    }
                }
            })),
        )
    }

    /// Mean next-token cross entropy: logits row `i` is scored against
    /// `targets[i]`. Returns a scalar.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Var {
        let tl = self.rc(logits);
        assert_eq!(tl.rows(), targets.len(), "one target per logit row");
        assert!(!targets.is_empty(), "cross entropy over empty sequence");
        let n = targets.len() as f64;
        let mut probs = Tensor::zeros(tl.rows(), tl.cols());
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            softmax_into(tl.row(r), probs.row_mut(r));
            loss -= probs.get(r, t).max(f64::MIN_POSITIVE).ln();
        }
        loss /= n;
        let targets = targets.to_vec();
        let cp = Rc::new(probs);
        self.push(
            Tensor::scalar(loss),
            vec![logits.0],
            Some(Box::new(move |up, parents| {
                let u = up.item();
                for (r, &t) in targets.iter().enumerate() {
                    let prow = cp.row(r);
                    for (c, g) in parents[0].row_mut(r).iter_mut().enumerate() {
                        let indicator = if c == t { 1.0 } else { 0.0 };
                        *g += u * (prow[c] - indicator) / n;
                    }
                }
            })),
        )
    }

    /// Mean of (1 − cosine) over matched row pairs. Returns a scalar.
    pub fn cosine_distance_mean(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        assert_eq!(ta.shape(), tb.shape(), "cosine shape mismatch");
        let n = ta.rows() as f64;
        let mut loss = 0.0;
        for r in 0..ta.rows() {
            loss += 1.0 - cosine(ta.row(r), tb.row(r));
        }
        loss /= n;
        let (ca, cb) = (Rc::clone(&ta), Rc::clone(&tb));
        self.push(
            Tensor::scalar(loss),
            vec![a.0, b.0],
            Some(Box::new(move |up, parents| {
                let u = up.item();
                for r in 0..ca.rows() {
                    let (x, y) = (ca.row(r), cb.row(r));
                    let nx = norm(x).max(1e-12);
                    let ny = norm(y).max(1e-12);
                    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    for c in 0..x.len() {
                        // d(1-cos)/dx = -(y/(|x||y|) - dot*x/(|x|^3 |y|))
                        let dx = -(y[c] / (nx * ny) - dot * x[c] / (nx * nx * nx * ny));
                        let cur = parents[0].get(r, c);
                        parents[0].set(r, c, cur + u * dx / n);
                        let dy = -(x[c] / (nx * ny) - dot * y[c] / (ny * ny * ny * nx));
                        let cur = parents[1].get(r, c);
                        parents[1].set(r, c, cur + u * dy / n);
                    }
                }
            })),
        )
    }

    /// Mean squared difference over all elements. Returns a scalar.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let n = ta.len() as f64;
        let loss = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let (ca, cb) = (Rc::clone(&ta), Rc::clone(&tb));
        self.push(
            Tensor::scalar(loss),
            vec![a.0, b.0],
            Some(Box::new(move |up, parents| {
                let u = up.item();
                for (i, (x, y)) in ca.data().iter().zip(cb.data()).enumerate() {
                    let d = 2.0 * (x - y) / n;
                    parents[0].data_mut()[i] += u * d;
                    parents[1].data_mut()[i] -= u * d;
                }
            })),
        )
    }

    pub fn add_scalars(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty());
        let mut total = 0.0;
        for &t in terms {
            total += self.value(t).item();
        }
        self.push(
            Tensor::scalar(total),
            terms.iter().map(|t| t.0).collect(),
            Some(Box::new(|up, parents| {
                for p in parents.iter_mut() {
                    p.data_mut()[0] += up.item();
                }
            })),
        )
    }

    /// Frobenius norm as a scalar node (used by gradient-check probes).
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let nv = ta.frob_norm();
        let ca = Rc::clone(&ta);
        self.push(
            Tensor::scalar(nv),
            vec![a.0],
            Some(Box::new(move |up, parents| {
                let u = up.item();
                let nv = ca.frob_norm().max(1e-12);
                for (g, x) in parents[0].data_mut().iter_mut().zip(ca.data()) {
                    *g += u * x / nv;
                }
            })),
        )
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        assert_eq!(ta.shape(), tb.shape(), "dot shape mismatch");
        let v = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let (ca, cb) = (Rc::clone(&ta), Rc::clone(&tb));
        self.push(
            Tensor::scalar(v),
            vec![a.0, b.0],
            Some(Box::new(move |up, parents| {
                let u = up.item();
                for (g, y) in parents[0].data_mut().iter_mut().zip(cb.data()) {
                    *g += u * y;
                }
                for (g, x) in parents[1].data_mut().iter_mut().zip(ca.data()) {
                    *g += u * x;
                }
            })),
        )
    }

    /// Reverse pass from a scalar loss. Gradients accumulate over the tape.
    pub fn backward(&mut self, loss: Var) -> GradStore {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(up) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(grad_fn) = &node.grad_fn {
                let mut parent_bufs: Vec<Tensor> = node
                    .parents
                    .iter()
                    .map(|&p| {
                        let (r, c) = self.nodes[p].value.shape();
                        Tensor::zeros(r, c)
                    })
                    .collect();
                grad_fn(&up, &mut parent_bufs);
                for (&p, buf) in node.parents.iter().zip(parent_bufs) {
                    if self.nodes[p].requires_grad {
                        match &mut grads[p] {
                            Some(g) => g.add_assign(&buf),
                            slot => *slot = Some(buf),
                        }
                    }
                }
            }
            grads[id] = Some(up);
        }
        GradStore { grads }
    }
}

pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a).max(1e-12);
    let nb = norm(b).max(1e-12);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}
