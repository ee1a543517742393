//! Minimal reverse-mode automatic differentiation over dense row-major
//! matrices.
//!
//! A [`Graph`] records the forward computation for one input. Parameters are
//! borrowed, not copied, and their gradients are accumulated into a
//! caller-owned [`ParamGrads`] so that a batch can share one accumulator.

#![allow(clippy::needless_range_loop)]

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "not a scalar tensor");
        self.data[0]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (n×k) · b (k×m)`
fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (n×k) · bᵀ` where `b` is `m×k`.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension mismatch");
    let (n, m) = (a.rows, b.rows);
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..m {
            out.data[i * m + j] = dot(ar, b.row(j));
        }
    }
    out
}

/// `aᵀ (k×n) · b (n×m)` where `a` is `n×k`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn outer dimension mismatch");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(k, m);
    for r in 0..n {
        let b_row = &b.data[r * m..(r + 1) * m];
        for p in 0..k {
            let av = a.data[r * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out.data[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Numerically stable softmax of a slice, written into `out`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

enum Op {
    Param(usize),
    Constant,
    Gather { table: Var, ids: Vec<usize> },
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Row(Var, usize),
    MaskedMean { x: Var, mask: Vec<bool>, count: usize },
    Cosine { a: Var, b: Var },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor,
    },
    SquaredError { x: Var, target: f64 },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

/// Gradient accumulator for an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    slots: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        Self {
            slots: params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect(),
        }
    }

    pub fn slots(&self) -> &[Tensor] {
        &self.slots
    }

    pub fn into_slots(self) -> Vec<Tensor> {
        self.slots
    }

    pub fn clear(&mut self) {
        self.slots.iter_mut().for_each(|t| t.fill(0.0));
    }

    pub fn all_finite(&self) -> bool {
        self.slots
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// Tape of forward operations for one differentiable computation.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Default for Graph<'p> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(128),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    /// Registers a trainable parameter; `slot` indexes the [`ParamGrads`]
    /// that receives its gradient.
    pub fn param(&mut self, tensor: &'p Tensor, slot: usize) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(tensor),
            op: Op::Param(slot),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Constant)
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let cols = t.cols;
        let mut out = Tensor::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1×c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let r = self.value(row);
        assert_eq!(r.rows, 1, "add_row expects a row vector");
        assert_eq!(r.cols, out.cols, "add_row width mismatch");
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_nt(self.value(a), self.value(b));
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        self.push(out, Op::Scale(a, s))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is
    /// excluded and reads as zero.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let width = if causal { (i + 1).min(x.cols) } else { x.cols };
            let (src, dst) = (&x.row(i)[..width], &mut out.data[i * x.cols..i * x.cols + width]);
            softmax_into(src, dst);
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..cols {
                let h = (row[j] - mean) * inv;
                xhat.data[i * cols + j] = h;
                out.data[i * cols + j] = h * g.data[j] + b.data[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = gelu(*x));
        self.push(out, Op::Gelu(a))
    }

    pub fn row(&mut self, a: Var, index: usize) -> Var {
        let out = Tensor::row_vector(self.value(a).row(index).to_vec());
        self.push(out, Op::Row(a, index))
    }

    /// Mean of the rows whose mask entry is `true`. Caller guarantees at
    /// least one such row.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool]) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.rows, "mask length mismatch");
        let count = mask.iter().filter(|m| **m).count();
        assert!(count > 0, "masked_mean over a fully masked input");
        let mut out = vec![0.0; x.cols];
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= count as f64);
        self.push(
            Tensor::row_vector(out),
            Op::MaskedMean {
                x: a,
                mask: mask.to_vec(),
                count,
            },
        )
    }

    /// Cosine similarity of two row vectors. A zero-norm operand yields 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (na, nb) = (norm(&av.data), norm(&bv.data));
        let c = if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot(&av.data, &bv.data) / (na * nb)
        };
        self.push(Tensor::from_vec(1, 1, vec![c]), Op::Cosine { a, b })
    }

    /// Summed softmax cross-entropy over the rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let l = self.value(logits);
        assert_eq!(targets.len(), l.rows, "one target slot per row");
        let mut probs = Tensor::zeros(l.rows, l.cols);
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = l.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
                softmax_into(row, probs.row_mut(i));
            }
        }
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn squared_error(&mut self, x: Var, target: f64) -> Var {
        let d = self.value(x).scalar() - target;
        self.push(Tensor::from_vec(1, 1, vec![d * d]), Op::SquaredError { x, target })
    }

    /// Back-propagates `scale · d(loss)` into `grads`.
    pub fn backward(&self, loss: Var, scale: f64, grads: &mut ParamGrads) {
        assert_eq!(self.value(loss).data.len(), 1, "loss must be a scalar");
        let mut g: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(Tensor::from_vec(1, 1, vec![scale]));

        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(slot) => grads.slots[*slot].add_assign(&gi),
                Op::Constant => {}
                Op::Gather { table, ids } => {
                    // Embedding tables are always parameters; scatter rows directly.
                    let Op::Param(slot) = self.nodes[table.0].op else {
                        panic!("gather table must be a parameter");
                    };
                    let target = &mut grads.slots[slot];
                    for (r, &id) in ids.iter().enumerate() {
                        for (t, v) in target.row_mut(id).iter_mut().zip(gi.row(r)) {
                            *t += v;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, gi.clone());
                    accumulate(&mut g, *b, gi);
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![0.0; gi.cols];
                    for r in 0..gi.rows {
                        for (s, v) in gr.iter_mut().zip(gi.row(r)) {
                            *s += v;
                        }
                    }
                    accumulate(&mut g, *row, Tensor::row_vector(gr));
                    accumulate(&mut g, *a, gi);
                }
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&gi, self.value(*b));
                    let gb = matmul_tn(self.value(*a), &gi);
                    accumulate(&mut g, *a, ga);
                    accumulate(&mut g, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = matmul(&gi, self.value(*b));
                    let gb = matmul_tn(&gi, self.value(*a));
                    accumulate(&mut g, *a, ga);
                    accumulate(&mut g, *b, gb);
                }
                Op::Scale(a, s) => {
                    let mut ga = gi;
                    ga.data.iter_mut().for_each(|x| *x *= s);
                    accumulate(&mut g, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), gi.row(r));
                        let inner = dot(yr, gr);
                        for (o, (yv, gv)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut g, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = xhat.shape();
                    let mut gx = Tensor::zeros(rows, cols);
                    let mut ggain = vec![0.0; cols];
                    let mut gbias = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let (hr, gr) = (xhat.row(r), gi.row(r));
                        let mut sum = 0.0;
                        let mut sum_h = 0.0;
                        for j in 0..cols {
                            ggain[j] += gr[j] * hr[j];
                            gbias[j] += gr[j];
                            dxhat[j] = gr[j] * gv.data[j];
                            sum += dxhat[j];
                            sum_h += dxhat[j] * hr[j];
                        }
                        let n = cols as f64;
                        let inv = inv_std[r];
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv / n * (n * dxhat[j] - sum - hr[j] * sum_h);
                        }
                    }
                    accumulate(&mut g, *gain, Tensor::row_vector(ggain));
                    accumulate(&mut g, *bias, Tensor::row_vector(gbias));
                    accumulate(&mut g, *x, gx);
                }
                Op::Gelu(a) => {
                    let xv = self.value(*a);
                    let mut ga = gi;
                    for (o, x) in ga.data.iter_mut().zip(&xv.data) {
                        *o *= gelu_grad(*x);
                    }
                    accumulate(&mut g, *a, ga);
                }
                Op::Row(a, index) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    ga.row_mut(*index).copy_from_slice(&gi.data);
                    accumulate(&mut g, *a, ga);
                }
                Op::MaskedMean { x, mask, count } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    let w = 1.0 / *count as f64;
                    for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                        for (o, v) in ga.row_mut(r).iter_mut().zip(&gi.data) {
                            *o = v * w;
                        }
                    }
                    accumulate(&mut g, *x, ga);
                }
                Op::Cosine { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (na, nb) = (norm(&av.data), norm(&bv.data));
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let c = self.value(Var(i)).scalar();
                    let up = gi.scalar();
                    let ga: Vec<f64> = av
                        .data
                        .iter()
                        .zip(&bv.data)
                        .map(|(x, y)| up * (y / (na * nb) - c * x / (na * na)))
                        .collect();
                    let gb: Vec<f64> = av
                        .data
                        .iter()
                        .zip(&bv.data)
                        .map(|(x, y)| up * (x / (na * nb) - c * y / (nb * nb)))
                        .collect();
                    accumulate(&mut g, *a, Tensor::from_vec(av.rows, av.cols, ga));
                    accumulate(&mut g, *b, Tensor::from_vec(bv.rows, bv.cols, gb));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let up = gi.scalar();
                    let mut ga = probs.clone();
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            ga.data[r * ga.cols + t] -= 1.0;
                        }
                    }
                    ga.data.iter_mut().for_each(|x| *x *= up);
                    accumulate(&mut g, *logits, ga);
                }
                Op::SquaredError { x, target } => {
                    let d = self.value(*x).scalar() - target;
                    let ga = Tensor::from_vec(1, 1, vec![2.0 * d * gi.scalar()]);
                    accumulate(&mut g, *x, ga);
                }
            }
        }
    }
}

fn accumulate(g: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut g[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}
