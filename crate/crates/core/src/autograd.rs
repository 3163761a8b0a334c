//! A small reverse-mode autodiff tape over dense matrices.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are appended in evaluation order, so a
//! reverse sweep over the node list is a valid topological order.

use crate::matrix::Matrix;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Softplus(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(T, T)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix<T>,
        count: usize,
    },
    WeightedAbs {
        pred: Var,
        target: Vec<T>,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn softplus<T: Real>(x: T, beta: T) -> T {
    let bx = beta * x;
    if bx > T::of(20.0) {
        x
    } else {
        bx.exp().ln_1p() / beta
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into<T: Real>(logits: &[T], out: &mut [T]) {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut sum = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a `1 x cols` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        let mut out = self.value(a).clone();
        assert_eq!(b.shape(), (1, out.cols), "bias shape");
        for r in 0..out.rows {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(a, bias))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Matrix<T> {
        let m = self.value(a);
        Matrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var, beta: T) -> Var {
        let out = self.map(a, |x| softplus(x, beta));
        self.push(out, Op::Softplus(a, beta))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let n = T::of(xm.cols as f64);
        let mut out = Matrix::zeros(xm.rows, xm.cols);
        let mut stats = Vec::with_capacity(xm.rows);
        for r in 0..xm.rows {
            let row = xm.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + T::of(LN_EPS)).sqrt();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[c] - mean) * rstd * g.data[c] + b.data[c];
            }
            stats.push((mean, rstd));
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
        )
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q`, `k`, `v` (each `T x D`). With `causal`, row `t` attends only to
    /// rows `<= t`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (t_len, d) = qm.shape();
        assert_eq!(d % heads, 0, "model dim must split across heads");
        assert_eq!(km.shape(), (t_len, d));
        assert_eq!(vm.shape(), (t_len, d));
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); heads * t_len * t_len];
        let mut out = Matrix::zeros(t_len, d);
        let mut scores = vec![T::zero(); t_len];
        for h in 0..heads {
            let off = h * dh;
            for t in 0..t_len {
                let visible = if causal { t + 1 } else { t_len };
                let qr = &qm.row(t)[off..off + dh];
                for (s, sc) in scores.iter_mut().enumerate().take(visible) {
                    let kr = &km.row(s)[off..off + dh];
                    *sc = qr.iter().zip(kr).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                let p = &mut probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                softmax_into(&scores[..visible], &mut p[..visible]);
                let orow = &mut out.data[t * d + off..t * d + off + dh];
                for (s, &ps) in p.iter().enumerate().take(visible) {
                    let vr = &vm.row(s)[off..off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vr) {
                        *o += ps * vv;
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tm = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tm.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tm.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.rows, bm.rows, "concat_cols rows");
        let cols = am.cols + bm.cols;
        let mut out = Matrix::zeros(am.rows, cols);
        for r in 0..am.rows {
            out.row_mut(r)[..am.cols].copy_from_slice(am.row(r));
            out.row_mut(r)[am.cols..].copy_from_slice(bm.row(r));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows cols");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let out = Matrix { rows, cols, data };
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let m = self.value(x);
        assert!(start <= end && end <= m.rows, "slice_rows bounds");
        let out = Matrix {
            rows: end - start,
            cols: m.cols,
            data: m.data[start * m.cols..end * m.cols].to_vec(),
        };
        self.push(out, Op::SliceRows { x, start })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let mut out = Matrix::zeros(1, m.cols);
        let inv = T::one() / T::of(m.rows as f64);
        for r in 0..m.rows {
            for (o, &v) in out.data.iter_mut().zip(m.row(r)) {
                *o += v * inv;
            }
        }
        self.push(out, Op::MeanRows(x))
    }

    /// Mean next-token cross-entropy over the rows that carry a target.
    /// Rows with `None` contribute neither loss nor gradient. Evaluates to
    /// zero when no row has a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows, targets.len(), "one target slot per logit row");
        let mut probs = Matrix::zeros(lm.rows, lm.cols);
        let mut loss = T::zero();
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            softmax_into(lm.row(r), probs.row_mut(r));
            if let Some(t) = *target {
                loss -= probs.get(r, t).max(T::min_positive_value()).ln();
                count += 1;
            }
        }
        if count > 0 {
            loss = loss / T::of(count as f64);
        }
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// `sum_i weights[i] * |pred[i] - target[i]|` over a column of predictions.
    pub fn weighted_abs(&mut self, pred: Var, target: &[T], weights: &[T]) -> Var {
        let pm = self.value(pred);
        assert_eq!(pm.len(), target.len());
        assert_eq!(pm.len(), weights.len());
        let loss = pm
            .data
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((&p, &t), &w)| w * (p - t).abs())
            .sum::<T>();
        self.push(
            Matrix::filled(1, 1, loss),
            Op::WeightedAbs {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let shape = |v: Var| self.nodes[v.0].value.shape();
        macro_rules! acc {
            ($v:expr) => {{
                let (r, c) = shape($v);
                grads[$v.0].get_or_insert_with(|| Matrix::zeros(r, c))
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (val(*a), val(*b));
                g.matmul_nt_into(bm, acc!(*a));
                am.matmul_tn_into(g, acc!(*b));
            }
            Op::AddBias(a, bias) => {
                acc!(*a).add_assign(g);
                let gb = acc!(*bias);
                for r in 0..g.rows {
                    for (o, &v) in gb.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::Add(a, b) => {
                acc!(*a).add_assign(g);
                acc!(*b).add_assign(g);
            }
            Op::Scale(a, s) => {
                let ga = acc!(*a);
                for (o, &v) in ga.data.iter_mut().zip(&g.data) {
                    *o += v * *s;
                }
            }
            Op::Tanh(a) => {
                let ga = acc!(*a);
                for ((o, &gv), &y) in ga.data.iter_mut().zip(&g.data).zip(&node.value.data) {
                    *o += gv * (T::one() - y * y);
                }
            }
            Op::Softplus(a, beta) => {
                let xs = &val(*a).data;
                let ga = acc!(*a);
                for ((o, &gv), &x) in ga.data.iter_mut().zip(&g.data).zip(xs) {
                    *o += gv * sigmoid(*beta * x);
                }
            }
            Op::Gelu(a) => {
                let xs = &val(*a).data;
                let ga = acc!(*a);
                for ((o, &gv), &x) in ga.data.iter_mut().zip(&g.data).zip(xs) {
                    *o += gv * gelu_grad(x);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xm = val(*x);
                let gm = val(*gamma);
                let n = T::of(xm.cols as f64);
                let cols = xm.cols;
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                let mut dx = Matrix::zeros(xm.rows, cols);
                let mut xhat = vec![T::zero(); cols];
                let mut dxhat = vec![T::zero(); cols];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let gr = g.row(r);
                    for c in 0..cols {
                        xhat[c] = (xm.get(r, c) - mean) * rstd;
                        dgamma[c] += gr[c] * xhat[c];
                        dbeta[c] += gr[c];
                        dxhat[c] = gr[c] * gm.data[c];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / n;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = rstd * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                acc!(*x).add_assign(&dx);
                for (o, v) in acc!(*gamma).data.iter_mut().zip(dgamma) {
                    *o += v;
                }
                for (o, v) in acc!(*beta).data.iter_mut().zip(dbeta) {
                    *o += v;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qm, km, vm) = (val(*q), val(*k), val(*v));
                let (t_len, d) = qm.shape();
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let mut dq = Matrix::zeros(t_len, d);
                let mut dk = Matrix::zeros(t_len, d);
                let mut dv = Matrix::zeros(t_len, d);
                let mut dp = vec![T::zero(); t_len];
                for h in 0..*heads {
                    let off = h * dh;
                    for t in 0..t_len {
                        let p = &probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                        let go = &g.row(t)[off..off + dh];
                        let mut dot = T::zero();
                        for s in 0..t_len {
                            if p[s] == T::zero() {
                                dp[s] = T::zero();
                                continue;
                            }
                            let vr = &vm.row(s)[off..off + dh];
                            dp[s] = go.iter().zip(vr).map(|(&a, &b)| a * b).sum::<T>();
                            dot += p[s] * dp[s];
                            let dvr = &mut dv.data[s * d + off..s * d + off + dh];
                            for (o, &gv) in dvr.iter_mut().zip(go) {
                                *o += p[s] * gv;
                            }
                        }
                        for s in 0..t_len {
                            if p[s] == T::zero() {
                                continue;
                            }
                            let ds = p[s] * (dp[s] - dot) * scale;
                            for i in 0..dh {
                                dq.data[t * d + off + i] += ds * km.get(s, off + i);
                                dk.data[s * d + off + i] += ds * qm.get(t, off + i);
                            }
                        }
                    }
                }
                acc!(*q).add_assign(&dq);
                acc!(*k).add_assign(&dk);
                acc!(*v).add_assign(&dv);
            }
            Op::Gather { table, ids } => {
                let gt = acc!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = shape(*a).1;
                {
                    let ga = acc!(*a);
                    for r in 0..g.rows {
                        for (o, &v) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..ac]) {
                            *o += v;
                        }
                    }
                }
                let gb = acc!(*b);
                for r in 0..g.rows {
                    for (o, &v) in gb.row_mut(r).iter_mut().zip(&g.row(r)[ac..]) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = shape(p);
                    let gp = acc!(p);
                    for (o, &v) in gp.data.iter_mut().zip(&g.data[offset..offset + r * c]) {
                        *o += v;
                    }
                    offset += r * c;
                }
            }
            Op::SliceRows { x, start } => {
                let gx = acc!(*x);
                let cols = gx.cols;
                for (o, &v) in gx.data[start * cols..(start + g.rows) * cols]
                    .iter_mut()
                    .zip(&g.data)
                {
                    *o += v;
                }
            }
            Op::MeanRows(x) => {
                let gx = acc!(*x);
                let inv = T::one() / T::of(gx.rows as f64);
                for r in 0..gx.rows {
                    for (o, &v) in gx.row_mut(r).iter_mut().zip(&g.data) {
                        *o += v * inv;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let upstream = g.data[0] / T::of(*count as f64);
                let gl = acc!(*logits);
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    for (c, o) in gl.row_mut(r).iter_mut().enumerate() {
                        let onehot = if c == t { T::one() } else { T::zero() };
                        *o += upstream * (probs.get(r, c) - onehot);
                    }
                }
            }
            Op::WeightedAbs {
                pred,
                target,
                weights,
            } => {
                let pm = val(*pred);
                let upstream = g.data[0];
                let mut d = Vec::with_capacity(pm.len());
                for ((&p, &t), &w) in pm.data.iter().zip(target).zip(weights) {
                    let diff = p - t;
                    let sign = if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    d.push(upstream * w * sign);
                }
                let gp = acc!(*pred);
                for (o, v) in gp.data.iter_mut().zip(d) {
                    *o += v;
                }
            }
        }
    }
}

/// Gradients from one backward sweep.
pub struct Grads<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like its value when `v` did not
    /// influence the loss.
    pub fn take(&mut self, v: Var, tape: &Tape<T>) -> Matrix<T> {
        self.grads[v.0].take().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(leaf) for a closure that
    /// rebuilds the graph from leaf values.
    fn check(leaves: Vec<Matrix<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &vars);
        let mut grads = tape.backward(loss);
        let analytic: Vec<Matrix<f64>> = vars.iter().map(|&v| grads.take(v, &tape)).collect();
        let eval = |ls: &[Matrix<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ls.iter().map(|m| t.leaf(m.clone())).collect();
            let l = build(&mut t, &vs);
            t.scalar(l)
        };
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for i in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data[i] += h;
                let mut minus = leaves.clone();
                minus[li].data[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[li].data[i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(err < 1e-5, "leaf {li}[{i}]: analytic {a} vs fd {fd}");
            }
        }
    }

    fn rnd(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        Matrix::uniform(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn linear_activations_and_abs_loss() {
        let target: Vec<f64> = vec![0.3, -0.2, 0.05, 0.7];
        check(
            vec![rnd(4, 3, 1), rnd(3, 2, 2), rnd(1, 2, 3), rnd(2, 1, 4)],
            |t, v| {
                let h = t.linear(v[0], v[1], v[2]);
                let a = t.softplus(h, 3.0);
                let b = t.tanh(h);
                let c = t.add(a, b);
                let d = t.gelu(c);
                let p = t.matmul(d, v[3]);
                t.weighted_abs(p, &target, &[1.0, 2.0, 0.5, 1.0])
            },
        );
    }

    #[test]
    fn layer_norm_attention_and_cross_entropy() {
        for causal in [true, false] {
            check(
                vec![
                    rnd(5, 8, 10),
                    rnd(1, 8, 11),
                    rnd(1, 8, 12),
                    rnd(8, 8, 13),
                    rnd(8, 8, 14),
                    rnd(8, 8, 15),
                ],
                |t, v| {
                    let n = t.layer_norm(v[0], v[1], v[2]);
                    let q = t.matmul(n, v[3]);
                    let k = t.matmul(n, v[4]);
                    let val = t.matmul(n, v[5]);
                    let a = t.attention(q, k, val, 2, causal);
                    let r = t.add(a, v[0]);
                    t.cross_entropy(r, &[Some(1), None, Some(7), Some(0), None])
                },
            );
        }
    }

    #[test]
    fn structural_ops() {
        check(vec![rnd(6, 3, 20), rnd(2, 4, 21), rnd(2, 3, 22)], |t, v| {
            let g = t.gather(v[0], &[5, 0, 5]);
            let s = t.slice_rows(g, 1, 3);
            let cc = t.concat_cols(s, v[1]);
            let m = t.mean_rows(cc);
            let z = t.concat_rows(&[s, v[2]]);
            let zm = t.mean_rows(z);
            let w = t.scale(zm, 0.5);
            let both = t.concat_cols(m, w);
            t.cross_entropy(both, &[Some(2)])
        });
    }

    #[test]
    fn cross_entropy_without_targets_is_zero() {
        let mut t = Tape::<f64>::new();
        let l = t.leaf(rnd(3, 4, 1));
        let loss = t.cross_entropy(l, &[None, None, None]);
        assert_eq!(t.scalar(loss), 0.0);
        let mut g = t.backward(loss);
        assert!(g.take(l, &t).data.iter().all(|&x| x == 0.0));
    }
}
