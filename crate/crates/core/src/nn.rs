//! Minimal reverse-mode autodiff over row-major 2-D tensors.
//!
//! A [`Tape`] owns every intermediate value; operations return [`Var`]
//! handles. The op set is exactly what the graph transformer needs: dense
//! layers, layer norm, pairwise attention pieces, pooling and the edge
//! cross-entropy. Graph batches are laid out as `[G·n, d]` for nodes,
//! `[G·n·n, d]` for node pairs (row `(g·n + i)·n + j`) and `[G, d]` for
//! graph-level vectors.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

enum Op<S> {
    Leaf,
    Param(usize),
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<S>, rstd: Vec<S> },
    PairProduct { q: Var, k: Var, n: usize, scale: S },
    Film { x: Var, m: Var, a: Option<Var> },
    FilmBcast { x: Var, m: Var, a: Option<Var>, group: usize },
    HeadSum { x: Var, heads: usize },
    SoftmaxJ { x: Var, n: usize },
    Attend { a: Var, v: Var, n: usize, heads: usize },
    MeanGroups { x: Var, group: usize },
    Symmetrize { x: Var, n: usize },
    CrossEntropyUpper { logits: Var, n: usize, targets: Vec<u8>, probs: Vec<S> },
}

pub const LN_EPS: f64 = 1e-5;

/// Computation record. With `record = false` values are still kept (ops
/// refer to earlier results by index) but no backward pass is possible.
pub struct Tape<S: Scalar> {
    vals: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    record: bool,
}

fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], beta: S, c: &mut [S]) {
    S::gemm(m, k, n, S::one(), a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c[k×n] += aᵀ · b` with `a` stored `m×k`, `b` stored `m×n`.
fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    S::gemm(k, m, n, S::one(), a, 1, k as isize, b, n as isize, 1, S::one(), c, n as isize, 1);
}

/// `c[m×k] += a · bᵀ` with `a` stored `m×n`, `b` stored `k×n`.
fn gemm_nt<S: Scalar>(m: usize, n: usize, k: usize, a: &[S], b: &[S], c: &mut [S]) {
    S::gemm(m, n, k, S::one(), a, n as isize, 1, b, 1, n as isize, S::one(), c, k as isize, 1);
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize, f: impl FnOnce(&mut [S])) {
    let g = grads[v.0].get_or_insert_with(|| vec![S::zero(); len]);
    f(g);
}

impl<S: Scalar> Tape<S> {
    pub fn new(record: bool) -> Self {
        Self { vals: Vec::new(), ops: Vec::new(), record }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.vals[v.0]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push(&mut self, t: Tensor<S>, op: Op<S>) -> Var {
        self.vals.push(t);
        self.ops.push(if self.record { op } else { Op::Leaf });
        Var(self.vals.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A leaf whose gradient is reported under `index` by [`Tape::backward`].
    pub fn param(&mut self, index: usize, t: Tensor<S>) -> Var {
        self.push(t, Op::Param(index))
    }

    /// `x · w + b` with `w` of shape `[in, out]` and `b` of shape `[1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (&self.vals[x.0], &self.vals[w.0], &self.vals[b.0]);
        assert_eq!(xv.cols, wv.rows, "linear input width");
        assert_eq!(bv.data.len(), wv.cols, "linear bias width");
        let (m, k, n) = (xv.rows, xv.cols, wv.cols);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&bv.data);
        }
        gemm_nn(m, k, n, &xv.data, &wv.data, S::one(), &mut out);
        self.push(Tensor::from_vec(m, n, out), Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.vals[x.0];
        let data = xv.data.iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let t = Tensor::from_vec(xv.rows, xv.cols, data);
        self.push(t, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "add shapes");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_vec(av.rows, av.cols, data);
        self.push(t, Op::Add(a, b))
    }

    /// Row-wise normalization with affine `g`, `b` (each `[1, cols]`).
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (xv, gv, bv) = (&self.vals[x.0], &self.vals[g.0], &self.vals[b.0]);
        let (r, c) = (xv.rows, xv.cols);
        let eps = S::of(LN_EPS);
        let inv_c = S::one() / S::of(c as f64);
        let mut xhat = vec![S::zero(); r * c];
        let mut rstd = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xv.data[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
            let rs = S::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data[j] + bv.data[j];
            }
        }
        self.push(Tensor::from_vec(r, c, out), Op::LayerNorm { x, g, b, xhat, rstd })
    }

    /// `out[(g,i,j), d] = scale · q[(g,i), d] · k[(g,j), d]`.
    pub fn pair_product(&mut self, q: Var, k: Var, n: usize, scale: S) -> Var {
        let (qv, kv) = (&self.vals[q.0], &self.vals[k.0]);
        assert_eq!((qv.rows, qv.cols), (kv.rows, kv.cols));
        let d = qv.cols;
        let graphs = qv.rows / n;
        let mut out = vec![S::zero(); graphs * n * n * d];
        for g in 0..graphs {
            for i in 0..n {
                let qi = qv.row(g * n + i);
                for j in 0..n {
                    let kj = kv.row(g * n + j);
                    let o = &mut out[((g * n + i) * n + j) * d..][..d];
                    for t in 0..d {
                        o[t] = scale * qi[t] * kj[t];
                    }
                }
            }
        }
        self.push(Tensor::from_vec(graphs * n * n, d, out), Op::PairProduct { q, k, n, scale })
    }

    /// `x ⊙ (1 + m) + a`, all of one shape.
    pub fn film(&mut self, x: Var, m: Var, a: Option<Var>) -> Var {
        let (xv, mv) = (&self.vals[x.0], &self.vals[m.0]);
        assert_eq!((xv.rows, xv.cols), (mv.rows, mv.cols), "film shapes");
        let mut data: Vec<S> = xv.data.iter().zip(&mv.data).map(|(&x, &m)| x * (S::one() + m)).collect();
        if let Some(a) = a {
            for (o, &v) in data.iter_mut().zip(&self.vals[a.0].data) {
                *o += v;
            }
        }
        let t = Tensor::from_vec(xv.rows, xv.cols, data);
        self.push(t, Op::Film { x, m, a })
    }

    /// As [`Tape::film`] with per-graph `m`, `a` (`[G, cols]`) broadcast
    /// over the `group` consecutive rows of each graph.
    pub fn film_bcast(&mut self, x: Var, m: Var, a: Option<Var>, group: usize) -> Var {
        let (xv, mv) = (&self.vals[x.0], &self.vals[m.0]);
        let c = xv.cols;
        assert_eq!(mv.cols, c, "film_bcast width");
        assert_eq!(mv.rows * group, xv.rows, "film_bcast groups");
        let av = a.map(|a| &self.vals[a.0]);
        let mut data = vec![S::zero(); xv.rows * c];
        for r in 0..xv.rows {
            let g = r / group;
            for j in 0..c {
                let mut v = xv.data[r * c + j] * (S::one() + mv.data[g * c + j]);
                if let Some(av) = av {
                    v += av.data[g * c + j];
                }
                data[r * c + j] = v;
            }
        }
        let t = Tensor::from_vec(xv.rows, c, data);
        self.push(t, Op::FilmBcast { x, m, a, group })
    }

    /// Sums contiguous column chunks: `[R, d] → [R, heads]`.
    pub fn head_sum(&mut self, x: Var, heads: usize) -> Var {
        let xv = &self.vals[x.0];
        let dh = xv.cols / heads;
        assert_eq!(dh * heads, xv.cols);
        let mut out = vec![S::zero(); xv.rows * heads];
        for r in 0..xv.rows {
            for h in 0..heads {
                out[r * heads + h] = xv.data[r * xv.cols + h * dh..][..dh].iter().copied().sum();
            }
        }
        let t = Tensor::from_vec(xv.rows, heads, out);
        self.push(t, Op::HeadSum { x, heads })
    }

    /// Softmax over `j` of a pair tensor `[G·n·n, H]`, per `(g, i, h)`.
    pub fn softmax_j(&mut self, x: Var, n: usize) -> Var {
        let xv = &self.vals[x.0];
        let h = xv.cols;
        let mut out = vec![S::zero(); xv.data.len()];
        for gi in 0..xv.rows / n {
            for c in 0..h {
                let at = |j: usize| (gi * n + j) * h + c;
                let mx = (0..n).map(|j| xv.data[at(j)]).fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for j in 0..n {
                    let e = (xv.data[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let t = Tensor::from_vec(xv.rows, h, out);
        self.push(t, Op::SoftmaxJ { x, n })
    }

    /// `out[(g,i), d] = Σ_j a[(g,i,j), head(d)] · v[(g,j), d]`.
    pub fn attend(&mut self, a: Var, v: Var, n: usize, heads: usize) -> Var {
        let (av, vv) = (&self.vals[a.0], &self.vals[v.0]);
        let d = vv.cols;
        let dh = d / heads;
        let mut out = vec![S::zero(); vv.rows * d];
        for g in 0..vv.rows / n {
            for i in 0..n {
                let o = &mut out[(g * n + i) * d..][..d];
                for j in 0..n {
                    let w = &av.data[((g * n + i) * n + j) * heads..][..heads];
                    let vj = vv.row(g * n + j);
                    for t in 0..d {
                        o[t] += w[t / dh] * vj[t];
                    }
                }
            }
        }
        let t = Tensor::from_vec(vv.rows, d, out);
        self.push(t, Op::Attend { a, v, n, heads })
    }

    /// Mean over each block of `group` rows: `[G·group, c] → [G, c]`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Var {
        let xv = &self.vals[x.0];
        let c = xv.cols;
        let graphs = xv.rows / group;
        let inv = S::one() / S::of(group as f64);
        let mut out = vec![S::zero(); graphs * c];
        for r in 0..xv.rows {
            let g = r / group;
            for j in 0..c {
                out[g * c + j] += xv.data[r * c + j];
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        self.push(Tensor::from_vec(graphs, c, out), Op::MeanGroups { x, group })
    }

    /// `(x[g,i,j] + x[g,j,i]) / 2` on a pair tensor.
    pub fn symmetrize(&mut self, x: Var, n: usize) -> Var {
        let xv = &self.vals[x.0];
        let c = xv.cols;
        let half = S::of(0.5);
        let mut out = vec![S::zero(); xv.data.len()];
        for g in 0..xv.rows / (n * n) {
            for i in 0..n {
                for j in 0..n {
                    let a = ((g * n + i) * n + j) * c;
                    let b = ((g * n + j) * n + i) * c;
                    for t in 0..c {
                        out[a + t] = (xv.data[a + t] + xv.data[b + t]) * half;
                    }
                }
            }
        }
        let t = Tensor::from_vec(xv.rows, c, out);
        self.push(t, Op::Symmetrize { x, n })
    }

    /// Mean over graphs of the mean over pairs `i < j` of `−log softmax(logits)[target]`.
    /// `targets` has one class per pair row; entries with `i ≥ j` are ignored.
    pub fn cross_entropy_upper(&mut self, logits: Var, n: usize, targets: Vec<u8>) -> Var {
        let lv = &self.vals[logits.0];
        let k = lv.cols;
        assert_eq!(targets.len(), lv.rows, "one target per pair row");
        let graphs = lv.rows / (n * n);
        let pairs = n * (n - 1) / 2;
        let mut probs = vec![S::zero(); lv.data.len()];
        let mut total = S::zero();
        for g in 0..graphs {
            let mut acc = S::zero();
            for i in 0..n {
                for j in i + 1..n {
                    let r = (g * n + i) * n + j;
                    let row = lv.row(r);
                    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let z: S = row.iter().map(|&v| (v - mx).exp()).sum();
                    let lz = z.ln() + mx;
                    for c in 0..k {
                        probs[r * k + c] = (row[c] - lz).exp();
                    }
                    acc += lz - row[targets[r] as usize];
                }
            }
            if pairs > 0 {
                total += acc / S::of(pairs as f64);
            }
        }
        let loss = if graphs > 0 { total / S::of(graphs as f64) } else { S::zero() };
        self.push(Tensor::from_vec(1, 1, vec![loss]), Op::CrossEntropyUpper { logits, n, targets, probs })
    }

    /// Gradients of the scalar `out` with respect to every parameter leaf,
    /// as `(param index, gradient)` pairs in tape order. Parameters that do
    /// not influence `out` receive zero gradients.
    pub fn backward(&self, out: Var) -> Vec<(usize, Vec<S>)> {
        assert!(self.record, "backward on a non-recording tape");
        assert_eq!(self.vals[out.0].data.len(), 1, "backward from a scalar");
        let mut grads: Vec<Option<Vec<S>>> = (0..self.vals.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![S::one()]);
        let mut result = Vec::new();
        for id in (0..=out.0).rev() {
            if let Op::Param(p) = self.ops[id] {
                let g = grads[id].take().unwrap_or_else(|| vec![S::zero(); self.vals[id].data.len()]);
                result.push((p, g));
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backward_op(id, &gy, &mut grads);
        }
        result.reverse();
        result
    }

    fn backward_op(&self, id: usize, gy: &[S], grads: &mut [Option<Vec<S>>]) {
        let y = &self.vals[id];
        let len = |v: Var| self.vals[v.0].data.len();
        match &self.ops[id] {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&self.vals[x.0], &self.vals[w.0]);
                let (m, k, n) = (xv.rows, xv.cols, wv.cols);
                accumulate(grads, *x, m * k, |gx| gemm_nt(m, n, k, gy, &wv.data, gx));
                accumulate(grads, *w, k * n, |gw| gemm_tn(m, k, n, &xv.data, gy, gw));
                accumulate(grads, *b, n, |gb| {
                    for r in 0..m {
                        for j in 0..n {
                            gb[j] += gy[r * n + j];
                        }
                    }
                });
            }
            Op::Relu(x) => accumulate(grads, *x, len(*x), |gx| {
                for ((g, &o), &d) in gx.iter_mut().zip(&y.data).zip(gy) {
                    if o > S::zero() {
                        *g += d;
                    }
                }
            }),
            Op::Add(a, b) => {
                for v in [a, b] {
                    accumulate(grads, *v, gy.len(), |g| {
                        for (o, &d) in g.iter_mut().zip(gy) {
                            *o += d;
                        }
                    });
                }
            }
            Op::LayerNorm { x, g, b, xhat, rstd } => {
                let c = y.cols;
                let gv = &self.vals[g.0].data;
                let inv_c = S::one() / S::of(c as f64);
                accumulate(grads, *x, y.data.len(), |gx| {
                    for r in 0..y.rows {
                        let gyr = &gy[r * c..][..c];
                        let xh = &xhat[r * c..][..c];
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..c {
                            let d = gyr[j] * gv[j];
                            m1 += d;
                            m2 += d * xh[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (gyr[j] * gv[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                accumulate(grads, *g, c, |gg| {
                    for (i, (&d, &h)) in gy.iter().zip(xhat).enumerate() {
                        gg[i % c] += d * h;
                    }
                });
                accumulate(grads, *b, c, |gb| {
                    for (i, &d) in gy.iter().enumerate() {
                        gb[i % c] += d;
                    }
                });
            }
            Op::PairProduct { q, k, n, scale } => {
                let (qv, kv) = (&self.vals[q.0], &self.vals[k.0]);
                let (n, d, scale) = (*n, qv.cols, *scale);
                let graphs = qv.rows / n;
                accumulate(grads, *q, qv.data.len(), |gq| {
                    for g in 0..graphs {
                        for i in 0..n {
                            for j in 0..n {
                                let go = &gy[((g * n + i) * n + j) * d..][..d];
                                let kj = kv.row(g * n + j);
                                let gqi = &mut gq[(g * n + i) * d..][..d];
                                for t in 0..d {
                                    gqi[t] += scale * go[t] * kj[t];
                                }
                            }
                        }
                    }
                });
                accumulate(grads, *k, kv.data.len(), |gk| {
                    for g in 0..graphs {
                        for i in 0..n {
                            let qi = qv.row(g * n + i);
                            for j in 0..n {
                                let go = &gy[((g * n + i) * n + j) * d..][..d];
                                let gkj = &mut gk[(g * n + j) * d..][..d];
                                for t in 0..d {
                                    gkj[t] += scale * go[t] * qi[t];
                                }
                            }
                        }
                    }
                });
            }
            Op::Film { x, m, a } => {
                let (xv, mv) = (&self.vals[x.0].data, &self.vals[m.0].data);
                accumulate(grads, *x, gy.len(), |gx| {
                    for i in 0..gy.len() {
                        gx[i] += gy[i] * (S::one() + mv[i]);
                    }
                });
                accumulate(grads, *m, gy.len(), |gm| {
                    for i in 0..gy.len() {
                        gm[i] += gy[i] * xv[i];
                    }
                });
                if let Some(a) = a {
                    accumulate(grads, *a, gy.len(), |ga| {
                        for i in 0..gy.len() {
                            ga[i] += gy[i];
                        }
                    });
                }
            }
            Op::FilmBcast { x, m, a, group } => {
                let c = y.cols;
                let (xv, mv) = (&self.vals[x.0].data, &self.vals[m.0].data);
                accumulate(grads, *x, gy.len(), |gx| {
                    for i in 0..gy.len() {
                        let g = i / c / group;
                        gx[i] += gy[i] * (S::one() + mv[g * c + i % c]);
                    }
                });
                accumulate(grads, *m, mv.len(), |gm| {
                    for i in 0..gy.len() {
                        let g = i / c / group;
                        gm[g * c + i % c] += gy[i] * xv[i];
                    }
                });
                if let Some(a) = a {
                    accumulate(grads, *a, mv.len(), |ga| {
                        for i in 0..gy.len() {
                            let g = i / c / group;
                            ga[g * c + i % c] += gy[i];
                        }
                    });
                }
            }
            Op::HeadSum { x, heads } => {
                let xv = &self.vals[x.0];
                let dh = xv.cols / heads;
                accumulate(grads, *x, xv.data.len(), |gx| {
                    for (i, g) in gx.iter_mut().enumerate() {
                        let (r, col) = (i / xv.cols, i % xv.cols);
                        *g += gy[r * heads + col / dh];
                    }
                });
            }
            Op::SoftmaxJ { x, n } => {
                let (n, h) = (*n, y.cols);
                accumulate(grads, *x, y.data.len(), |gx| {
                    for gi in 0..y.rows / n {
                        for c in 0..h {
                            let at = |j: usize| (gi * n + j) * h + c;
                            let dot: S = (0..n).map(|j| gy[at(j)] * y.data[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += y.data[at(j)] * (gy[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Attend { a, v, n, heads } => {
                let (av, vv) = (&self.vals[a.0], &self.vals[v.0]);
                let (n, heads, d) = (*n, *heads, vv.cols);
                let dh = d / heads;
                let graphs = vv.rows / n;
                accumulate(grads, *a, av.data.len(), |ga| {
                    for g in 0..graphs {
                        for i in 0..n {
                            let go = &gy[(g * n + i) * d..][..d];
                            for j in 0..n {
                                let vj = vv.row(g * n + j);
                                let gar = &mut ga[((g * n + i) * n + j) * heads..][..heads];
                                for t in 0..d {
                                    gar[t / dh] += go[t] * vj[t];
                                }
                            }
                        }
                    }
                });
                accumulate(grads, *v, vv.data.len(), |gv| {
                    for g in 0..graphs {
                        for i in 0..n {
                            let go = &gy[(g * n + i) * d..][..d];
                            for j in 0..n {
                                let w = &av.data[((g * n + i) * n + j) * heads..][..heads];
                                let gvj = &mut gv[(g * n + j) * d..][..d];
                                for t in 0..d {
                                    gvj[t] += w[t / dh] * go[t];
                                }
                            }
                        }
                    }
                });
            }
            Op::MeanGroups { x, group } => {
                let c = y.cols;
                let inv = S::one() / S::of(*group as f64);
                accumulate(grads, *x, len(*x), |gx| {
                    for (i, g) in gx.iter_mut().enumerate() {
                        let grp = i / c / group;
                        *g += gy[grp * c + i % c] * inv;
                    }
                });
            }
            Op::Symmetrize { x, n } => {
                let (n, c) = (*n, y.cols);
                let half = S::of(0.5);
                accumulate(grads, *x, gy.len(), |gx| {
                    for g in 0..y.rows / (n * n) {
                        for i in 0..n {
                            for j in 0..n {
                                let a = ((g * n + i) * n + j) * c;
                                let b = ((g * n + j) * n + i) * c;
                                for t in 0..c {
                                    gx[a + t] += (gy[a + t] + gy[b + t]) * half;
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropyUpper { logits, n, targets, probs } => {
                let lv = &self.vals[logits.0];
                let (n, k) = (*n, lv.cols);
                let graphs = lv.rows / (n * n);
                let pairs = n * (n - 1) / 2;
                if pairs == 0 || graphs == 0 {
                    return;
                }
                let scale = gy[0] / S::of((graphs * pairs) as f64);
                accumulate(grads, *logits, lv.data.len(), |gl| {
                    for g in 0..graphs {
                        for i in 0..n {
                            for j in i + 1..n {
                                let r = (g * n + i) * n + j;
                                for c in 0..k {
                                    let target = if c == targets[r] as usize { S::one() } else { S::zero() };
                                    gl[r * k + c] += scale * (probs[r * k + c] - target);
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Builds a scalar from every op so a single finite-difference sweep covers them all.
    fn all_ops(tape: &mut Tape<f64>, p: &[Tensor<f64>], n: usize, heads: usize) -> Var {
        let v: Vec<Var> = p.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect();
        // v0: nodes [2n, 4]; v1: w [4, 4]; v2: b [1, 4]; v3: ln g; v4: ln b; v5: per-graph [2, 4];
        // v6: pair [2nn, 4]; v7: head gate [2, 2]; v8: out w [4, 3]; v9: out b [1, 3]
        let x = tape.linear(v[0], v[1], v[2]);
        let x = tape.relu(x);
        let x = tape.layer_norm(x, v[3], v[4]);
        let x = tape.film_bcast(x, v[5], Some(v[5]), n);
        let p = tape.pair_product(x, v[0], n, 0.7);
        let p = tape.film(p, v[6], Some(v[6]));
        let s = tape.head_sum(p, heads);
        let s = tape.film_bcast(s, v[7], None, n * n);
        let a = tape.softmax_j(s, n);
        let u = tape.attend(a, x, n, heads);
        let u = tape.add(u, v[0]);
        let m = tape.mean_groups(u, n);
        let m2 = tape.add(m, v[5]);
        let e = tape.film_bcast(p, m2, None, n * n);
        let e = tape.symmetrize(e, n);
        let logits = tape.linear(e, v[8], v[9]);
        let targets: Vec<u8> = (0..2 * n * n).map(|r| (r % 3) as u8).collect();
        tape.cross_entropy_upper(logits, n, targets)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, heads) = (3, 2);
        let shapes = [(2 * n, 4), (4, 4), (1, 4), (1, 4), (1, 4), (2, 4), (2 * n * n, 4), (2, 2), (4, 3), (1, 3)];
        let params: Vec<Tensor<f64>> = shapes.iter().map(|&(r, c)| rand_tensor(&mut rng, r, c)).collect();
        let mut tape = Tape::new(true);
        let out = all_ops(&mut tape, &params, n, heads);
        let grads = tape.backward(out);
        let loss_at = |p: &[Tensor<f64>]| {
            let mut t = Tape::new(false);
            let o = all_ops(&mut t, p, n, heads);
            t.value(o).data[0]
        };
        let h = 1e-5;
        for (idx, g) in grads {
            for e in 0..params[idx].data.len() {
                let mut plus = params.clone();
                plus[idx].data[e] += h;
                let mut minus = params.clone();
                minus[idx].data[e] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let err = (fd - g[e]).abs() / fd.abs().max(g[e].abs()).max(1e-4);
                assert!(err < 1e-6, "param {idx}[{e}]: fd {fd} vs {}", g[e]);
            }
        }
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut tape = Tape::<f64>::new(false);
        let n = 4;
        let l = tape.input(Tensor::zeros(n * n, 5));
        let loss = tape.cross_entropy_upper(l, n, vec![2; n * n]);
        assert!((tape.value(loss).data[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 3;
        let logits = rand_tensor(&mut rng, 2 * n * n, 4);
        let targets: Vec<u8> = (0..2 * n * n).map(|_| rng.gen_range(0..4)).collect();
        let mut expected = 0.0;
        for g in 0..2 {
            let mut s = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    let r = (g * n + i) * n + j;
                    let row = logits.row(r);
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    s += -(row[targets[r] as usize].exp() / z).ln();
                }
            }
            expected += s / 3.0;
        }
        expected /= 2.0;
        let mut tape = Tape::new(false);
        let l = tape.input(logits);
        let loss = tape.cross_entropy_upper(l, n, targets);
        assert!((tape.value(loss).data[0] - expected).abs() < 1e-12);
    }
}
