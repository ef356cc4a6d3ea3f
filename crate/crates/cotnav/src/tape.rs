//! Minimal reverse-mode autodiff over 2D f64 tensors.
//!
//! A `Tape` owns the forward graph for one training step. Ops cover exactly
//! what the models here need: matmuls, row broadcasts, activations, causal
//! softmax, gather/concat/slice plumbing, and the loss heads. Parameters are
//! copied in as leaves and their gradients harvested back into the store
//! after `backward`.

use crate::params::ParamStore;

/// Tensor handle into a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct T(pub usize);

/// One cross-entropy row: softmax over the row's logits, uniform target mass
/// over `positives`, scaled by `weight`. Zero-weight rows contribute exactly
/// nothing to value or gradient.
#[derive(Debug, Clone)]
pub struct CeRow {
    pub positives: Vec<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(T, T),
    /// a[r,k] * b[c,k]^T
    MatmulTB(T, T),
    Add(T, T),
    Mul(T, T),
    Scale(T, f64),
    /// [r,c] + broadcast [1,c]
    AddRow(T, T),
    /// [r,c] * broadcast [1,c]
    MulRow(T, T),
    Gelu(T),
    Tanh(T),
    Sigmoid(T),
    RmsNorm(T),
    /// row i softmaxes over columns j <= i + offset
    SoftmaxCausal(T, i64),
    CatRows(Vec<T>),
    CatCols(Vec<T>),
    SliceRows(T, usize, usize),
    SliceCols(T, usize, usize),
    GatherRows(T, Vec<usize>),
    /// stack single rows picked from source tensors
    AssembleRows(Vec<(T, usize)>),
    RepeatRow(T, usize),
    CeRows(T, Vec<CeRow>),
    /// binary cross-entropy with logits, per element, weighted sum
    BceLogits(T, Vec<f64>, Vec<f64>),
    /// weighted sum of squared errors
    MseWeighted(T, Vec<f64>, Vec<f64>),
    /// weighted sum of scalar tensors
    AddScaled(Vec<(T, f64)>),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    binds: Vec<(usize, String)>,
}

const RMS_EPS: f64 = 1e-5;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), binds: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> T {
        debug_assert_eq!(value.len(), rows * cols);
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { rows, cols, value, grad, op });
        T(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> T {
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> T {
        self.leaf(1, 1, vec![v])
    }

    /// Copy a parameter block onto the tape; its gradient is harvested back.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> T {
        let b = store.block(name);
        let t = self.push(b.rows, b.cols, b.values.clone(), Op::Leaf);
        self.binds.push((t.0, name.to_string()));
        t
    }

    pub fn value(&self, t: T) -> &[f64] {
        &self.nodes[t.0].value
    }

    pub fn grad(&self, t: T) -> &[f64] {
        &self.nodes[t.0].grad
    }

    pub fn shape(&self, t: T) -> (usize, usize) {
        (self.nodes[t.0].rows, self.nodes[t.0].cols)
    }

    pub fn item(&self, t: T) -> f64 {
        debug_assert_eq!(self.nodes[t.0].value.len(), 1);
        self.nodes[t.0].value[0]
    }

    // -- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: T, b: T) -> T {
        let (ar, ak) = self.shape(a);
        let (bk, bc) = self.shape(b);
        assert_eq!(ak, bk, "matmul inner dims");
        let mut out = vec![0.0; ar * bc];
        matmul_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, ar, ak, bc);
        self.push(ar, bc, out, Op::Matmul(a, b))
    }

    pub fn matmul_tb(&mut self, a: T, b: T) -> T {
        let (ar, ak) = self.shape(a);
        let (br, bk) = self.shape(b);
        assert_eq!(ak, bk, "matmul_tb inner dims");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; ar * br];
        for i in 0..ar {
            let arow = &av[i * ak..(i + 1) * ak];
            let orow = &mut out[i * br..(i + 1) * br];
            for j in 0..br {
                orow[j] = dot(arow, &bv[j * bk..(j + 1) * bk]);
            }
        }
        self.push(ar, br, out, Op::MatmulTB(a, b))
    }

    pub fn add(&mut self, a: T, b: T) -> T {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c));
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(r, c, v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: T, b: T) -> T {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c));
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        self.push(r, c, v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: T, s: f64) -> T {
        let (r, c) = self.shape(a);
        let v = self.nodes[a.0].value.iter().map(|x| x * s).collect();
        self.push(r, c, v, Op::Scale(a, s))
    }

    pub fn add_row(&mut self, a: T, b: T) -> T {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (1, c));
        let bv = &self.nodes[b.0].value;
        let mut v = self.nodes[a.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                v[i * c + j] += bv[j];
            }
        }
        self.push(r, c, v, Op::AddRow(a, b))
    }

    pub fn mul_row(&mut self, a: T, b: T) -> T {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (1, c));
        let bv = &self.nodes[b.0].value;
        let mut v = self.nodes[a.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                v[i * c + j] *= bv[j];
            }
        }
        self.push(r, c, v, Op::MulRow(a, b))
    }

    pub fn gelu(&mut self, a: T) -> T {
        let (r, c) = self.shape(a);
        let v = self.nodes[a.0].value.iter().map(|&x| gelu(x)).collect();
        self.push(r, c, v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: T) -> T {
        let (r, c) = self.shape(a);
        let v = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(r, c, v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: T) -> T {
        let (r, c) = self.shape(a);
        let v = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        self.push(r, c, v, Op::Sigmoid(a))
    }

    pub fn rms_norm(&mut self, a: T) -> T {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let ri = rms_inv(row);
            for j in 0..c {
                v[i * c + j] = row[j] * ri;
            }
        }
        self.push(r, c, v, Op::RmsNorm(a))
    }

    pub fn softmax_causal(&mut self, a: T, offset: i64) -> T {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let hi = ((i as i64 + offset).max(0) as usize + 1).min(c);
            let row = &av[i * c..i * c + hi];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..hi {
                let e = (row[j] - m).exp();
                v[i * c + j] = e;
                s += e;
            }
            for j in 0..hi {
                v[i * c + j] /= s;
            }
        }
        self.push(r, c, v, Op::SoftmaxCausal(a, offset))
    }

    pub fn cat_rows(&mut self, parts: &[T]) -> T {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut v = Vec::new();
        let mut r = 0;
        for p in parts {
            let (pr, pc) = self.shape(*p);
            assert_eq!(pc, c);
            v.extend_from_slice(&self.nodes[p.0].value);
            r += pr;
        }
        self.push(r, c, v, Op::CatRows(parts.to_vec()))
    }

    pub fn cat_cols(&mut self, parts: &[T]) -> T {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p).1).collect();
        let c: usize = widths.iter().sum();
        let mut v = vec![0.0; r * c];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            assert_eq!(self.shape(*p).0, r);
            let pv = &self.nodes[p.0].value;
            for i in 0..r {
                v[i * c + off..i * c + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(r, c, v, Op::CatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: T, lo: usize, hi: usize) -> T {
        let (r, c) = self.shape(a);
        assert!(lo <= hi && hi <= r);
        let v = self.nodes[a.0].value[lo * c..hi * c].to_vec();
        self.push(hi - lo, c, v, Op::SliceRows(a, lo, hi))
    }

    pub fn slice_cols(&mut self, a: T, lo: usize, hi: usize) -> T {
        let (r, c) = self.shape(a);
        assert!(lo <= hi && hi <= c);
        let w = hi - lo;
        let av = &self.nodes[a.0].value;
        let mut v = vec![0.0; r * w];
        for i in 0..r {
            v[i * w..(i + 1) * w].copy_from_slice(&av[i * c + lo..i * c + hi]);
        }
        self.push(r, w, v, Op::SliceCols(a, lo, hi))
    }

    pub fn gather_rows(&mut self, a: T, idx: &[usize]) -> T {
        let (r, c) = self.shape(a);
        let mut v = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r);
            v.extend_from_slice(&self.nodes[a.0].value[i * c..(i + 1) * c]);
        }
        self.push(idx.len(), c, v, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn assemble_rows(&mut self, picks: &[(T, usize)]) -> T {
        assert!(!picks.is_empty());
        let c = self.shape(picks[0].0).1;
        let mut v = Vec::with_capacity(picks.len() * c);
        for (t, i) in picks {
            let (pr, pc) = self.shape(*t);
            assert_eq!(pc, c);
            assert!(*i < pr);
            v.extend_from_slice(&self.nodes[t.0].value[i * c..(i + 1) * c]);
        }
        self.push(picks.len(), c, v, Op::AssembleRows(picks.to_vec()))
    }

    pub fn repeat_row(&mut self, a: T, n: usize) -> T {
        let (r, c) = self.shape(a);
        assert_eq!(r, 1);
        let mut v = Vec::with_capacity(n * c);
        for _ in 0..n {
            v.extend_from_slice(&self.nodes[a.0].value);
        }
        self.push(n, c, v, Op::RepeatRow(a, n))
    }

    /// Weighted multi-positive cross-entropy over rows of `logits`.
    pub fn ce_rows(&mut self, logits: T, rows: Vec<CeRow>) -> T {
        let (r, c) = self.shape(logits);
        assert_eq!(rows.len(), r);
        let av = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for (i, spec) in rows.iter().enumerate() {
            if spec.weight == 0.0 || spec.positives.is_empty() {
                continue;
            }
            let row = &av[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            let k = spec.positives.len() as f64;
            let mut ce = 0.0;
            for &p in &spec.positives {
                assert!(p < c);
                ce += (lse - row[p]) / k;
            }
            total += spec.weight * ce;
        }
        self.push(1, 1, vec![total], Op::CeRows(logits, rows))
    }

    pub fn bce_logits(&mut self, logits: T, targets: Vec<f64>, weights: Vec<f64>) -> T {
        let n = self.nodes[logits.0].value.len();
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let mut total = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let x = self.nodes[logits.0].value[i];
            // stable: max(x,0) - x*t + ln(1 + e^{-|x|})
            total += weights[i] * (x.max(0.0) - x * targets[i] + (-x.abs()).exp().ln_1p());
        }
        self.push(1, 1, vec![total], Op::BceLogits(logits, targets, weights))
    }

    pub fn mse_weighted(&mut self, pred: T, targets: Vec<f64>, weights: Vec<f64>) -> T {
        let n = self.nodes[pred.0].value.len();
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let mut total = 0.0;
        for i in 0..n {
            let d = self.nodes[pred.0].value[i] - targets[i];
            total += weights[i] * d * d;
        }
        self.push(1, 1, vec![total], Op::MseWeighted(pred, targets, weights))
    }

    pub fn add_scaled(&mut self, parts: &[(T, f64)]) -> T {
        assert!(!parts.is_empty());
        let (r, c) = self.shape(parts[0].0);
        let mut v = vec![0.0; r * c];
        for (t, w) in parts {
            assert_eq!(self.shape(*t), (r, c));
            for (o, x) in v.iter_mut().zip(&self.nodes[t.0].value) {
                *o += w * x;
            }
        }
        self.push(r, c, v, Op::AddScaled(parts.to_vec()))
    }

    /// Two-layer perceptron: act(x*w1 + b1) * w2 + b2.
    pub fn mlp2(&mut self, x: T, w1: T, b1: T, w2: T, b2: T, act: Act) -> T {
        let h = self.matmul(x, w1);
        let h = self.add_row(h, b1);
        let h = match act {
            Act::Gelu => self.gelu(h),
            Act::Tanh => self.tanh(h),
        };
        let o = self.matmul(h, w2);
        self.add_row(o, b2)
    }

    // -- backward ----------------------------------------------------------

    pub fn backward(&mut self, loss: T) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.iter().all(|g| *g == 0.0) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (ar, ak) = self.shape(a);
                    let (_, bc) = self.shape(b);
                    // da += g * b^T
                    let (g, bv) = (self.nodes[i].grad.clone(), self.nodes[b.0].value.clone());
                    {
                        let da = &mut self.nodes[a.0].grad;
                        for r in 0..ar {
                            let grow = &g[r * bc..(r + 1) * bc];
                            for kk in 0..ak {
                                da[r * ak + kk] += dot(grow, &bv[kk * bc..(kk + 1) * bc]);
                            }
                        }
                    }
                    // db += a^T * g
                    let av = self.nodes[a.0].value.clone();
                    let db = &mut self.nodes[b.0].grad;
                    for r in 0..ar {
                        let grow = &g[r * bc..(r + 1) * bc];
                        for kk in 0..ak {
                            let s = av[r * ak + kk];
                            if s == 0.0 {
                                continue;
                            }
                            let dbrow = &mut db[kk * bc..(kk + 1) * bc];
                            for j in 0..bc {
                                dbrow[j] += s * grow[j];
                            }
                        }
                    }
                }
                Op::MatmulTB(a, b) => {
                    let (ar, ak) = self.shape(a);
                    let (br, _) = self.shape(b);
                    let g = self.nodes[i].grad.clone();
                    // da += g * b
                    {
                        let bv = self.nodes[b.0].value.clone();
                        let da = &mut self.nodes[a.0].grad;
                        for r in 0..ar {
                            let grow = &g[r * br..(r + 1) * br];
                            let darow = &mut da[r * ak..(r + 1) * ak];
                            for j in 0..br {
                                let s = grow[j];
                                if s == 0.0 {
                                    continue;
                                }
                                let brow = &bv[j * ak..(j + 1) * ak];
                                for kk in 0..ak {
                                    darow[kk] += s * brow[kk];
                                }
                            }
                        }
                    }
                    // db += g^T * a
                    let av = self.nodes[a.0].value.clone();
                    let db = &mut self.nodes[b.0].grad;
                    for r in 0..ar {
                        let grow = &g[r * br..(r + 1) * br];
                        let arow = &av[r * ak..(r + 1) * ak];
                        for j in 0..br {
                            let s = grow[j];
                            if s == 0.0 {
                                continue;
                            }
                            let dbrow = &mut db[j * ak..(j + 1) * ak];
                            for kk in 0..ak {
                                dbrow[kk] += s * arow[kk];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    let g = self.nodes[i].grad.clone();
                    add_into(&mut self.nodes[a.0].grad, &g);
                    add_into(&mut self.nodes[b.0].grad, &g);
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[i].grad.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let av = self.nodes[a.0].value.clone();
                    for (da, (gv, b)) in self.nodes[a.0].grad.iter_mut().zip(g.iter().zip(&bv)) {
                        *da += gv * b;
                    }
                    for (db, (gv, a)) in self.nodes[b.0].grad.iter_mut().zip(g.iter().zip(&av)) {
                        *db += gv * a;
                    }
                }
                Op::Scale(a, s) => {
                    let g = self.nodes[i].grad.clone();
                    for (da, gv) in self.nodes[a.0].grad.iter_mut().zip(&g) {
                        *da += gv * s;
                    }
                }
                Op::AddRow(a, b) => {
                    let (r, c) = self.shape(a);
                    let g = self.nodes[i].grad.clone();
                    add_into(&mut self.nodes[a.0].grad, &g);
                    let db = &mut self.nodes[b.0].grad;
                    for row in 0..r {
                        for j in 0..c {
                            db[j] += g[row * c + j];
                        }
                    }
                }
                Op::MulRow(a, b) => {
                    let (r, c) = self.shape(a);
                    let g = self.nodes[i].grad.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let av = self.nodes[a.0].value.clone();
                    {
                        let da = &mut self.nodes[a.0].grad;
                        for row in 0..r {
                            for j in 0..c {
                                da[row * c + j] += g[row * c + j] * bv[j];
                            }
                        }
                    }
                    let db = &mut self.nodes[b.0].grad;
                    for row in 0..r {
                        for j in 0..c {
                            db[j] += g[row * c + j] * av[row * c + j];
                        }
                    }
                }
                Op::Gelu(a) => {
                    let g = self.nodes[i].grad.clone();
                    let av = self.nodes[a.0].value.clone();
                    for ((da, gv), x) in self.nodes[a.0].grad.iter_mut().zip(&g).zip(&av) {
                        *da += gv * gelu_deriv(*x);
                    }
                }
                Op::Tanh(a) => {
                    let g = self.nodes[i].grad.clone();
                    let yv = self.nodes[i].value.clone();
                    for ((da, gv), y) in self.nodes[a.0].grad.iter_mut().zip(&g).zip(&yv) {
                        *da += gv * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    let g = self.nodes[i].grad.clone();
                    let yv = self.nodes[i].value.clone();
                    for ((da, gv), y) in self.nodes[a.0].grad.iter_mut().zip(&g).zip(&yv) {
                        *da += gv * y * (1.0 - y);
                    }
                }
                Op::RmsNorm(a) => {
                    let (r, c) = self.shape(a);
                    let g = self.nodes[i].grad.clone();
                    let av = self.nodes[a.0].value.clone();
                    let da = &mut self.nodes[a.0].grad;
                    for row in 0..r {
                        let x = &av[row * c..(row + 1) * c];
                        let grow = &g[row * c..(row + 1) * c];
                        let ri = rms_inv(x);
                        let dotgx: f64 = grow.iter().zip(x).map(|(gv, xv)| gv * xv).sum();
                        let k = ri * ri * ri / c as f64;
                        for j in 0..c {
                            da[row * c + j] += ri * grow[j] - k * dotgx * x[j];
                        }
                    }
                }
                Op::SoftmaxCausal(a, offset) => {
                    let (r, c) = self.shape(a);
                    let g = self.nodes[i].grad.clone();
                    let p = self.nodes[i].value.clone();
                    let da = &mut self.nodes[a.0].grad;
                    for row in 0..r {
                        let hi = ((row as i64 + offset).max(0) as usize + 1).min(c);
                        let prow = &p[row * c..row * c + hi];
                        let grow = &g[row * c..row * c + hi];
                        let dotpg: f64 = prow.iter().zip(grow).map(|(pv, gv)| pv * gv).sum();
                        for j in 0..hi {
                            da[row * c + j] += prow[j] * (grow[j] - dotpg);
                        }
                    }
                }
                Op::CatRows(parts) => {
                    let g = self.nodes[i].grad.clone();
                    let c = self.shape(parts[0]).1;
                    let mut off = 0;
                    for p in parts {
                        let pr = self.shape(p).0;
                        let dst = &mut self.nodes[p.0].grad;
                        for (d, s) in dst.iter_mut().zip(&g[off * c..(off + pr) * c]) {
                            *d += s;
                        }
                        off += pr;
                    }
                }
                Op::CatCols(parts) => {
                    let (r, c) = (self.nodes[i].rows, self.nodes[i].cols);
                    let g = self.nodes[i].grad.clone();
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(p).1;
                        let dst = &mut self.nodes[p.0].grad;
                        for row in 0..r {
                            for j in 0..w {
                                dst[row * w + j] += g[row * c + off + j];
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceRows(a, lo, _hi) => {
                    let (_, c) = self.shape(a);
                    let g = self.nodes[i].grad.clone();
                    let da = &mut self.nodes[a.0].grad;
                    for (d, s) in da[lo * c..lo * c + g.len()].iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::SliceCols(a, lo, hi) => {
                    let (r, c) = self.shape(a);
                    let w = hi - lo;
                    let g = self.nodes[i].grad.clone();
                    let da = &mut self.nodes[a.0].grad;
                    for row in 0..r {
                        for j in 0..w {
                            da[row * c + lo + j] += g[row * w + j];
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (_, c) = self.shape(a);
                    let g = self.nodes[i].grad.clone();
                    let da = &mut self.nodes[a.0].grad;
                    for (k, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            da[src * c + j] += g[k * c + j];
                        }
                    }
                }
                Op::AssembleRows(picks) => {
                    let c = self.nodes[i].cols;
                    let g = self.nodes[i].grad.clone();
                    for (k, (t, row)) in picks.iter().enumerate() {
                        let da = &mut self.nodes[t.0].grad;
                        for j in 0..c {
                            da[row * c + j] += g[k * c + j];
                        }
                    }
                }
                Op::RepeatRow(a, n) => {
                    let c = self.shape(a).1;
                    let g = self.nodes[i].grad.clone();
                    let da = &mut self.nodes[a.0].grad;
                    for row in 0..n {
                        for j in 0..c {
                            da[j] += g[row * c + j];
                        }
                    }
                }
                Op::CeRows(logits, rows) => {
                    let (r, c) = self.shape(logits);
                    let gscalar = self.nodes[i].grad[0];
                    let av = self.nodes[logits.0].value.clone();
                    let da = &mut self.nodes[logits.0].grad;
                    for (row, spec) in rows.iter().enumerate().take(r) {
                        if spec.weight == 0.0 || spec.positives.is_empty() {
                            continue;
                        }
                        let x = &av[row * c..(row + 1) * c];
                        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
                        let s: f64 = exps.iter().sum();
                        let k = spec.positives.len() as f64;
                        for j in 0..c {
                            da[row * c + j] += gscalar * spec.weight * exps[j] / s;
                        }
                        for &p in &spec.positives {
                            da[row * c + p] -= gscalar * spec.weight / k;
                        }
                    }
                }
                Op::BceLogits(logits, targets, weights) => {
                    let gscalar = self.nodes[i].grad[0];
                    let av = self.nodes[logits.0].value.clone();
                    let da = &mut self.nodes[logits.0].grad;
                    for j in 0..av.len() {
                        if weights[j] == 0.0 {
                            continue;
                        }
                        da[j] += gscalar * weights[j] * (sigmoid(av[j]) - targets[j]);
                    }
                }
                Op::MseWeighted(pred, targets, weights) => {
                    let gscalar = self.nodes[i].grad[0];
                    let av = self.nodes[pred.0].value.clone();
                    let da = &mut self.nodes[pred.0].grad;
                    for j in 0..av.len() {
                        da[j] += gscalar * weights[j] * 2.0 * (av[j] - targets[j]);
                    }
                }
                Op::AddScaled(parts) => {
                    let g = self.nodes[i].grad.clone();
                    for (t, w) in parts {
                        for (d, s) in self.nodes[t.0].grad.iter_mut().zip(&g) {
                            *d += w * s;
                        }
                    }
                }
            }
        }
    }

    /// Accumulate harvested gradients into the parameter store.
    pub fn harvest(&self, store: &mut ParamStore) {
        for (node, name) in &self.binds {
            store.block_mut(name).add_grad(&self.nodes[*node].grad);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Act {
    Gelu,
    Tanh,
}

// -- plain math shared with the inference path ------------------------------

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * c..(kk + 1) * c];
            for j in 0..c {
                orow[j] += aik * brow[j];
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[inline]
pub fn rms_inv(row: &[f64]) -> f64 {
    let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    1.0 / (ms + RMS_EPS).sqrt()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
