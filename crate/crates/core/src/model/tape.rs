//! Dense f64 matrices and a small reverse-mode tape over them.
//!
//! Parameters are referenced by index into a borrowed slice so building a
//! graph never copies weights. Gradients for parameters are accumulated into
//! a caller-provided buffer of the same shapes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape {rows}x{cols} vs {} values", data.len());
        Mat { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (n x k) * b (k x m)`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul {}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols);
    let mut out = Mat::zeros(a.rows, b.cols);
    let m = b.cols;
    for i in 0..a.rows {
        let orow = &mut out.data[i * m..(i + 1) * m];
        for p in 0..a.cols {
            let av = a.data[i * a.cols + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (n x k) * b^T` where `b` is `m x k`.
pub fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_bt {}x{} * ({}x{})^T", a.rows, a.cols, b.rows, b.cols);
    let mut out = Mat::zeros(a.rows, b.rows);
    let k = a.cols;
    for i in 0..a.rows {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..b.rows {
            let brow = &b.data[j * k..(j + 1) * k];
            out.data[i * b.rows + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * b` where `a` is `n x k` and `b` is `n x m`; result `k x m`.
pub fn matmul_at(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_at ({}x{})^T * {}x{}", a.rows, a.cols, b.rows, b.cols);
    let mut out = Mat::zeros(a.cols, b.cols);
    let m = b.cols;
    for i in 0..a.rows {
        let brow = &b.data[i * m..(i + 1) * m];
        for p in 0..a.cols {
            let av = a.data[i * a.cols + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Param(usize),
    Input,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Row(Var, usize),
}

enum Value {
    Param(usize),
    Owned(Mat),
}

pub struct Tape<'p> {
    params: &'p [Mat],
    values: Vec<Value>,
    ops: Vec<Op>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat]) -> Self {
        Tape {
            params,
            values: Vec::with_capacity(128),
            ops: Vec::with_capacity(128),
        }
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.values[v.0] {
            Value::Param(i) => &self.params[*i],
            Value::Owned(m) => m,
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.values.push(Value::Owned(value));
        self.ops.push(op);
        Var(self.ops.len() - 1)
    }

    pub fn param(&mut self, idx: usize) -> Var {
        self.values.push(Value::Param(idx));
        self.ops.push(Op::Param(idx));
        Var(self.ops.len() - 1)
    }

    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Input)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_bt(self.value(a), self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let v = Mat::from_vec(x.rows, x.cols, data);
        self.push(v, Op::Add(a, b))
    }

    /// `a (n x m) + bias (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!((b.rows, b.cols), (1, x.cols), "bias shape mismatch");
        let mut v = x.clone();
        for r in 0..v.rows {
            for (o, bv) in v.data[r * v.cols..(r + 1) * v.cols].iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|p| p * s).collect());
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&p| gelu(p)).collect());
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (n, m) = (xm.rows, xm.cols);
        let mut xhat = Mat::zeros(n, m);
        let mut out = Mat::zeros(n, m);
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = xm.row(r);
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..m {
                let h = (row[c] - mu) * is;
                xhat.data[r * m + c] = h;
                out.data[r * m + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(x.rows, len);
        for r in 0..x.rows {
            v.data[r * len..(r + 1) * len].copy_from_slice(&x.data[r * x.cols + start..r * x.cols + start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut v = Mat::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let x = self.value(*p);
            assert_eq!(x.rows, rows, "concat row mismatch");
            for r in 0..rows {
                v.data[r * total + off..r * total + off + x.cols].copy_from_slice(x.row(r));
            }
            off += x.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, p) in v.data.iter_mut().zip(x.row(r)) {
                *o += p;
            }
        }
        let n = x.rows as f64;
        v.data.iter_mut().for_each(|o| *o /= n);
        self.push(v, Op::MeanRows(a))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(1, x.cols, x.row(r).to_vec());
        self.push(v, Op::Row(a, r))
    }

    /// Back-propagates `seed` (the gradient of the loss w.r.t. `out`) and
    /// accumulates parameter gradients into `param_grads`.
    pub fn backward(&self, out: Var, seed: Mat, param_grads: &mut [Mat]) {
        let n = self.ops.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(seed);

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Param(p) => param_grads[*p].add_assign(&g),
                Op::Input => {}
                Op::MatMul(a, b) => {
                    let ga = matmul_bt(&g, self.value(*b));
                    let gb = matmul_at(self.value(*a), &g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = matmul(&g, self.value(*b));
                    let gb = matmul_at(&g, self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, p) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += p;
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.data.iter_mut().for_each(|x| *x *= s);
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, xv) in ga.data.iter_mut().zip(&x.data) {
                        *gv *= gelu_grad(*xv);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let p = self.value(Var(i));
                    let mut ga = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for c in 0..p.cols {
                            ga.data[r * p.cols + c] = pr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.value(*gamma);
                    let (rows, m) = (xhat.rows, xhat.cols);
                    let mut gg = Mat::zeros(1, m);
                    let mut gbeta = Mat::zeros(1, m);
                    let mut gx = Mat::zeros(rows, m);
                    let mut dxhat = vec![0.0; m];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        for c in 0..m {
                            gg.data[c] += gr[c] * hr[c];
                            gbeta.data[c] += gr[c];
                            dxhat[c] = gr[c] * gm.data[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dh = dxhat.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / m as f64;
                        for c in 0..m {
                            gx.data[r * m + c] = inv_std[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gbeta);
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Mat::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        ga.data[r * src.cols + start..r * src.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = self.value(*p).cols;
                        let mut gp = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            gp.data[r * cols..(r + 1) * cols].copy_from_slice(&g.data[r * g.cols + off..r * g.cols + off + cols]);
                        }
                        off += cols;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).rows;
                    let mut ga = Mat::zeros(rows, g.cols);
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for (o, p) in ga.data[r * g.cols..(r + 1) * g.cols].iter_mut().zip(&g.data) {
                            *o = p * inv;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Row(a, r) => {
                    let src = self.value(*a);
                    let mut ga = Mat::zeros(src.rows, src.cols);
                    ga.data[r * src.cols..(r + 1) * src.cols].copy_from_slice(&g.data);
                    acc(&mut grads, *a, ga);
                }
            }
        }
    }
}
