//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates gradients for every parameter leaf into a [`Grads`].
//! Composite operations used by the models (multi-head attention, layer
//! norm, 3x3 convolution) are single tape nodes with hand-derived backward
//! rules, which keeps the tape short and the inner loops in `ndarray`.

use std::ops::Range;

use ndarray::{s, Array2, Axis};

use super::params::{Grads, ParamId, ParamStore};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Rows {
        x: Var,
        start: usize,
    },
    PoolRows {
        x: Var,
        windows: Vec<Range<usize>>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        height: usize,
        width: usize,
        cols: Mat,
    },
    AvgPool2 {
        x: Var,
        height: usize,
        width: usize,
    },
    Flatten(Var),
    Bce {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for a stored parameter. Frozen parameters become constants so
    /// no gradient is ever produced for them.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let op = if p.trainable {
            Op::Param(id)
        } else {
            Op::Constant
        };
        self.push(p.value.clone(), op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// `x + row`, broadcasting a `1 x m` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        self.push(value, Op::AddRow(x, row))
    }

    /// `x . w + b` with `w: in x out` and `b: 1 x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|z| gelu(z).0);
        self.push(value, Op::Gelu(x))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` (`1 x d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Mat::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, z) in row.iter().enumerate() {
                xhat[[i, j]] = (z - mean) * is;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Scaled dot-product attention split over `heads` equal column blocks.
    /// `key_mask[j] == false` removes key `j` from every query's softmax;
    /// every query must keep at least one key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dim();
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        if let Some(m) = key_mask {
            assert_eq!(m.len(), kv.nrows(), "key mask length");
            assert!(m.iter().any(|&b| b), "attention with every key masked");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = qv.slice(s![.., cols.clone()]);
            let kh = kv.slice(s![.., cols.clone()]);
            let vh = vv.slice(s![.., cols.clone()]);
            let mut p = qh.dot(&kh.t());
            for mut row in p.outer_iter_mut() {
                if let Some(m) = key_mask {
                    for (z, &keep) in row.iter_mut().zip(m) {
                        if !keep {
                            *z = f64::NEG_INFINITY;
                        }
                    }
                }
                let max = row
                    .iter()
                    .fold(f64::NEG_INFINITY, |acc, &z| acc.max(z * scale));
                let mut sum = 0.0;
                for z in row.iter_mut() {
                    *z = (*z * scale - max).exp();
                    sum += *z;
                }
                row /= sum;
            }
            out.slice_mut(s![.., cols]).assign(&p.dot(&vh));
            probs.push(p);
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

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts differ");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts differ");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn rows(&mut self, x: Var, range: Range<usize>) -> Var {
        let start = range.start;
        let value = self.value(x).slice(s![range, ..]).to_owned();
        self.push(value, Op::Rows { x, start })
    }

    /// Output row `i` is the mean of input rows `windows[i]`.
    pub fn pool_rows(&mut self, x: Var, windows: Vec<Range<usize>>) -> Var {
        let xv = self.value(x);
        let mut value = Mat::zeros((windows.len(), xv.ncols()));
        for (i, w) in windows.iter().enumerate() {
            assert!(!w.is_empty() && w.end <= xv.nrows(), "bad pooling window {w:?}");
            let mean = xv
                .slice(s![w.clone(), ..])
                .mean_axis(Axis(0))
                .expect("non-empty window");
            value.row_mut(i).assign(&mean);
        }
        self.push(value, Op::PoolRows { x, windows })
    }

    /// Same-padded 3x3 convolution. `x` is `c_in x (height*width)` (one
    /// image, channels as rows), `w` is `c_out x (c_in*9)`, `b` is `c_out x 1`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, height: usize, width: usize) -> Var {
        let cols = im2col(self.value(x), height, width);
        let value = self.value(w).dot(&cols) + self.value(b);
        self.push(
            value,
            Op::Conv3x3 {
                x,
                w,
                b,
                height,
                width,
                cols,
            },
        )
    }

    /// 2x2 average pooling with stride 2 on a `c x (height*width)` image.
    pub fn avg_pool2(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert!(height.is_multiple_of(2) && width.is_multiple_of(2), "odd spatial size");
        let (oh, ow) = (height / 2, width / 2);
        let mut value = Mat::zeros((xv.nrows(), oh * ow));
        for c in 0..xv.nrows() {
            for i in 0..oh {
                for j in 0..ow {
                    let at = |di: usize, dj: usize| xv[[c, (2 * i + di) * width + 2 * j + dj]];
                    value[[c, i * ow + j]] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        self.push(value, Op::AvgPool2 { x, height, width })
    }

    /// Row-major reshape to a single row.
    pub fn flatten(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Mat::from_shape_vec((1, xv.len()), xv.iter().copied().collect())
            .expect("flatten shape");
        self.push(value, Op::Flatten(x))
    }

    /// Weighted mean binary cross-entropy of an `n x 1` logit column. Rows
    /// with weight 0 do not contribute; the mean divides by the weight sum.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.ncols(), 1);
        assert_eq!(z.nrows(), targets.len());
        assert_eq!(z.nrows(), weights.len());
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "empty loss");
        let loss = z
            .column(0)
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&z, &y), &w)| w * (softplus(z) - y * z))
            .sum::<f64>()
            / total;
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::Bce {
                logits,
                targets: targets.to_vec(),
                weights: weights.iter().map(|w| w / total).collect(),
            },
        )
    }

    /// Backpropagate from the scalar node `root`.
    pub fn backward(&self, root: Var, n_params: usize) -> Grads {
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Mat::ones(self.nodes[root.0].value.raw_dim()));
        let mut grads = Grads::zeros(n_params);

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, d: Mat| accumulate(&mut adj[v.0], d);
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    send(*a, g.dot(&bv.t()));
                    send(*b, av.t().dot(&g));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddRow(x, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(*row, dr);
                    send(*x, g);
                }
                Op::Tanh(x) => {
                    let d = &g * &node.value.mapv(|y| 1.0 - y * y);
                    send(*x, d);
                }
                Op::Gelu(x) => {
                    let d = &g * &self.value(*x).mapv(|z| gelu(z).1);
                    send(*x, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    send(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(
                        *gamma,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * self.value(*gamma);
                    let d = dxhat.ncols() as f64;
                    let mut dx = Mat::zeros(dxhat.raw_dim());
                    for i in 0..dxhat.nrows() {
                        let row = dxhat.row(i);
                        let xh = xhat.row(i);
                        let m1 = row.sum() / d;
                        let m2 = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
                        for j in 0..dxhat.ncols() {
                            dx[[i, j]] = inv_std[i] * (row[j] - m1 - xh[j] * m2);
                        }
                    }
                    send(*x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dh = qv.ncols() / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(qv.raw_dim());
                    let mut dk = Mat::zeros(kv.raw_dim());
                    let mut dv = Mat::zeros(vv.raw_dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = h * dh..(h + 1) * dh;
                        let go = g.slice(s![.., cols.clone()]);
                        let vh = vv.slice(s![.., cols.clone()]);
                        dv.slice_mut(s![.., cols.clone()]).assign(&p.t().dot(&go));
                        let mut ds = go.dot(&vh.t());
                        for (mut drow, prow) in ds.outer_iter_mut().zip(p.outer_iter()) {
                            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for (dz, &pz) in drow.iter_mut().zip(prow) {
                                *dz = pz * (*dz - dot) * scale;
                            }
                        }
                        let kh = kv.slice(s![.., cols.clone()]);
                        let qh = qv.slice(s![.., cols.clone()]);
                        dq.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&kh));
                        dk.slice_mut(s![.., cols]).assign(&ds.t().dot(&qh));
                    }
                    send(*q, dq);
                    send(*k, dk);
                    send(*v, dv);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        send(*p, g.slice(s![at..at + n, ..]).to_owned());
                        at += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        send(*p, g.slice(s![.., at..at + n]).to_owned());
                        at += n;
                    }
                }
                Op::Rows { x, start } => {
                    let mut d = Mat::zeros(self.value(*x).raw_dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    send(*x, d);
                }
                Op::PoolRows { x, windows } => {
                    let mut d = Mat::zeros(self.value(*x).raw_dim());
                    for (i, w) in windows.iter().enumerate() {
                        let share = g.row(i).mapv(|z| z / w.len() as f64);
                        for r in w.clone() {
                            let mut row = d.row_mut(r);
                            row += &share;
                        }
                    }
                    send(*x, d);
                }
                Op::Conv3x3 {
                    x,
                    w,
                    b,
                    height,
                    width,
                    cols,
                } => {
                    send(*b, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    send(*w, g.dot(&cols.t()));
                    let dcols = self.value(*w).t().dot(&g);
                    let c_in = self.value(*x).nrows();
                    send(*x, col2im(&dcols, c_in, *height, *width));
                }
                Op::AvgPool2 { x, height, width } => {
                    let (oh, ow) = (height / 2, width / 2);
                    let mut d = Mat::zeros(self.value(*x).raw_dim());
                    for c in 0..g.nrows() {
                        for i in 0..oh {
                            for j in 0..ow {
                                let share = 0.25 * g[[c, i * ow + j]];
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        d[[c, (2 * i + di) * width + 2 * j + dj]] += share;
                                    }
                                }
                            }
                        }
                    }
                    send(*x, d);
                }
                Op::Flatten(x) => {
                    let shape = self.value(*x).raw_dim();
                    let d = Mat::from_shape_vec(shape, g.iter().copied().collect())
                        .expect("flatten shape");
                    send(*x, d);
                }
                Op::Bce {
                    logits,
                    targets,
                    weights,
                } => {
                    let upstream = g[[0, 0]];
                    let z = self.value(*logits);
                    let mut d = Mat::zeros(z.raw_dim());
                    for i in 0..z.nrows() {
                        d[[i, 0]] = upstream * weights[i] * (sigmoid(z[[i, 0]]) - targets[i]);
                    }
                    send(*logits, d);
                }
            }
        }
        grads
    }
}

fn accumulate(slot: &mut Option<Mat>, d: Mat) {
    match slot {
        Some(acc) => *acc += &d,
        None => *slot = Some(d),
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// GELU value and derivative (tanh approximation).
fn gelu(z: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (z + 0.044715 * z * z * z);
    let t = inner.tanh();
    let value = 0.5 * z * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * z * z);
    let deriv = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner;
    (value, deriv)
}

fn im2col(x: &Mat, height: usize, width: usize) -> Mat {
    let c_in = x.nrows();
    let mut cols = Mat::zeros((c_in * 9, height * width));
    for c in 0..c_in {
        for ki in 0..3 {
            for kj in 0..3 {
                let r = c * 9 + ki * 3 + kj;
                for i in 0..height {
                    let si = i as isize + ki as isize - 1;
                    if si < 0 || si >= height as isize {
                        continue;
                    }
                    for j in 0..width {
                        let sj = j as isize + kj as isize - 1;
                        if sj < 0 || sj >= width as isize {
                            continue;
                        }
                        cols[[r, i * width + j]] = x[[c, si as usize * width + sj as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Mat, c_in: usize, height: usize, width: usize) -> Mat {
    let mut dx = Mat::zeros((c_in, height * width));
    for c in 0..c_in {
        for ki in 0..3 {
            for kj in 0..3 {
                let r = c * 9 + ki * 3 + kj;
                for i in 0..height {
                    let si = i as isize + ki as isize - 1;
                    if si < 0 || si >= height as isize {
                        continue;
                    }
                    for j in 0..width {
                        let sj = j as isize + kj as isize - 1;
                        if sj < 0 || sj >= width as isize {
                            continue;
                        }
                        dx[[c, si as usize * width + sj as usize]] += dcols[[r, i * width + j]];
                    }
                }
            }
        }
    }
    dx
}
