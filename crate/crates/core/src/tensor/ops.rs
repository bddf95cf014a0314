use super::{numel, Tensor};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn expect_rank(op: &str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Dimension(format!(
            "{op}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// (outer, axis length, inner) strides for reducing along `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `a · bᵀ` for a:[m,n], b:[k,n] → [m,k]
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `aᵀ · b` for a:[m,k], b:[m,n] → [k,n]
fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

impl Tensor {
    fn elementwise_unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let x = self.to_vec();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let y_saved = y.clone();
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let dx = g
                    .iter()
                    .zip(x.iter().zip(&y_saved))
                    .map(|(gv, (&xv, &yv))| gv * df(xv, yv))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        expect_rank("matmul", self, 2)?;
        expect_rank("matmul", other, 2)?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(dim_err("matmul", self.shape(), other.shape()));
        }
        let out = matmul_raw(&self.values(), &other.values(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let da = needs[0].then(|| matmul_a_bt(g, &b.values(), m, n, k));
                let db = needs[1].then(|| matmul_at_b(&a.values(), g, m, k, n));
                vec![da, db]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        expect_rank("transpose", self, 2)?;
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let x = self.values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            "transpose",
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(dim_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(dim_err("add", self.shape(), other.shape()));
        }
        let out = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(dim_err("sub", self.shape(), other.shape()));
        }
        let out = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(dim_err("mul", self.shape(), other.shape()));
        }
        let out = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let da = needs[0].then(|| {
                    g.iter()
                        .zip(b.values().iter())
                        .map(|(g, b)| g * b)
                        .collect()
                });
                let db = needs[1].then(|| {
                    g.iter()
                        .zip(a.values().iter())
                        .map(|(g, a)| g * a)
                        .collect()
                });
                vec![da, db]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.values().iter().map(|v| v * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    /// `self + other` where `other`'s shape equals the trailing axes of
    /// `self`; the gradient of `other` sums over the broadcast leading axes.
    pub fn add_broadcast(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if b.len() > a.len() || a[a.len() - b.len()..] != *b {
            return Err(dim_err("add_broadcast", a, b));
        }
        let inner = other.numel().max(1);
        let bv = other.values();
        let out = self
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % inner])
            .collect();
        drop(bv);
        Ok(Tensor::from_op(
            "add_broadcast",
            a.to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let db = needs[1].then(|| {
                    let mut db = vec![0.0; inner];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % inner] += gv;
                    }
                    db
                });
                vec![Some(g.to_vec()), db]
            }),
        ))
    }

    /// `self[i, j] + other[i]` for `self:[m,n]`, `other:[m]`.
    pub fn add_column(&self, other: &Tensor) -> Result<Tensor> {
        expect_rank("add_column", self, 2)?;
        let (m, n) = (self.shape()[0], self.shape()[1]);
        if other.shape() != [m] {
            return Err(dim_err("add_column", self.shape(), other.shape()));
        }
        let bv = other.values();
        let out = self
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i / n])
            .collect();
        drop(bv);
        Ok(Tensor::from_op(
            "add_column",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let db = needs[1].then(|| g.chunks(n).map(|row| row.iter().sum()).collect());
                vec![Some(g.to_vec()), db]
            }),
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.values().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.values().iter().sum();
        Tensor::from_op(
            "mean",
            Vec::new(),
            vec![s / n as f64],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0] / n as f64; n])]),
        )
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let (outer, n, inner) = axis_layout(self.shape(), axis);
        let x = self.values();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| x[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..n {
                    let e = (x[idx(i)] - max).exp();
                    y[idx(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    y[idx(i)] /= total;
                }
            }
        }
        drop(x);
        let saved = y.clone();
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let dot: f64 = (0..n).map(|i| g[idx(i)] * saved[idx(i)]).sum();
                        for i in 0..n {
                            dx[idx(i)] = saved[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Row-wise softmax of `self:[r,c]` restricted to columns where
    /// `keep[c]` is true. Masked columns get probability exactly 0 (the
    /// −∞ logit limit). A row with no kept column puts all its mass on
    /// column 0.
    pub fn masked_softmax(&self, keep: &[bool]) -> Result<Tensor> {
        expect_rank("masked_softmax", self, 2)?;
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if keep.len() != c {
            return Err(Error::Dimension(format!(
                "masked_softmax: mask of length {} for {c} columns",
                keep.len()
            )));
        }
        let x = self.values();
        let mut y = vec![0.0; r * c];
        let any_kept = keep.iter().any(|&k| k);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let out = &mut y[i * c..(i + 1) * c];
            if !any_kept {
                out[0] = 1.0;
                continue;
            }
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..c {
                if keep[j] {
                    out[j] = (row[j] - max).exp();
                    total += out[j];
                }
            }
            out.iter_mut().for_each(|v| *v /= total);
        }
        drop(x);
        let saved = y.clone();
        Ok(Tensor::from_op(
            "masked_softmax",
            vec![r, c],
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let ys = &saved[i * c..(i + 1) * c];
                    let gs = &g[i * c..(i + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Layer normalization over the last axis with learned `gain` and `bias`.
    pub fn layernorm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| Error::DegenerateAxis("layernorm of a scalar".into()))?;
        if n < 2 {
            return Err(Error::DegenerateAxis(format!(
                "layernorm needs a normalization axis of length >= 2, got shape {:?}",
                self.shape()
            )));
        }
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(dim_err("layernorm", self.shape(), gain.shape()));
        }
        let x = self.values();
        let gv = gain.values();
        let bv = bias.values();
        let rows = x.len() / n;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                y[r * n + j] = h * gv[j] + bv[j];
            }
        }
        drop((x, gv, bv));
        let gain_c = gain.clone();
        Ok(Tensor::from_op(
            "layernorm",
            self.shape().to_vec(),
            y,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, needs| {
                let gv = gain_c.values();
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; g.len()];
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let gs = &g[r * n..(r + 1) * n];
                        let hs = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gs[j] * gv[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hs).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] =
                                inv_std[r] / n as f64 * (n as f64 * dxhat[j] - s1 - hs[j] * s2);
                        }
                    }
                    dx
                });
                let dg = needs[1].then(|| {
                    let mut dg = vec![0.0; n];
                    for (i, (gv, hv)) in g.iter().zip(&xhat).enumerate() {
                        dg[i % n] += gv * hv;
                    }
                    dg
                });
                let db = needs[2].then(|| {
                    let mut db = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    db
                });
                vec![dx, dg, db]
            }),
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        self.elementwise_unary(
            "gelu",
            |x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x.powi(3))).tanh()),
            |x, _| {
                let t = (SQRT_2_OVER_PI * (x + GELU_C * x.powi(3))).tanh();
                0.5 * (1.0 + t)
                    + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
            },
        )
    }

    pub fn tanh(&self) -> Tensor {
        self.elementwise_unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Rows of `table:[V,H]` selected by `ids` → `[ids.len(), H]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        expect_rank("gather_rows", self, 2)?;
        let (v, h) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Vocab { id: bad, size: v });
        }
        let table = self.values();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            out.extend_from_slice(&table[id * h..(id + 1) * h]);
        }
        drop(table);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            "gather_rows",
            vec![ids.len(), h],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dt = vec![0.0; v * h];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..h {
                        dt[id * h + j] += g[r * h + j];
                    }
                }
                vec![Some(dt)]
            }),
        ))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        expect_rank("slice_rows", self, 2)?;
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if start >= end || end > r {
            return Err(Error::Dimension(format!(
                "slice_rows: range {start}..{end} invalid for shape {:?}",
                self.shape()
            )));
        }
        let out = self.values()[start * c..end * c].to_vec();
        Ok(Tensor::from_op(
            "slice_rows",
            vec![end - start, c],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; r * c];
                dx[start * c..end * c].copy_from_slice(g);
                vec![Some(dx)]
            }),
        ))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        expect_rank("slice_cols", self, 2)?;
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if start >= end || end > c {
            return Err(Error::Dimension(format!(
                "slice_cols: range {start}..{end} invalid for shape {:?}",
                self.shape()
            )));
        }
        let w = end - start;
        let x = self.values();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + end]);
        }
        drop(x);
        Ok(Tensor::from_op(
            "slice_cols",
            vec![r, w],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Side-by-side concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_cols of nothing".into()))?;
        for p in parts {
            expect_rank("concat_cols", p, 2)?;
            if p.shape()[0] != first.shape()[0] {
                return Err(dim_err("concat_cols", first.shape(), p.shape()));
            }
        }
        let r = first.shape()[0];
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        let c: usize = widths.iter().sum();
        let mut out = vec![0.0; r * c];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let x = p.values();
            for i in 0..r {
                out[i * c + offset..i * c + offset + w].copy_from_slice(&x[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(Tensor::from_op(
            "concat_cols",
            vec![r, c],
            out,
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut offset = 0;
                for (&w, &need) in widths.iter().zip(needs) {
                    grads.push(need.then(|| {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * c + offset..i * c + offset + w]);
                        }
                        d
                    }));
                    offset += w;
                }
                grads
            }),
        ))
    }
}

/// Mean over all elements of `(pred − target)²`. The target is treated as a
/// constant: no gradient is ever propagated into it.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(dim_err("mse_loss", pred.shape(), target.shape()));
    }
    let n = pred.numel() as f64;
    let diff: Vec<f64> = pred
        .values()
        .iter()
        .zip(target.values().iter())
        .map(|(p, t)| p - t)
        .collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok(Tensor::from_op(
        "mse_loss",
        Vec::new(),
        vec![loss],
        vec![pred.clone()],
        Box::new(move |g, _| vec![Some(diff.iter().map(|d| 2.0 * d / n * g[0]).collect())]),
    ))
}

/// Mean negative log-likelihood of `labels` under a row-wise softmax of
/// `logits:[N,C]`, computed through a fused log-sum-exp.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    expect_rank("cross_entropy", logits, 2)?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "cross_entropy: {} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label(format!("label {bad} outside [0, {c})")));
    }
    let x = logits.values();
    let mut probs = vec![0.0; n * c];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &x[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + total.ln();
        loss += lse - row[labels[i]];
        for j in 0..c {
            probs[i * c + j] = (row[j] - lse).exp();
        }
    }
    drop(x);
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        "cross_entropy",
        Vec::new(),
        vec![loss / n as f64],
        vec![logits.clone()],
        Box::new(move |g, _| {
            let mut d = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                d[i * c + l] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= g[0] / n as f64);
            vec![Some(d)]
        }),
    ))
}
