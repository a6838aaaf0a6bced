use super::{numel, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    (numel(shape) / last.max(1), last)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op("add", self.shape().to_vec(), data, vec![self.clone(), other.clone()], |g, _| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op("sub", self.shape().to_vec(), data, vec![self.clone(), other.clone()], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let a = self.to_vec();
        let b = other.to_vec();
        let data: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        Ok(Tensor::from_op("mul", self.shape().to_vec(), data, vec![self.clone(), other.clone()], move |g, need| {
            vec![
                need[0].then(|| g.iter().zip(&b).map(|(g, y)| g * y).collect()),
                need[1].then(|| g.iter().zip(&a).map(|(g, x)| g * x).collect()),
            ]
        }))
    }

    /// Adds `bias` along the trailing dimensions: `bias.shape()` must equal
    /// the last `bias.rank()` dims of `self`.
    pub fn add_broadcast(&self, bias: &Tensor) -> Result<Tensor> {
        let tail = bias.shape();
        let shape = self.shape();
        if tail.len() > shape.len() || &shape[shape.len() - tail.len()..] != tail {
            return Err(Error::dim(format!(
                "add_broadcast: bias shape {tail:?} is not a suffix of {shape:?}"
            )));
        }
        let b = bias.to_vec();
        let n = b.len();
        let data: Vec<f64> = self.data().iter().enumerate().map(|(i, v)| v + b[i % n]).collect();
        Ok(Tensor::from_op("add_broadcast", shape.to_vec(), data, vec![self.clone(), bias.clone()], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    acc[i % n] += v;
                }
                acc
            });
            vec![Some(g.to_vec()), gb]
        }))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op("scale", self.shape().to_vec(), data, vec![self.clone()], move |g, _| {
            vec![Some(g.iter().map(|v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + s).collect();
        Tensor::from_op("add_scalar", self.shape().to_vec(), data, vec![self.clone()], |g, _| vec![Some(g.to_vec())])
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        let x = self.to_vec();
        let data = x.iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op("relu", self.shape().to_vec(), data, vec![self.clone()], move |g, _| {
            vec![Some(g.iter().zip(&x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect())]
        })
    }

    pub fn exp(&self) -> Tensor {
        let y: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        let yc = y.clone();
        Tensor::from_op("exp", self.shape().to_vec(), y, vec![self.clone()], move |g, _| {
            vec![Some(g.iter().zip(&yc).map(|(g, y)| g * y).collect())]
        })
    }

    pub fn log(&self) -> Tensor {
        let x = self.to_vec();
        let data = x.iter().map(|v| v.ln()).collect();
        Tensor::from_op("log", self.shape().to_vec(), data, vec![self.clone()], move |g, _| {
            vec![Some(g.iter().zip(&x).map(|(g, x)| g / x).collect())]
        })
    }

    pub fn square(&self) -> Tensor {
        let x = self.to_vec();
        let data = x.iter().map(|v| v * v).collect();
        Tensor::from_op("square", self.shape().to_vec(), data, vec![self.clone()], move |g, _| {
            vec![Some(g.iter().zip(&x).map(|(g, x)| 2.0 * g * x).collect())]
        })
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![1], vec![s], vec![self.clone()], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op("mean", vec![1], vec![s], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0] / n as f64; n])]
        })
    }

    /// Mean over the leading axis of a matrix: `[n, d] -> [d]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim(format!("mean_rows needs a matrix, got {:?}", self.shape())));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&x[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        drop(x);
        Ok(Tensor::from_op("mean_rows", vec![d], out, vec![self.clone()], move |g, _| {
            let mut gx = Vec::with_capacity(n * d);
            for _ in 0..n {
                gx.extend(g.iter().map(|v| v / n as f64));
            }
            vec![Some(gx)]
        }))
    }

    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        Ok(self.mul(other)?.sum())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let a = self.to_vec();
        let b = other.to_vec();
        let out = matmul_raw(&a, &b, m, k, n);
        Ok(Tensor::from_op("matmul", vec![m, n], out, vec![self.clone(), other.clone()], move |g, need| {
            // dA = G B^T, dB = A^T G
            let ga = need[0].then(|| matmul_a_bt(g, &b, m, n, k));
            let gb = need[1].then(|| matmul_at_b(&a, g, m, k, n));
            vec![ga, gb]
        }))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim(format!("transpose needs a matrix, got {:?}", self.shape())));
        }
        self.permute(&[1, 0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Reorders axes; `axes[i]` names the source axis placed at position `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!("invalid permutation {axes:?} for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let src_strides = strides(shape);
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        // index map: out position -> source position
        let n = self.numel();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum::<usize>());
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let x = self.data();
        let data: Vec<f64> = map.iter().map(|&s| x[s]).collect();
        drop(x);
        Ok(Tensor::from_op("permute", out_shape, data, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n];
            for (o, &s) in map.iter().enumerate() {
                gx[s] = g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Contiguous slab `[start, start+len)` along the leading axis.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return Err(Error::dim(format!("narrow {start}+{len} out of range for {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let total = self.numel();
        let data = self.data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        Ok(Tensor::from_op("narrow", out_shape, data, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; total];
            gx[start * inner..(start + len) * inner].copy_from_slice(g);
            vec![Some(gx)]
        }))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::arg("stack of zero tensors"))?;
        let inner = first.shape().to_vec();
        if let Some(bad) = items.iter().find(|t| t.shape() != inner.as_slice()) {
            return Err(Error::dim(format!("stack: shapes {inner:?} and {:?} differ", bad.shape())));
        }
        let n = first.numel();
        let mut data = Vec::with_capacity(n * items.len());
        for t in items {
            data.extend_from_slice(&t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        let count = items.len();
        Ok(Tensor::from_op("stack", shape, data, items.to_vec(), move |g, need| {
            (0..count).map(|i| need[i].then(|| g[i * n..(i + 1) * n].to_vec())).collect()
        }))
    }

    /// Concatenates matrices along the column axis: `[r, a] ++ [r, b] -> [r, a+b]`.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dim(format!("concat_cols: {sa:?} and {sb:?}")));
        }
        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.data(), other.data());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(&a[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&b[i * cb..(i + 1) * cb]);
        }
        drop((a, b));
        let w = ca + cb;
        Ok(Tensor::from_op("concat_cols", vec![r, w], data, vec![self.clone(), other.clone()], move |g, need| {
            let ga = need[0].then(|| (0..r).flat_map(|i| g[i * w..i * w + ca].to_vec()).collect());
            let gb = need[1].then(|| (0..r).flat_map(|i| g[i * w + ca..(i + 1) * w].to_vec()).collect());
            vec![ga, gb]
        }))
    }

    /// Main diagonal of a (possibly rectangular) matrix.
    pub fn diag(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim(format!("diag needs a matrix, got {:?}", self.shape())));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let k = r.min(c);
        let data = (0..k).map(|i| self.data()[i * c + i]).collect();
        Ok(Tensor::from_op("diag", vec![k], data, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; r * c];
            for i in 0..k {
                gx[i * c + i] = g[i];
            }
            vec![Some(gx)]
        }))
    }

    /// Picks `x[i, index[i]]` from each row of a matrix.
    pub fn pick(&self, index: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || index.len() != self.shape()[0] {
            return Err(Error::dim(format!("pick: {} indices for shape {:?}", index.len(), self.shape())));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if let Some(bad) = index.iter().find(|&&j| j >= c) {
            return Err(Error::dim(format!("pick: column {bad} out of range for {c} columns")));
        }
        let idx = index.to_vec();
        let data = (0..r).map(|i| self.data()[i * c + idx[i]]).collect();
        Ok(Tensor::from_op("pick", vec![r], data, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                gx[i * c + idx[i]] = g[i];
            }
            vec![Some(gx)]
        }))
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax(&self) -> Result<Tensor> {
        let x = self.data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (rows, n) = split_last(self.shape());
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let xs = &x[r * n..(r + 1) * n];
            let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ys = &mut y[r * n..(r + 1) * n];
            let mut s = 0.0;
            for (o, v) in ys.iter_mut().zip(xs) {
                *o = (v - m).exp();
                s += *o;
            }
            ys.iter_mut().for_each(|o| *o /= s);
        }
        drop(x);
        let yc = y.clone();
        Ok(Tensor::from_op("softmax", self.shape().to_vec(), y, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for r in 0..rows {
                let (ys, gs) = (&yc[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                let inner: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                for j in 0..n {
                    gx[r * n + j] = ys[j] * (gs[j] - inner);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `x - logsumexp(x)` along the last axis.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let x = self.data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("log_softmax input contains NaN".into()));
        }
        let (rows, n) = split_last(self.shape());
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let xs = &x[r * n..(r + 1) * n];
            let lse = logsumexp(xs);
            for j in 0..n {
                y[r * n + j] = xs[j] - lse;
            }
        }
        drop(x);
        let yc = y.clone();
        Ok(Tensor::from_op("log_softmax", self.shape().to_vec(), y, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for r in 0..rows {
                let gs = &g[r * n..(r + 1) * n];
                let total: f64 = gs.iter().sum();
                for j in 0..n {
                    gx[r * n + j] = gs[j] - yc[r * n + j].exp() * total;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Scales each vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&self, eps: f64) -> Tensor {
        let (rows, n) = split_last(self.shape());
        let x = self.to_vec();
        let norms: Vec<f64> = (0..rows)
            .map(|r| x[r * n..(r + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt().max(eps))
            .collect();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v / norms[i / n]).collect();
        let yc = y.clone();
        Tensor::from_op("l2_normalize", self.shape().to_vec(), y, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for r in 0..rows {
                let (ys, gs) = (&yc[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                let inner: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                for j in 0..n {
                    gx[r * n + j] = (gs[j] - ys[j] * inner) / norms[r];
                }
            }
            vec![Some(gx)]
        })
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `G[m,n] * B[k,n]^T -> [m,k]`
pub(crate) fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = gr.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `A[m,k]^T * G[m,n] -> [k,n]`
pub(crate) fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
    out
}
