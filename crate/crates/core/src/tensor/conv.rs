use super::ops::{matmul_a_bt, matmul_at_b, matmul_raw};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.positions();
    let mut cols = vec![0.0; g.patch() * p];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..];
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[oi * g.w_out + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geometry, out: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            out[base + jj as usize] += src[oi * g.w_out + oj];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation.
///
/// `input` is `[C_in, H, W]` or a batch `[N, C_in, H, W]`; `kernels` is
/// `[C_out, C_in, k, k]`; `bias`, when given, is `[C_out]`. Output spatial
/// size is `floor((H + 2p - k) / stride) + 1`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::arg("conv2d stride must be positive"));
    }
    let batched = match input.rank() {
        3 => false,
        4 => true,
        _ => return Err(Error::dim(format!("conv2d input must be [C,H,W] or [N,C,H,W], got {:?}", input.shape()))),
    };
    let s = input.shape();
    let (n, c_in, h, w) = if batched { (s[0], s[1], s[2], s[3]) } else { (1, s[0], s[1], s[2]) };
    let ks = kernels.shape();
    if ks.len() != 4 || ks[1] != c_in || ks[2] != ks[3] {
        return Err(Error::dim(format!(
            "conv2d kernels {ks:?} do not fit input {s:?} (expected [C_out, {c_in}, k, k])"
        )));
    }
    let (c_out, k) = (ks[0], ks[2]);
    if k > h + 2 * padding || k > w + 2 * padding {
        return Err(Error::dim(format!("conv2d kernel {k} larger than padded input {h}x{w}+{padding}")));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::dim(format!("conv2d bias {:?} should be [{c_out}]", b.shape())));
        }
    }
    let g = Geometry {
        c_in,
        h,
        w,
        k,
        stride,
        pad: padding,
        h_out: (h + 2 * padding - k) / stride + 1,
        w_out: (w + 2 * padding - k) / stride + 1,
    };
    let (kk, p) = (g.patch(), g.positions());
    let in_len = c_in * h * w;

    let x = input.to_vec();
    let wts = kernels.to_vec();
    let bias_v = bias.map(|b| b.to_vec());
    let keep_cols = kernels.requires_grad();

    let mut out = Vec::with_capacity(n * c_out * p);
    let mut saved_cols = Vec::new();
    for i in 0..n {
        let cols = im2col(&x[i * in_len..(i + 1) * in_len], &g);
        let mut y = matmul_raw(&wts, &cols, c_out, kk, p);
        if let Some(bv) = &bias_v {
            for (co, b) in bv.iter().enumerate() {
                y[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += b);
            }
        }
        out.extend_from_slice(&y);
        if keep_cols {
            saved_cols.push(cols);
        }
    }

    let out_shape = if batched { vec![n, c_out, g.h_out, g.w_out] } else { vec![c_out, g.h_out, g.w_out] };
    let mut parents = vec![input.clone(), kernels.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op("conv2d", out_shape, out, parents, move |grad, need| {
        let mut gx = need[0].then(|| vec![0.0; n * in_len]);
        let mut gw = need[1].then(|| vec![0.0; c_out * kk]);
        let mut gb = (has_bias && need[2]).then(|| vec![0.0; c_out]);
        for i in 0..n {
            let gi = &grad[i * c_out * p..(i + 1) * c_out * p];
            if let Some(gw) = gw.as_mut() {
                let d = matmul_a_bt(gi, &saved_cols[i], c_out, p, kk);
                gw.iter_mut().zip(d).for_each(|(a, b)| *a += b);
            }
            if let Some(gb) = gb.as_mut() {
                for co in 0..c_out {
                    gb[co] += gi[co * p..(co + 1) * p].iter().sum::<f64>();
                }
            }
            if let Some(gx) = gx.as_mut() {
                let dcols = matmul_at_b(&wts, gi, c_out, kk, p);
                col2im(&dcols, &g, &mut gx[i * in_len..(i + 1) * in_len]);
            }
        }
        let mut res = vec![gx, gw];
        if has_bias {
            res.push(gb);
        }
        res
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_identity_kernel_is_identity() {
        let x = Tensor::from_vec(&[2, 3, 3], (0..18).map(|v| v as f64 * 0.1).collect()).unwrap();
        let k = Tensor::from_vec(&[2, 2, 1, 1], vec![1., 0., 0., 1.]).unwrap();
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn ones_kernel_spreads_hot_pixel() {
        let mut v = vec![0.0; 25];
        v[2 * 5 + 2] = 1.0;
        let x = Tensor::from_vec(&[1, 5, 5], v).unwrap();
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        let y = y.to_vec();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if (1..=3).contains(&i) && (1..=3).contains(&j) { 1.0 } else { 0.0 };
                assert_eq!(y[i * 5 + j], expect, "({i},{j})");
            }
        }
    }

    #[test]
    fn output_size_formula_and_errors() {
        let x = Tensor::zeros(&[3, 16, 16]);
        let k = Tensor::zeros(&[16, 3, 3, 3]);
        let y = conv2d(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[16, 8, 8]);
        assert!(matches!(conv2d(&x, &k, None, 0, 1), Err(Error::Argument(_))));
        let bad = Tensor::zeros(&[16, 4, 3, 3]);
        assert!(matches!(conv2d(&x, &bad, None, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn batched_matches_per_image() {
        let mut rng = crate::tensor::RngState::new(3);
        let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let yb = conv2d(&x, &k, Some(&b), 2, 1).unwrap();
        for i in 0..2 {
            let xi = x.narrow(i, 1).unwrap().reshape(&[2, 5, 5]).unwrap();
            let yi = conv2d(&xi, &k, Some(&b), 2, 1).unwrap();
            assert_eq!(yb.narrow(i, 1).unwrap().to_vec(), yi.to_vec());
        }
    }
}
