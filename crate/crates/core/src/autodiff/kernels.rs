//! Forward and backward kernels on raw tensors.
//!
//! Feature maps are `[H, W, C]`, convolution kernels are `[k, k, Cin, Cout]`
//! and fully connected weights are `[M, N]` (output-major). Convolution is
//! cross-correlation; no kernel flip.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn conv_output_size(input: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn check_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<(usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "conv2d",
            format!("input must be [H,W,C], got {:?}", x.shape()),
        ));
    }
    if w.rank() != 4 || w.shape()[0] != w.shape()[1] {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be [k,k,Cin,Cout], got {:?}", w.shape()),
        ));
    }
    let k = w.shape()[0];
    if k % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel size {k} must be odd")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    let cin = x.shape()[2];
    if w.shape()[2] != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {}", w.shape()[2]),
        ));
    }
    let cout = w.shape()[3];
    if b.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} for {cout} filters", b.shape()),
        ));
    }
    Ok((k, cout))
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize, stride: usize) -> Result<Tensor> {
    let (k, cout) = check_conv(x, w, b, stride)?;
    let (h, wd, cin) = x.hwc();
    let (ho, wo) = match (
        conv_output_size(h, k, pad, stride),
        conv_output_size(wd, k, pad, stride),
    ) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("{h}x{wd} input too small for {k}x{k} kernel with pad {pad}"),
            ))
        }
    };
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let o = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            o.copy_from_slice(b.data());
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let xrow = &xd[(iy as usize * wd + ix as usize) * cin..][..cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wdat[wbase + ci * cout..][..cout];
                        for (ov, &wv) in o.iter_mut().zip(wrow) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![ho, wo, cout], out)
}

/// Gradients of a convolution. `dx` is skipped when `need_dx` is false and
/// `dw`/`db` when `need_dw` is false.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    pad: usize,
    stride: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (h, wd, cin) = x.hwc();
    let k = w.shape()[0];
    let (ho, wo, cout) = gout.hwc();
    let xd = x.data();
    let wdat = w.data();
    let gd = gout.data();
    let mut dx = need_dx.then(|| vec![0.0; h * wd * cin]);
    let mut dw = need_dw.then(|| vec![0.0; k * k * cin * cout]);
    let db = need_dw.then(|| {
        let mut db = vec![0.0; cout];
        for g in gd.chunks_exact(cout) {
            for (d, v) in db.iter_mut().zip(g) {
                *d += v;
            }
        }
        db
    });
    for oy in 0..ho {
        for ox in 0..wo {
            let g = &gd[(oy * wo + ox) * cout..][..cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let xoff = (iy as usize * wd + ix as usize) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let wrow = wbase + ci * cout;
                        if let Some(dw) = dw.as_mut() {
                            let xv = xd[xoff + ci];
                            if xv != 0.0 {
                                for (d, &gv) in dw[wrow..wrow + cout].iter_mut().zip(g) {
                                    *d += xv * gv;
                                }
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let s: f64 = wdat[wrow..wrow + cout].iter().zip(g).map(|(a, b)| a * b).sum();
                            dx[xoff + ci] += s;
                        }
                    }
                }
            }
        }
    }
    (
        dx.map(|d| Tensor::new(vec![h, wd, cin], d).expect("dx shape")),
        dw.map(|d| Tensor::new(vec![k, k, cin, cout], d).expect("dw shape")),
        db.map(|d| Tensor::new(vec![cout], d).expect("db shape")),
    )
}

pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 || w.rank() != 2 {
        return Err(Error::shape(
            "linear",
            format!("input {:?}, weight {:?}", x.shape(), w.shape()),
        ));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    if x.len() != n || b.shape() != [m] {
        return Err(Error::shape(
            "linear",
            format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let xd = x.data();
    let out = w
        .data()
        .chunks_exact(n)
        .zip(b.data())
        .map(|(row, &bi)| bi + row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    Ok(Tensor::from_vec(out))
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let n = w.shape()[1];
    let g = gout.data();
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; n];
        for (row, &gv) in w.data().chunks_exact(n).zip(g) {
            if gv == 0.0 {
                continue;
            }
            for (d, &wv) in dx.iter_mut().zip(row) {
                *d += gv * wv;
            }
        }
        Tensor::from_vec(dx)
    });
    let (dw, db) = if need_dw {
        let mut dw = vec![0.0; w.len()];
        for (row, &gv) in dw.chunks_exact_mut(n).zip(g) {
            if gv == 0.0 {
                continue;
            }
            for (d, &xv) in row.iter_mut().zip(x.data()) {
                *d = gv * xv;
            }
        }
        (
            Some(Tensor::new(w.shape().to_vec(), dw).expect("dw shape")),
            Some(gout.clone()),
        )
    } else {
        (None, None)
    };
    (dx, dw, db)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Max pooling over `[H, W, C]`; also returns, for every output element,
/// the flat input index it was taken from (first maximum in row-major scan).
pub fn maxpool2d(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "maxpool2d",
            format!("input must be [H,W,C], got {:?}", x.shape()),
        ));
    }
    if k == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "maxpool2d kernel and stride must be >= 1".into(),
        ));
    }
    let (h, w, c) = x.hwc();
    let (ho, wo) = match (conv_output_size(h, k, 0, stride), conv_output_size(w, k, 0, stride)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::shape("maxpool2d", format!("{h}x{w} smaller than window {k}"))),
    };
    let xd = x.data();
    let mut out = vec![0.0; ho * wo * c];
    let mut arg = vec![0usize; ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = ((oy * stride + ky) * w + ox * stride + kx) * c + ch;
                        if xd[idx] > best_v || best == usize::MAX {
                            best_v = xd[idx];
                            best = idx;
                        }
                    }
                }
                let o = (oy * wo + ox) * c + ch;
                out[o] = best_v;
                arg[o] = best;
            }
        }
    }
    Ok((Tensor::new(vec![ho, wo, c], out)?, arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], gout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&src, &g) in argmax.iter().zip(gout.data()) {
        d[src] += g;
    }
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(v))` without overflow.
pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}
