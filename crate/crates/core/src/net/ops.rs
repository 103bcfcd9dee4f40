//! Forward kernels and their adjoints for the fixed primitive set.
//!
//! Convolutions are stride 1 with zero padding `k / 2` for an odd square
//! kernel of size `k`, so spatial size is preserved.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Shape4, Tensor4};

fn check_kernel(x: Shape4, kernel: Shape4, bias_len: usize) -> Result<()> {
    if kernel.c != x.c {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kernel} expects {} input channels, got {x}", kernel.c),
        ));
    }
    if kernel.h != kernel.w || kernel.h % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel {kernel} must be odd and square")));
    }
    if bias_len != kernel.n {
        return Err(Error::shape(
            "conv2d",
            format!("{bias_len} biases for {} output channels", kernel.n),
        ));
    }
    Ok(())
}

/// Valid output rows (or columns) for kernel offset `k` with padding `pad`.
#[inline]
fn valid_range(k: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi)
}

pub fn conv2d(x: &Tensor4, kernel: &Tensor4, bias: &[f64]) -> Result<Tensor4> {
    let (xs, ks) = (x.shape(), kernel.shape());
    check_kernel(xs, ks, bias.len())?;
    let pad = ks.h / 2;
    let (h, w) = (xs.h, xs.w);
    let mut out = Tensor4::zeros(Shape4::new(xs.n, ks.n, h, w));
    for n in 0..xs.n {
        for co in 0..ks.n {
            let o = out.plane_mut(n, co);
            o.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..xs.c {
                let inp = x.plane(n, ci);
                for kh in 0..ks.h {
                    let (oh_lo, oh_hi) = valid_range(kh, pad, h);
                    for kw in 0..ks.w {
                        let wv = kernel.get(co, ci, kh, kw);
                        let (ow_lo, ow_hi) = valid_range(kw, pad, w);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - pad;
                            let orow = &mut o[oh * w + ow_lo..oh * w + ow_hi];
                            let irow = &inp[ih * w + ow_lo + kw - pad..ih * w + ow_hi + kw - pad];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward_input(dy: &Tensor4, kernel: &Tensor4) -> Tensor4 {
    let (ds, ks) = (dy.shape(), kernel.shape());
    let pad = ks.h / 2;
    let (h, w) = (ds.h, ds.w);
    let mut dx = Tensor4::zeros(Shape4::new(ds.n, ks.c, h, w));
    for n in 0..ds.n {
        for ci in 0..ks.c {
            let d = dx.plane_mut(n, ci);
            for co in 0..ks.n {
                let g = dy.plane(n, co);
                for kh in 0..ks.h {
                    let (oh_lo, oh_hi) = valid_range(kh, pad, h);
                    for kw in 0..ks.w {
                        let wv = kernel.get(co, ci, kh, kw);
                        let (ow_lo, ow_hi) = valid_range(kw, pad, w);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - pad;
                            let drow = &mut d[ih * w + ow_lo + kw - pad..ih * w + ow_hi + kw - pad];
                            let grow = &g[oh * w + ow_lo..oh * w + ow_hi];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Kernel and bias gradients.
pub fn conv2d_backward_params(dy: &Tensor4, x: &Tensor4, kernel_shape: Shape4) -> (Tensor4, Vec<f64>) {
    let (ds, xs, ks) = (dy.shape(), x.shape(), kernel_shape);
    let pad = ks.h / 2;
    let (h, w) = (xs.h, xs.w);
    let mut dk = Tensor4::zeros(ks);
    let mut db = vec![0.0; ks.n];
    for n in 0..ds.n {
        for co in 0..ks.n {
            let g = dy.plane(n, co);
            db[co] += g.iter().sum::<f64>();
            for ci in 0..ks.c {
                let inp = x.plane(n, ci);
                for kh in 0..ks.h {
                    let (oh_lo, oh_hi) = valid_range(kh, pad, h);
                    for kw in 0..ks.w {
                        let (ow_lo, ow_hi) = valid_range(kw, pad, w);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - pad;
                            let grow = &g[oh * w + ow_lo..oh * w + ow_hi];
                            let irow = &inp[ih * w + ow_lo + kw - pad..ih * w + ow_hi + kw - pad];
                            acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        let i = ks.index(co, ci, kh, kw);
                        dk.data_mut()[i] += acc;
                    }
                }
            }
        }
    }
    (dk, db)
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(dy: &[f64], x: &[f64]) -> Vec<f64> {
    dy.iter().zip(x).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect()
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2(x: &Tensor4) -> Result<Tensor4> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape("avg_pool2", format!("odd spatial size in {s}")));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let p = x.plane(n, c);
            let o = out.plane_mut(n, c);
            for i in 0..oh {
                for j in 0..ow {
                    let a = p[2 * i * s.w + 2 * j];
                    let b = p[2 * i * s.w + 2 * j + 1];
                    let cc = p[(2 * i + 1) * s.w + 2 * j];
                    let d = p[(2 * i + 1) * s.w + 2 * j + 1];
                    o[i * ow + j] = 0.25 * (a + b + cc + d);
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward(dy: &Tensor4) -> Tensor4 {
    let s = dy.shape();
    let (h, w) = (2 * s.h, 2 * s.w);
    let mut dx = Tensor4::zeros(Shape4::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            let g = dy.plane(n, c);
            let d = dx.plane_mut(n, c);
            for i in 0..h {
                for j in 0..w {
                    d[i * w + j] = 0.25 * g[(i / 2) * s.w + j / 2];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let (h, w) = (2 * s.h, 2 * s.w);
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            let p = x.plane(n, c);
            let o = out.plane_mut(n, c);
            for i in 0..h {
                for j in 0..w {
                    o[i * w + j] = p[(i / 2) * s.w + j / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor4) -> Tensor4 {
    let s = dy.shape();
    let (h, w) = (s.h / 2, s.w / 2);
    let mut dx = Tensor4::zeros(Shape4::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            let g = dy.plane(n, c);
            let d = dx.plane_mut(n, c);
            for i in 0..s.h {
                for j in 0..s.w {
                    d[(i / 2) * w + j / 2] += g[i * s.w + j];
                }
            }
        }
    }
    dx
}

/// Adjoint of the per-plane mean.
pub fn channel_mean_backward(dm: &Matrix, shape: Shape4) -> Tensor4 {
    let mut dx = Tensor4::zeros(shape);
    let inv = 1.0 / shape.plane() as f64;
    for n in 0..shape.n {
        for c in 0..shape.c {
            let g = dm.get(n, c) * inv;
            dx.plane_mut(n, c).iter_mut().for_each(|v| *v = g);
        }
    }
    dx
}

/// Adjoint of `sqrt(var + eps)`: `d/dx_i = (x_i - mean) / (M * std)`.
pub fn channel_std_backward(ds: &Matrix, x: &Tensor4, mean: &Matrix, std: &Matrix) -> Tensor4 {
    let shape = x.shape();
    let m = shape.plane() as f64;
    let mut dx = Tensor4::zeros(shape);
    for n in 0..shape.n {
        for c in 0..shape.c {
            let k = ds.get(n, c) / (m * std.get(n, c));
            let mu = mean.get(n, c);
            for (d, &v) in dx.plane_mut(n, c).iter_mut().zip(x.plane(n, c)) {
                *d = k * (v - mu);
            }
        }
    }
    dx
}

/// Adjoint of `z = (x - mean) / std` with `std = sqrt(var + eps)`:
/// `dx = (g - mean(g) - z * mean(g * z)) / std`.
pub fn whiten_backward(dz: &Tensor4, z: &Tensor4, std: &Matrix) -> Tensor4 {
    let shape = z.shape();
    let m = shape.plane() as f64;
    let mut dx = Tensor4::zeros(shape);
    for n in 0..shape.n {
        for c in 0..shape.c {
            let g = dz.plane(n, c);
            let zp = z.plane(n, c);
            let g_mean = g.iter().sum::<f64>() / m;
            let gz_mean = g.iter().zip(zp).map(|(a, b)| a * b).sum::<f64>() / m;
            let inv = 1.0 / std.get(n, c);
            for ((d, &gv), &zv) in dx.plane_mut(n, c).iter_mut().zip(g).zip(zp) {
                *d = (gv - g_mean - zv * gz_mean) * inv;
            }
        }
    }
    dx
}
