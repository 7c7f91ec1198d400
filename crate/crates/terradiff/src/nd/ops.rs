//! Forward kernels and their hand-derived adjoints.
//!
//! Each op comes as a pure forward function plus a `*_backward` companion
//! returning gradients w.r.t. every differentiable input. The tape wraps
//! these; inference paths call the forward functions directly.

use super::tensor::Tensor;
use rayon::prelude::*;

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v / (1.0 + (-v).exp()))
}

pub fn silu_backward(x: &Tensor, gout: &Tensor) -> Tensor {
    x.zip(gout, |v, g| {
        let s = 1.0 / (1.0 + (-v).exp());
        g * (s + v * s * (1.0 - s))
    })
}

/// 2-D convolution over NCHW input with zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (bn, ci, h, wd) = x.dims4();
    let (co, ci_w, kh, kw) = w.dims4();
    assert_eq!(ci, ci_w, "conv2d channel mismatch");
    assert_eq!(b.len(), co, "conv2d bias length");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[bn, co, ho, wo]);
    let xs = &x.data;
    let ws = &w.data;
    out.data
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(idx, plane)| {
            let bi = idx / co;
            let oc = idx % co;
            let bias = b.data[oc];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias;
                    for ic in 0..ci {
                        let xbase = ((bi * ci + ic) * h) * wd;
                        let wbase = ((oc * ci + ic) * kh) * kw;
                        for u in 0..kh {
                            let iy = oy * stride + u;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let iy = iy - pad;
                            for v in 0..kw {
                                let ix = ox * stride + v;
                                if ix < pad || ix >= wd + pad {
                                    continue;
                                }
                                let ix = ix - pad;
                                acc += xs[xbase + iy * wd + ix] * ws[wbase + u * kw + v];
                            }
                        }
                    }
                    plane[oy * wo + ox] = acc;
                }
            }
        });
    out
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (bn, ci, h, wd) = x.dims4();
    let (co, _, kh, kw) = w.dims4();
    let (_, _, ho, wo) = gout.dims4();
    let mut dw = Tensor::zeros(&w.shape);
    let mut db = Tensor::zeros(&[co]);
    // dw/db: independent per output channel.
    dw.data
        .par_chunks_mut(ci * kh * kw)
        .zip(db.data.par_iter_mut())
        .enumerate()
        .for_each(|(oc, (dwc, dbc))| {
            for bi in 0..bn {
                let gbase = ((bi * co + oc) * ho) * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = gout.data[gbase + oy * wo + ox];
                        *dbc += g;
                        for ic in 0..ci {
                            let xbase = ((bi * ci + ic) * h) * wd;
                            for u in 0..kh {
                                let iy = oy * stride + u;
                                if iy < pad || iy >= h + pad {
                                    continue;
                                }
                                let iy = iy - pad;
                                for v in 0..kw {
                                    let ix = ox * stride + v;
                                    if ix < pad || ix >= wd + pad {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    dwc[(ic * kh + u) * kw + v] += g * x.data[xbase + iy * wd + ix];
                                }
                            }
                        }
                    }
                }
            }
        });
    // dx: independent per (batch, input channel).
    let mut dx = Tensor::zeros(&x.shape);
    dx.data
        .par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(idx, plane)| {
            let bi = idx / ci;
            let ic = idx % ci;
            for oc in 0..co {
                let gbase = ((bi * co + oc) * ho) * wo;
                let wbase = ((oc * ci + ic) * kh) * kw;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = gout.data[gbase + oy * wo + ox];
                        for u in 0..kh {
                            let iy = oy * stride + u;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let iy = iy - pad;
                            for v in 0..kw {
                                let ix = ox * stride + v;
                                if ix < pad || ix >= wd + pad {
                                    continue;
                                }
                                let ix = ix - pad;
                                plane[iy * wd + ix] += g * w.data[wbase + u * kw + v];
                            }
                        }
                    }
                }
            }
        });
    (dx, dw, db)
}

/// Affine map over the last dimension: x [B, I] × wᵀ [I, O] + b.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (bn, i) = x.dims2();
    let (o, iw) = w.dims2();
    assert_eq!(i, iw, "linear input dim mismatch");
    let mut out = Tensor::zeros(&[bn, o]);
    for bi in 0..bn {
        for oi in 0..o {
            let mut acc = b.data[oi];
            for ii in 0..i {
                acc += x.data[bi * i + ii] * w.data[oi * iw + ii];
            }
            out.data[bi * o + oi] = acc;
        }
    }
    out
}

pub fn linear_backward(x: &Tensor, w: &Tensor, gout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bn, i) = x.dims2();
    let (o, _) = w.dims2();
    let mut dx = Tensor::zeros(&x.shape);
    let mut dw = Tensor::zeros(&w.shape);
    let mut db = Tensor::zeros(&[o]);
    for bi in 0..bn {
        for oi in 0..o {
            let g = gout.data[bi * o + oi];
            db.data[oi] += g;
            for ii in 0..i {
                dx.data[bi * i + ii] += g * w.data[oi * i + ii];
                dw.data[oi * i + ii] += g * x.data[bi * i + ii];
            }
        }
    }
    (dx, dw, db)
}

/// Group normalization with per-channel affine.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Tensor {
    let (bn, c, h, w) = x.dims4();
    assert_eq!(c % groups, 0, "channels not divisible by groups");
    let cg = c / groups;
    let gsize = cg * h * w;
    let mut out = Tensor::zeros(&x.shape);
    for bi in 0..bn {
        for gi in 0..groups {
            let base = (bi * c + gi * cg) * h * w;
            let slice = &x.data[base..base + gsize];
            let mu = slice.iter().sum::<f64>() / gsize as f64;
            let var = slice.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / gsize as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let (ga, be) = (gamma.data[ch], beta.data[ch]);
                for p in 0..h * w {
                    let idx = base + cc * h * w + p;
                    out.data[idx] = ga * (x.data[idx] - mu) * inv + be;
                }
            }
        }
    }
    out
}

pub fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    gout: &Tensor,
    groups: usize,
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let (bn, c, h, w) = x.dims4();
    let cg = c / groups;
    let gsize = cg * h * w;
    let mut dx = Tensor::zeros(&x.shape);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for bi in 0..bn {
        for gi in 0..groups {
            let base = (bi * c + gi * cg) * h * w;
            let xs = &x.data[base..base + gsize];
            let mu = xs.iter().sum::<f64>() / gsize as f64;
            let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / gsize as f64;
            let inv = 1.0 / (var + eps).sqrt();
            // dL/dy_hat (pre-affine normalized value) and its group statistics.
            let mut sum_dyh = 0.0;
            let mut sum_dyh_yh = 0.0;
            for cc in 0..cg {
                let ch = gi * cg + cc;
                for p in 0..h * w {
                    let off = cc * h * w + p;
                    let yh = (xs[off] - mu) * inv;
                    let g = gout.data[base + off];
                    dgamma.data[ch] += g * yh;
                    dbeta.data[ch] += g;
                    let dyh = g * gamma.data[ch];
                    sum_dyh += dyh;
                    sum_dyh_yh += dyh * yh;
                }
            }
            let n = gsize as f64;
            for cc in 0..cg {
                let ch = gi * cg + cc;
                for p in 0..h * w {
                    let off = cc * h * w + p;
                    let yh = (xs[off] - mu) * inv;
                    let dyh = gout.data[base + off] * gamma.data[ch];
                    dx.data[base + off] = inv * (dyh - sum_dyh / n - yh * sum_dyh_yh / n);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// 2x nearest-neighbour upsampling on NCHW.
pub fn nearest_up2(x: &Tensor) -> Tensor {
    let (bn, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[bn, c, h * 2, w * 2]);
    for i in 0..bn * c {
        for y in 0..h {
            for xx in 0..w {
                let v = x.data[(i * h + y) * w + xx];
                let ob = i * 4 * h * w;
                for dy in 0..2 {
                    for dxx in 0..2 {
                        out.data[ob + (2 * y + dy) * 2 * w + 2 * xx + dxx] = v;
                    }
                }
            }
        }
    }
    out
}

pub fn nearest_up2_backward(x: &Tensor, gout: &Tensor) -> Tensor {
    let (bn, c, h, w) = x.dims4();
    let mut dx = Tensor::zeros(&x.shape);
    for i in 0..bn * c {
        for y in 0..h {
            for xx in 0..w {
                let ob = i * 4 * h * w;
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dxx in 0..2 {
                        acc += gout.data[ob + (2 * y + dy) * 2 * w + 2 * xx + dxx];
                    }
                }
                dx.data[(i * h + y) * w + xx] = acc;
            }
        }
    }
    dx
}

/// Channel concatenation of two NCHW tensors.
pub fn concat_chan(a: &Tensor, b: &Tensor) -> Tensor {
    let (bn, ca, h, w) = a.dims4();
    let (bn2, cb, h2, w2) = b.dims4();
    assert_eq!((bn, h, w), (bn2, h2, w2), "concat spatial mismatch");
    let mut out = Tensor::zeros(&[bn, ca + cb, h, w]);
    let plane = h * w;
    for bi in 0..bn {
        let oa = bi * (ca + cb) * plane;
        out.data[oa..oa + ca * plane].copy_from_slice(&a.data[bi * ca * plane..(bi + 1) * ca * plane]);
        out.data[oa + ca * plane..oa + (ca + cb) * plane]
            .copy_from_slice(&b.data[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    out
}

pub fn concat_chan_backward(ca: usize, cb: usize, gout: &Tensor) -> (Tensor, Tensor) {
    let (bn, c, h, w) = gout.dims4();
    assert_eq!(c, ca + cb);
    let plane = h * w;
    let mut da = Tensor::zeros(&[bn, ca, h, w]);
    let mut db = Tensor::zeros(&[bn, cb, h, w]);
    for bi in 0..bn {
        let oa = bi * c * plane;
        da.data[bi * ca * plane..(bi + 1) * ca * plane].copy_from_slice(&gout.data[oa..oa + ca * plane]);
        db.data[bi * cb * plane..(bi + 1) * cb * plane]
            .copy_from_slice(&gout.data[oa + ca * plane..oa + c * plane]);
    }
    (da, db)
}

/// FiLM-style modulation: split e into (scale, shift) halves and apply
/// (1 + scale_c) * h + shift_c per channel.
pub fn scale_shift(h: &Tensor, e: &Tensor) -> Tensor {
    let (bn, c, hh, ww) = h.dims4();
    let (bne, d) = e.dims2();
    assert_eq!(bn, bne, "scale_shift batch mismatch");
    assert_eq!(d, 2 * c, "scale_shift embedding must have 2x channel length");
    let mut out = Tensor::zeros(&h.shape);
    let plane = hh * ww;
    for bi in 0..bn {
        for ch in 0..c {
            let sc = 1.0 + e.data[bi * d + ch];
            let sh = e.data[bi * d + c + ch];
            let base = (bi * c + ch) * plane;
            for p in 0..plane {
                out.data[base + p] = sc * h.data[base + p] + sh;
            }
        }
    }
    out
}

pub fn scale_shift_backward(h: &Tensor, e: &Tensor, gout: &Tensor) -> (Tensor, Tensor) {
    let (bn, c, hh, ww) = h.dims4();
    let d = 2 * c;
    let plane = hh * ww;
    let mut dh = Tensor::zeros(&h.shape);
    let mut de = Tensor::zeros(&e.shape);
    for bi in 0..bn {
        for ch in 0..c {
            let sc = 1.0 + e.data[bi * d + ch];
            let base = (bi * c + ch) * plane;
            let mut dsc = 0.0;
            let mut dsh = 0.0;
            for p in 0..plane {
                let g = gout.data[base + p];
                dh.data[base + p] = sc * g;
                dsc += g * h.data[base + p];
                dsh += g;
            }
            de.data[bi * d + ch] = dsc;
            de.data[bi * d + c + ch] = dsh;
        }
    }
    (dh, de)
}

/// Batched matrix multiply: [B, M, K] x [B, K, N] -> [B, M, N].
pub fn bmm(a: &Tensor, b: &Tensor) -> Tensor {
    let (bn, m, k) = a.dims3();
    let (bn2, k2, n) = b.dims3();
    assert_eq!(bn, bn2, "bmm batch mismatch");
    assert_eq!(k, k2, "bmm inner dim mismatch");
    let mut out = Tensor::zeros(&[bn, m, n]);
    out.data.par_chunks_mut(n).enumerate().for_each(|(row, orow)| {
        let bi = row / m;
        let mi = row % m;
        let abase = (bi * m + mi) * k;
        for ki in 0..k {
            let av = a.data[abase + ki];
            let bbase = (bi * k + ki) * n;
            for ni in 0..n {
                orow[ni] += av * b.data[bbase + ni];
            }
        }
    });
    out
}

pub fn bmm_backward(a: &Tensor, b: &Tensor, gout: &Tensor) -> (Tensor, Tensor) {
    let (bn, m, k) = a.dims3();
    let (_, _, n) = b.dims3();
    let mut da = Tensor::zeros(&a.shape);
    let mut db = Tensor::zeros(&b.shape);
    for bi in 0..bn {
        for mi in 0..m {
            for ni in 0..n {
                let g = gout.data[(bi * m + mi) * n + ni];
                for ki in 0..k {
                    da.data[(bi * m + mi) * k + ki] += g * b.data[(bi * k + ki) * n + ni];
                    db.data[(bi * k + ki) * n + ni] += g * a.data[(bi * m + mi) * k + ki];
                }
            }
        }
    }
    (da, db)
}

/// Swap the last two axes of a 3-D tensor.
pub fn transpose_12(x: &Tensor) -> Tensor {
    let (bn, m, n) = x.dims3();
    let mut out = Tensor::zeros(&[bn, n, m]);
    for bi in 0..bn {
        for mi in 0..m {
            for ni in 0..n {
                out.data[(bi * n + ni) * m + mi] = x.data[(bi * m + mi) * n + ni];
            }
        }
    }
    out
}

/// Softmax over the last axis of a 3-D tensor.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let (bn, m, n) = x.dims3();
    let mut out = Tensor::zeros(&x.shape);
    for row in 0..bn * m {
        let base = row * n;
        let mx = x.data[base..base + n].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in 0..n {
            let e = (x.data[base + i] - mx).exp();
            out.data[base + i] = e;
            z += e;
        }
        for i in 0..n {
            out.data[base + i] /= z;
        }
    }
    out
}

pub fn softmax_last_backward(y: &Tensor, gout: &Tensor) -> Tensor {
    let (bn, m, n) = y.dims3();
    let mut dx = Tensor::zeros(&y.shape);
    for row in 0..bn * m {
        let base = row * n;
        let dot: f64 = (0..n).map(|i| y.data[base + i] * gout.data[base + i]).sum();
        for i in 0..n {
            dx.data[base + i] = y.data[base + i] * (gout.data[base + i] - dot);
        }
    }
    dx
}

pub fn mean_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.mean())
}

pub fn mean_all_backward(x: &Tensor, gout: &Tensor) -> Tensor {
    let g = gout.data[0] / x.len() as f64;
    Tensor::full(&x.shape, g)
}
