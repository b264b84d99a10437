// Forward and adjoint kernels for the tape's operation set. Every kernel
// walks contiguous rows so the inner loops vectorize.

use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;

/// Row window for a kernel tap offset `d` on an axis of length `n`:
/// output positions `lo..hi` read input positions `lo+d..hi+d`.
#[inline]
fn window(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n.saturating_sub(d as usize) } else { n };
    (lo, hi.max(lo))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Same-padded `k × k` convolution. `weight` is `[cout, cin, k, k]`.
pub(crate) fn conv_forward(x: &Tensor, weight: &[f64], bias: &[f64], cout: usize, k: usize) -> Tensor {
    let (cin, h, w) = (x.channels(), x.height(), x.width());
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(cout, h, w);
    for co in 0..cout {
        let o = out.plane_mut(co);
        o.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            let xin = x.plane(ci);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = window(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = window(w, dx);
                    let wv = weight[((co * cin + ci) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let irow = &xin[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        axpy(wv, irow, orow);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv_forward`]: returns the input gradient and accumulates
/// weight and bias gradients.
pub(crate) fn conv_backward(
    x: &Tensor,
    weight: &[f64],
    d_out: &Tensor,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    k: usize,
) -> Tensor {
    let (cin, h, w) = (x.channels(), x.height(), x.width());
    let cout = d_out.channels();
    let pad = (k / 2) as isize;
    let mut d_x = Tensor::zeros(cin, h, w);
    for co in 0..cout {
        let g = d_out.plane(co);
        d_bias[co] += g.iter().sum::<f64>();
        for ci in 0..cin {
            let xin = x.plane(ci);
            let dxin = d_x.plane_mut(ci);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = window(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = window(w, dx);
                    let wi = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = weight[wi];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let grow = &g[y * w + x0..y * w + x1];
                        let span = sy * w + sx0..sy * w + sx0 + (x1 - x0);
                        acc += dot(grow, &xin[span.clone()]);
                        axpy(wv, grow, &mut dxin[span]);
                    }
                    d_weight[wi] += acc;
                }
            }
        }
    }
    d_x
}

pub(crate) fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

pub(crate) fn relu_backward(out: &Tensor, d_out: &Tensor) -> Tensor {
    let mut d = d_out.clone();
    for (g, y) in d.data_mut().iter_mut().zip(out.data()) {
        if *y <= 0.0 {
            *g = 0.0;
        }
    }
    d
}

/// 2×2 max pooling; returns the pooled tensor and, per output element, the
/// in-plane index of the winning input (first maximum in raster order).
pub(crate) fn max_pool_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut argmax = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let xin = x.plane(ch);
        let o = out.plane_mut(ch);
        for y in 0..oh {
            for xo in 0..ow {
                let base = 2 * y * w + 2 * xo;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if xin[cand] > xin[best] {
                        best = cand;
                    }
                }
                o[y * ow + xo] = xin[best];
                argmax[ch * oh * ow + y * ow + xo] = best as u32;
            }
        }
    }
    (out, argmax)
}

pub(crate) fn max_pool_backward(input_shape: [usize; 3], argmax: &[u32], d_out: &Tensor) -> Tensor {
    let [c, h, w] = input_shape;
    let mut d_x = Tensor::zeros(c, h, w);
    let n = d_out.plane_len();
    for ch in 0..c {
        let g = d_out.plane(ch);
        let dx = d_x.plane_mut(ch);
        for (i, gv) in g.iter().enumerate() {
            dx[argmax[ch * n + i] as usize] += gv;
        }
    }
    d_x
}

/// Nearest-neighbour 2× upsampling.
pub(crate) fn upsample_forward(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let mut out = Tensor::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        let xin = x.plane(ch);
        let o = out.plane_mut(ch);
        for y in 0..2 * h {
            let src = &xin[(y / 2) * w..(y / 2 + 1) * w];
            let row = &mut o[y * 2 * w..(y + 1) * 2 * w];
            for (xo, v) in row.iter_mut().enumerate() {
                *v = src[xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(d_out: &Tensor) -> Tensor {
    let (c, h2, w2) = (d_out.channels(), d_out.height(), d_out.width());
    let (h, w) = (h2 / 2, w2 / 2);
    let mut d_x = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let g = d_out.plane(ch);
        let dx = d_x.plane_mut(ch);
        for y in 0..h2 {
            let row = &g[y * w2..(y + 1) * w2];
            let dst = &mut dx[(y / 2) * w..(y / 2 + 1) * w];
            for (xo, v) in row.iter().enumerate() {
                dst[xo / 2] += v;
            }
        }
    }
    d_x
}

pub(crate) fn concat_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(a.channels() + b.channels(), a.height(), a.width(), data)
}

pub(crate) fn concat_backward(a_channels: usize, d_out: &Tensor) -> (Tensor, Tensor) {
    let (h, w) = (d_out.height(), d_out.width());
    let split = a_channels * h * w;
    let (da, db) = d_out.data().split_at(split);
    (
        Tensor::from_vec(a_channels, h, w, da.to_vec()),
        Tensor::from_vec(d_out.channels() - a_channels, h, w, db.to_vec()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct per-pixel convolution used as an independent reference.
    fn conv_naive(x: &Tensor, weight: &[f64], bias: &[f64], cout: usize, k: usize) -> Tensor {
        let (cin, h, w) = (x.channels(), x.height(), x.width());
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(cout, h, w);
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = bias[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    s += weight[((co * cin + ci) * k + ky) * k + kx] * x.at(ci, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out.set(co, y, xx, s);
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()
    }

    #[test]
    fn conv_matches_naive() {
        let x = Tensor::from_vec(2, 5, 6, ramp(60, 0.1));
        for k in [1, 3] {
            let weight = ramp(3 * 2 * k * k, 0.05);
            let bias = [0.1, -0.2, 0.3];
            let fast = conv_forward(&x, &weight, &bias, 3, k);
            let slow = conv_naive(&x, &weight, &bias, 3, k);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_adjoint_identity() {
        // <conv(x), g> must equal <x, conv^T(g)> + <w, dW>-free part: check via
        // the linear map x -> conv(x) with zero bias.
        let x = Tensor::from_vec(2, 4, 4, ramp(32, 0.1));
        let g = Tensor::from_vec(3, 4, 4, ramp(48, 0.07));
        let weight = ramp(54, 0.05);
        let y = conv_forward(&x, &weight, &[0.0; 3], 3, 3);
        let mut dw = vec![0.0; 54];
        let mut db = vec![0.0; 3];
        let dx = conv_backward(&x, &weight, &g, &mut dw, &mut db, 3);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // y is also linear in the weights: <y, g> = <w, dW>
        let rhs_w: f64 = weight.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x = Tensor::from_vec(1, 4, 4, ramp(16, 1.0));
        let (p, arg) = max_pool_forward(&x);
        assert_eq!(p.shape(), [1, 2, 2]);
        for (i, v) in p.data().iter().enumerate() {
            assert_eq!(*v, x.data()[arg[i] as usize]);
        }
        let u = upsample_forward(&p);
        assert_eq!(u.shape(), [1, 4, 4]);
        let back = upsample_backward(&u);
        for (a, b) in back.data().iter().zip(p.data()) {
            assert_eq!(*a, 4.0 * b);
        }
    }
}
