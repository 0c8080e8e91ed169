//! Bilinear spatial resampling with half-pixel centers (no corner alignment).

use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Source taps for one output coordinate: `(lo, hi, weight_of_hi)`.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f32 / dst as f32;
    (0..dst)
        .map(|d| {
            let pos = ((d as f32 + 0.5) * scale - 0.5).max(0.0);
            let lo = (libm::floorf(pos) as usize).min(src - 1);
            let hi = if lo + 1 < src { lo + 1 } else { lo };
            (lo, hi, pos - lo as f32)
        })
        .collect()
}

/// Resamples every channel plane to `(target_h, target_w)`.
pub fn resize_bilinear(a: &Tensor, target_h: usize, target_w: usize) -> Tensor {
    assert!(target_h > 0 && target_w > 0, "resize target must be positive");
    let [n, c, h, w] = a.shape();
    if (h, w) == (target_h, target_w) {
        return a.clone();
    }
    let ys = axis_taps(h, target_h);
    let xs = axis_taps(w, target_w);
    let mut out = Tensor::zeros([n, c, target_h, target_w]);
    let src = a.data();
    for (plane_idx, dst) in out.data_mut().chunks_mut(target_h * target_w).enumerate() {
        let p = &src[plane_idx * h * w..(plane_idx + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = (1.0 - lx) * p[y0 * w + x0] + lx * p[y0 * w + x1];
                let bottom = (1.0 - lx) * p[y1 * w + x0] + lx * p[y1 * w + x1];
                dst[oy * target_w + ox] = (1.0 - ly) * top + ly * bottom;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: maps an output gradient back to `in_shape`.
pub fn resize_bilinear_backward(grad: &Tensor, in_shape: [usize; 4]) -> Tensor {
    let [_, _, h, w] = in_shape;
    let [_, _, th, tw] = grad.shape();
    if (h, w) == (th, tw) {
        return grad.clone();
    }
    let ys = axis_taps(h, th);
    let xs = axis_taps(w, tw);
    let mut out = Tensor::zeros(in_shape);
    let g = grad.data();
    for (plane_idx, dst) in out.data_mut().chunks_mut(h * w).enumerate() {
        let gp = &g[plane_idx * th * tw..(plane_idx + 1) * th * tw];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let v = gp[oy * tw + ox];
                dst[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * v;
                dst[y0 * w + x1] += (1.0 - ly) * lx * v;
                dst[y1 * w + x0] += ly * (1.0 - lx) * v;
                dst[y1 * w + x1] += ly * lx * v;
            }
        }
    }
    out
}
