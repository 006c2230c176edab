//! Bilinear feature crop: the desk-scale stand-in for RoI align.
//!
//! Samples the raster on an `out_size × out_size` lattice of box-interior
//! points and flattens to a feature vector. Differentiable with respect to
//! the box coordinates (piecewise, with kinks at pixel-cell boundaries).

use alloc::vec::Vec;

use crate::data::Raster;
use crate::math;

/// Feature vector layout: `((qy * S) + qx) * 3 + channel`.
pub fn crop_features(raster: &Raster, proposal: [f64; 4], out_size: usize) -> Vec<f64> {
    let s = out_size;
    let mut out = Vec::with_capacity(s * s * 3);
    let [l, t, r, b] = proposal;
    for qy in 0..s {
        let uy = (qy as f64 + 0.5) / s as f64;
        let y = t + uy * (b - t);
        for qx in 0..s {
            let ux = (qx as f64 + 0.5) / s as f64;
            let x = l + ux * (r - l);
            let sample = bilinear(raster, x, y);
            out.extend_from_slice(&sample.value);
        }
    }
    out
}

/// Gradient of the crop with respect to the proposal `(l, t, r, b)`.
pub fn crop_backward(
    raster: &Raster,
    proposal: [f64; 4],
    out_size: usize,
    d_feat: &[f64],
) -> [f64; 4] {
    let s = out_size;
    let [l, t, r, b] = proposal;
    let (w, h) = (raster.width as f64, raster.height as f64);
    let mut grad = [0.0; 4];
    for qy in 0..s {
        let uy = (qy as f64 + 0.5) / s as f64;
        let y = t + uy * (b - t);
        for qx in 0..s {
            let ux = (qx as f64 + 0.5) / s as f64;
            let x = l + ux * (r - l);
            let sample = bilinear(raster, x, y);
            for c in 0..3 {
                let d = d_feat[((qy * s) + qx) * 3 + c];
                if d == 0.0 {
                    continue;
                }
                // d sample / d pixel-coordinate, then pixel-coordinate
                // back to normalized box coordinates
                let d_px = d * sample.d_px[c] * w;
                let d_py = d * sample.d_py[c] * h;
                grad[0] += d_px * (1.0 - ux);
                grad[2] += d_px * ux;
                grad[1] += d_py * (1.0 - uy);
                grad[3] += d_py * uy;
            }
        }
    }
    grad
}

struct Sample {
    value: [f64; 3],
    d_px: [f64; 3],
    d_py: [f64; 3],
}

/// Bilinear lookup at normalized coordinates with edge clamping. Pixel
/// centers sit at `(i + 0.5) / N`.
fn bilinear(raster: &Raster, x: f64, y: f64) -> Sample {
    let px = x * raster.width as f64 - 0.5;
    let py = y * raster.height as f64 - 0.5;
    let x0 = math::floor(px);
    let y0 = math::floor(py);
    let fx = px - x0;
    let fy = py - y0;
    let clamp = |v: f64, n: usize| -> usize {
        if v < 0.0 {
            0
        } else if v > (n - 1) as f64 {
            n - 1
        } else {
            v as usize
        }
    };
    let ix0 = clamp(x0, raster.width);
    let ix1 = clamp(x0 + 1.0, raster.width);
    let iy0 = clamp(y0, raster.height);
    let iy1 = clamp(y0 + 1.0, raster.height);

    let mut value = [0.0; 3];
    let mut d_px = [0.0; 3];
    let mut d_py = [0.0; 3];
    for c in 0..3 {
        let v00 = raster.get(iy0, ix0, c);
        let v01 = raster.get(iy0, ix1, c);
        let v10 = raster.get(iy1, ix0, c);
        let v11 = raster.get(iy1, ix1, c);
        value[c] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
        d_px[c] = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
        d_py[c] = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
    }
    Sample { value, d_px, d_py }
}
