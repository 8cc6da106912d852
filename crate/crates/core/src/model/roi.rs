//! RoI mask pooling.
//!
//! The mask's tight box is mapped to feature coordinates (half-pixel aligned)
//! and split into a 7×7 grid. Each bin averages bilinear samples of the
//! feature map, with `ceil(roi / 7)` samples per axis. The mask is reduced to
//! feature resolution by area resampling and rounded to {0, 1} at 0.5; the
//! same bilinear samples of that map give each bin's mask weight. The pooled
//! vector is the mask-weighted average of the bins. When every bin weight
//! vanishes the mask is dead and pools to zero.
//!
//! Everything above is linear in the feature map, so pooling reduces to a
//! fixed coefficient vector over feature cells.

use super::FeatureMap;
use crate::mask::{area_resample, BinaryMask};
use crate::tensor::Mat;
use crate::{Error, Result};

pub const ROI_GRID: usize = 7;
/// Bin weights below this are treated as zero.
pub const DEAD_EPS: f64 = 1e-6;
/// Cells with at least this covered fraction count as inside the mask.
pub const CELL_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct RoiWeights {
    /// One coefficient per feature cell (`y * w + x`); all zero when dead.
    pub coeffs: Vec<f64>,
    pub dead: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledMask {
    pub s: Vec<f64>,
    pub dead: bool,
}

/// Bilinear sample taps at `(y, x)` on an `h × w` grid, with RoI-Align's
/// border handling: samples more than one cell outside contribute nothing,
/// coordinates are clamped to the last row/column otherwise.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, out: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let axis = |c: f64, n: usize| {
        let c = c.max(0.0);
        let lo = c.floor() as usize;
        if lo >= n - 1 {
            (n - 1, n - 1, 0.0)
        } else {
            (lo, lo + 1, c - lo as f64)
        }
    };
    let (y0, y1, ly) = axis(y, h);
    let (x0, x1, lx) = axis(x, w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    out.push((y0 * w + x0, hy * hx));
    out.push((y0 * w + x1, hy * lx));
    out.push((y1 * w + x0, ly * hx));
    out.push((y1 * w + x1, ly * lx));
}

/// Pooling coefficients of `mask` on an `h2 × w2` feature grid.
pub fn roi_pool_weights(mask: &BinaryMask, h2: usize, w2: usize) -> Result<RoiWeights> {
    let b = mask
        .bbox()
        .ok_or_else(|| Error::Precondition("cannot pool an empty mask".into()))?;
    let sy = h2 as f64 / mask.height as f64;
    let sx = w2 as f64 / mask.width as f64;
    let y1 = b.y_min as f64 * sy - 0.5;
    let x1 = b.x_min as f64 * sx - 0.5;
    let roi_h = (b.y_max + 1 - b.y_min) as f64 * sy;
    let roi_w = (b.x_max + 1 - b.x_min) as f64 * sx;
    let bin_h = roi_h / ROI_GRID as f64;
    let bin_w = roi_w / ROI_GRID as f64;
    let ny = (roi_h / ROI_GRID as f64).ceil().max(1.0) as usize;
    let nx = (roi_w / ROI_GRID as f64).ceil().max(1.0) as usize;

    let cells: Vec<f64> = area_resample(mask, h2, w2)
        .into_iter()
        .map(|f| if f >= CELL_THRESHOLD { 1.0 } else { 0.0 })
        .collect();

    let mut coeffs = vec![0.0; h2 * w2];
    let mut total = 0.0;
    let mut taps = Vec::with_capacity(4 * nx * ny);
    let inv = 1.0 / (nx * ny) as f64;
    for py in 0..ROI_GRID {
        for px in 0..ROI_GRID {
            taps.clear();
            for iy in 0..ny {
                let y = y1 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / ny as f64;
                for ix in 0..nx {
                    let x = x1 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / nx as f64;
                    bilinear_taps(y, x, h2, w2, &mut taps);
                }
            }
            let m: f64 = taps.iter().map(|&(c, t)| t * cells[c]).sum::<f64>() * inv;
            if m == 0.0 {
                continue;
            }
            total += m;
            for &(c, t) in &taps {
                coeffs[c] += m * t * inv;
            }
        }
    }
    if total < DEAD_EPS {
        return Ok(RoiWeights {
            coeffs: vec![0.0; h2 * w2],
            dead: true,
        });
    }
    for c in &mut coeffs {
        *c /= total;
    }
    Ok(RoiWeights { coeffs, dead: false })
}

/// Pools `fused` under `mask`. With `proj` (a `D2 × D` matrix) the pooled
/// vector is projected; without it the raw `D2` average is returned.
pub fn roi_mask_pool(fused: &FeatureMap, mask: &BinaryMask, proj: Option<&Mat>) -> Result<PooledMask> {
    let w = roi_pool_weights(mask, fused.height, fused.width)?;
    let mut s = vec![0.0; fused.dim()];
    for (cell, &c) in w.coeffs.iter().enumerate() {
        if c != 0.0 {
            for (acc, v) in s.iter_mut().zip(fused.data.row(cell)) {
                *acc += c * v;
            }
        }
    }
    if let Some(p) = proj {
        s = Mat::row_vector(s).matmul(p).data;
    }
    Ok(PooledMask { s, dead: w.dead })
}
