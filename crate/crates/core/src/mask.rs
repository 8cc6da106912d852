//! Binary masks, COCO-style run-length encoding and box helpers.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

/// Inclusive pixel box `(x_min, y_min, x_max, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl PixelBox {
    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Grows the box by `by` pixels on every side, clipped to the frame.
    pub fn dilate(&self, by: usize, height: usize, width: usize) -> PixelBox {
        PixelBox {
            x_min: self.x_min.saturating_sub(by),
            y_min: self.y_min.saturating_sub(by),
            x_max: (self.x_max + by).min(width - 1),
            y_max: (self.y_max + by).min(height - 1),
        }
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn from_box(height: usize, width: usize, b: PixelBox) -> Self {
        Self::from_fn(height, width, |x, y| b.contains(x, y))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Set pixels as `(x, y)` in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Tight inclusive bounding box, or `None` for an empty mask.
    pub fn bbox(&self) -> Option<PixelBox> {
        let mut b: Option<PixelBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => PixelBox {
                            x_min: x,
                            y_min: y,
                            x_max: x,
                            y_max: y,
                        },
                        Some(b) => PixelBox {
                            x_min: b.x_min.min(x),
                            y_min: b.y_min.min(y),
                            x_max: b.x_max.max(x),
                            y_max: b.y_max.max(y),
                        },
                    });
                }
            }
        }
        b
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    pub fn to_rle(&self) -> Rle {
        Rle::encode(self)
    }
}

/// Tight box of a non-empty mask.
pub fn box_from_mask(mask: &BinaryMask) -> Result<PixelBox> {
    mask.bbox()
        .ok_or_else(|| Error::Precondition("cannot take the box of an empty mask".into()))
}

/// Intersection over union; two empty masks give 0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Validation(format!(
            "iou of {}x{} and {}x{} masks",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Uncompressed COCO run-length encoding: column-major runs starting with zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..mask.width {
            for y in 0..mask.height {
                let v = mask.get(x, y);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle {
            size: [mask.height, mask.width],
            counts,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let [h, w] = self.size;
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (h * w) as u64 {
            return Err(Error::Format(format!(
                "rle counts sum to {total}, expected {}",
                h * w
            )));
        }
        let mut mask = BinaryMask::new(h, w);
        let mut pos = 0usize;
        let mut value = false;
        for &c in &self.counts {
            for _ in 0..c {
                let (x, y) = (pos / h, pos % h);
                mask.set(x, y, value);
                pos += 1;
            }
            value = !value;
        }
        Ok(mask)
    }
}

/// One-dimensional overlap weights between `n_in` unit source cells and
/// `n_out` equal target cells spanning the same extent. Entry `[o][i]` is the
/// fraction of target cell `o` covered by source cell `i`.
fn overlap_1d(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let ov = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if ov > 0.0 {
                    w.push((i, ov / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Area-resamples a binary mask to `out_h × out_w`: each output cell holds the
/// covered fraction of its footprint.
pub fn area_resample(mask: &BinaryMask, out_h: usize, out_w: usize) -> Vec<f64> {
    let ys = overlap_1d(mask.height, out_h);
    let xs = overlap_1d(mask.width, out_w);
    let mut out = vec![0.0; out_h * out_w];
    for (oy, wy) in ys.iter().enumerate() {
        for (ox, wx) in xs.iter().enumerate() {
            let mut acc = 0.0;
            for &(y, fy) in wy {
                for &(x, fx) in wx {
                    if mask.get(x, y) {
                        acc += fy * fx;
                    }
                }
            }
            out[oy * out_w + ox] = acc;
        }
    }
    out
}

/// Source taps `(lo, hi, frac)` of output index `o` along one axis.
fn bilinear_axis(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let s = n_in as f64 / n_out as f64;
    let c = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n_in - 1) as f64);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, c - lo as f64)
}

/// Bilinear upsampling of a `h × w` map to `out_h × out_w` (half-pixel centres,
/// edge clamped).
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let (y0, y1, fy) = bilinear_axis(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = bilinear_axis(ox, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Transpose of [`bilinear_upsample`]: scatters an `out_h × out_w` gradient
/// back onto the `h × w` source.
pub fn bilinear_upsample_adjoint(grad: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut src = vec![0.0; h * w];
    for oy in 0..out_h {
        let (y0, y1, fy) = bilinear_axis(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = bilinear_axis(ox, w, out_w);
            let g = grad[oy * out_w + ox];
            src[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            src[y0 * w + x1] += g * (1.0 - fy) * fx;
            src[y1 * w + x0] += g * fy * (1.0 - fx);
            src[y1 * w + x1] += g * fy * fx;
        }
    }
    src
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn upsample_adjoint_is_transpose() {
        let (h, w, oh, ow) = (3, 4, 7, 9);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..oh * ow).map(|i| (i as f64 * 0.11).cos()).collect();
        let ux = bilinear_upsample(&x, h, w, oh, ow);
        let uty = bilinear_upsample_adjoint(&y, h, w, oh, ow);
        let a: f64 = ux.iter().zip(&y).map(|(p, q)| p * q).sum();
        let b: f64 = x.iter().zip(&uty).map(|(p, q)| p * q).sum();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn box_examples() {
        let m = BinaryMask::from_fn(8, 8, |x, y| x == 2 && y == 2);
        assert_eq!(box_from_mask(&m).unwrap(), PixelBox { x_min: 2, y_min: 2, x_max: 2, y_max: 2 });
        let full = BinaryMask::from_fn(4, 4, |_, _| true);
        assert_eq!(box_from_mask(&full).unwrap(), PixelBox { x_min: 0, y_min: 0, x_max: 3, y_max: 3 });
        let diag = BinaryMask::from_fn(8, 8, |x, y| (x, y) == (1, 1) || (x, y) == (5, 7));
        assert_eq!(box_from_mask(&diag).unwrap(), PixelBox { x_min: 1, y_min: 1, x_max: 5, y_max: 7 });
        assert!(matches!(box_from_mask(&BinaryMask::new(3, 3)), Err(Error::Precondition(_))));
    }

    #[test]
    fn iou_examples() {
        let a = BinaryMask::from_fn(1, 3, |x, _| x < 2);
        let b = BinaryMask::from_fn(1, 3, |x, _| x >= 1);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let c = BinaryMask::from_fn(1, 3, |x, _| x == 2);
        let d = BinaryMask::from_fn(1, 3, |x, _| x == 0);
        assert_eq!(mask_iou(&c, &d).unwrap(), 0.0);
        let e = BinaryMask::new(1, 3);
        assert_eq!(mask_iou(&e, &e).unwrap(), 0.0);
    }

    #[test]
    fn rle_is_column_major_starting_with_zeros() {
        // 2x2 with only (x=0, y=1) set: column-major order is (0,0),(0,1),(1,0),(1,1).
        let m = BinaryMask::from_fn(2, 2, |x, y| x == 0 && y == 1);
        assert_eq!(m.to_rle().counts, vec![1, 1, 2]);
        let full = BinaryMask::from_fn(2, 2, |_, _| true);
        assert_eq!(full.to_rle().counts, vec![0, 4]);
    }

    #[test]
    fn rle_bad_counts_rejected() {
        let r = Rle { size: [2, 2], counts: vec![1, 1] };
        assert!(matches!(r.decode(), Err(Error::Format(_))));
    }

    #[test]
    fn area_resample_fractions() {
        let m = BinaryMask::from_fn(4, 4, |x, y| x < 2 && y < 1);
        let r = area_resample(&m, 2, 2);
        assert_eq!(r, vec![0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_constant_is_constant() {
        let up = bilinear_upsample(&[2.0; 4], 2, 2, 8, 8);
        assert!(up.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), h * w)
                .prop_map(move |data| BinaryMask { height: h, width: w, data })
        })
    }

    proptest! {
        #[test]
        fn rle_round_trip(m in arb_mask()) {
            prop_assert_eq!(m.to_rle().decode().unwrap(), m);
        }

        #[test]
        fn iou_symmetric_and_one_iff_equal(a in arb_mask(), seed in any::<u64>()) {
            let mut b = a.clone();
            if seed % 2 == 0 && !b.data.is_empty() {
                let i = (seed as usize / 2) % b.data.len();
                b.data[i] = !b.data[i];
            }
            let ab = mask_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
            if !a.is_empty() && !b.is_empty() {
                prop_assert_eq!(ab == 1.0, a == b);
            }
        }

        #[test]
        fn bbox_is_tight(m in arb_mask()) {
            if let Some(b) = m.bbox() {
                for (x, y) in m.pixels() {
                    prop_assert!(b.contains(x, y));
                }
                let px = m.pixels();
                prop_assert!(px.iter().any(|&(x, _)| x == b.x_min));
                prop_assert!(px.iter().any(|&(x, _)| x == b.x_max));
                prop_assert!(px.iter().any(|&(_, y)| y == b.y_min));
                prop_assert!(px.iter().any(|&(_, y)| y == b.y_max));
            }
        }
    }
}
