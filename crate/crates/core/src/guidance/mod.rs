//! Hierarchical multimodal guidance: mask sets at semantic, instance and part
//! granularity, each mask paired with a pooled visual teacher feature and a
//! caption-derived text feature.

mod providers;
mod store;

pub use providers::{
    fnv1a, gaussian_vector, orthonormal_basis, BasisTextEncoder, CaptionProvider, FeatureGrid,
    PixelFeatureProvider, TeacherProviders, TextEncoder, TextEncoderSpec,
};
pub use store::{load_guidance, save_guidance};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::mask::{area_resample, BinaryMask, PixelBox, Rle};
use crate::tensor::norm;
use crate::{Error, Result};

/// Minimum fraction of the frame a level's masks must cover.
pub const DEFAULT_COVERAGE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HierarchyLevel {
    #[serde(rename = "s")]
    Semantic,
    #[serde(rename = "i")]
    Instance,
    #[serde(rename = "p")]
    Part,
}

impl HierarchyLevel {
    pub const ALL: [HierarchyLevel; 3] = [HierarchyLevel::Semantic, HierarchyLevel::Instance, HierarchyLevel::Part];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            HierarchyLevel::Semantic => "s",
            HierarchyLevel::Instance => "i",
            HierarchyLevel::Part => "p",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HierarchyLevel::Semantic => "semantic",
            HierarchyLevel::Instance => "instance",
            HierarchyLevel::Part => "part",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "s" | "semantic" => Some(HierarchyLevel::Semantic),
            "i" | "instance" => Some(HierarchyLevel::Instance),
            "p" | "part" => Some(HierarchyLevel::Part),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub level: HierarchyLevel,
    pub masks: Vec<BinaryMask>,
    pub frame_id: String,
}

impl MaskSet {
    /// Decodes run-length masks; a failure names the offending mask index.
    pub fn from_rles(level: HierarchyLevel, frame_id: impl Into<String>, rles: &[Rle]) -> Result<Self> {
        let masks = rles
            .iter()
            .enumerate()
            .map(|(i, r)| r.decode().map_err(|e| Error::Format(format!("mask {i}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            level,
            masks,
            frame_id: frame_id.into(),
        })
    }

    pub fn to_rles(&self) -> Vec<Rle> {
        self.masks.iter().map(Rle::encode).collect()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskSetReport {
    pub coverage: f64,
    pub overlap_pixels: usize,
    pub empty_masks: Vec<usize>,
    pub valid: bool,
}

pub fn validate_mask_set(ms: &MaskSet, height: usize, width: usize) -> Result<MaskSetReport> {
    validate_mask_set_with(ms, height, width, DEFAULT_COVERAGE)
}

/// Coverage, overlap and emptiness report. Overlaps are reported but do not
/// invalidate the set.
pub fn validate_mask_set_with(ms: &MaskSet, height: usize, width: usize, threshold: f64) -> Result<MaskSetReport> {
    let mut counts = vec![0u32; height * width];
    let mut empty_masks = Vec::new();
    for (i, m) in ms.masks.iter().enumerate() {
        if m.height != height || m.width != width {
            return Err(Error::Format(format!(
                "mask {i} is {}x{}, frame is {height}x{width}",
                m.height, m.width
            )));
        }
        if m.is_empty() {
            empty_masks.push(i);
        }
        for (c, &b) in counts.iter_mut().zip(&m.data) {
            *c += b as u32;
        }
    }
    let covered = counts.iter().filter(|&&c| c > 0).count();
    let overlap_pixels = counts.iter().filter(|&&c| c > 1).count();
    let coverage = covered as f64 / (height * width) as f64;
    Ok(MaskSetReport {
        coverage,
        overlap_pixels,
        valid: coverage >= threshold && empty_masks.is_empty(),
        empty_masks,
    })
}

/// Teacher-side mask feature: the mask is area-resampled to the feature grid
/// and the cell features are averaged under those fractional weights. If no
/// weight survives, the mean over the mask's bounding-box cells is used.
pub fn pool_pixel_features(features: &FeatureGrid, mask: &BinaryMask) -> Result<Vec<f64>> {
    let bbox = mask
        .bbox()
        .ok_or_else(|| Error::Precondition("cannot pool features under an empty mask".into()))?;
    let (h2, w2, d) = (features.height, features.width, features.dim);
    let weights = area_resample(mask, h2, w2);
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; d];
    if total > 0.0 {
        for (idx, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                for (o, f) in out.iter_mut().zip(features.cell(idx / w2, idx % w2)) {
                    *o += w * f;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
    } else {
        let y0 = bbox.y_min * h2 / mask.height;
        let y1 = (bbox.y_max * h2 / mask.height).min(h2 - 1);
        let x0 = bbox.x_min * w2 / mask.width;
        let x1 = (bbox.x_max * w2 / mask.width).min(w2 - 1);
        let mut n = 0.0;
        for y in y0..=y1 {
            for x in x0..=x1 {
                for (o, f) in out.iter_mut().zip(features.cell(y, x)) {
                    *o += f;
                }
                n += 1.0;
            }
        }
        out.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Tight inclusive boxes, one per mask.
pub fn boxes_from_masks(ms: &MaskSet) -> Result<Vec<PixelBox>> {
    ms.masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            m.bbox()
                .ok_or_else(|| Error::Precondition(format!("mask {i} of level {} is empty", ms.level.name())))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRecord {
    pub mask_index: usize,
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
    pub caption_short: String,
    pub caption_long: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelGuidance {
    pub masks: MaskSet,
    pub records: Vec<GuidanceRecord>,
}

impl LevelGuidance {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Guidance for one frame, indexed by [`HierarchyLevel::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct HierGuidance {
    pub frame_id: String,
    pub levels: Vec<LevelGuidance>,
}

impl HierGuidance {
    pub fn level(&self, l: HierarchyLevel) -> &LevelGuidance {
        &self.levels[l.index()]
    }

    pub fn dim(&self) -> usize {
        self.levels
            .iter()
            .flat_map(|l| l.records.first())
            .map(|r| r.visual.len())
            .next()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != 3 {
            return Err(Error::Validation(format!("expected 3 levels, found {}", self.levels.len())));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.masks.level.index() != i {
                return Err(Error::Validation(format!("level slot {i} holds {}", l.masks.level.name())));
            }
            if l.records.len() != l.masks.len() {
                return Err(Error::Validation(format!(
                    "level {}: {} records for {} masks",
                    l.masks.level.name(),
                    l.records.len(),
                    l.masks.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    /// Template applied to short captions before text encoding; `{}` is the caption.
    pub text_template: Option<String>,
    pub coverage_threshold: Option<f64>,
}

fn apply_template(template: &Option<String>, caption: &str) -> String {
    match template {
        Some(t) => t.replace("{}", caption),
        None => caption.to_string(),
    }
}

/// Builds per-mask visual and text guidance for all three levels of one frame.
pub fn build_guidance(
    image: &RgbImage,
    mask_sets: &[MaskSet],
    providers: &TeacherProviders,
    opts: &BuildOptions,
) -> Result<HierGuidance> {
    let (h, w) = (image.height() as usize, image.width() as usize);
    let mut ordered: Vec<&MaskSet> = Vec::with_capacity(3);
    for level in HierarchyLevel::ALL {
        let ms = mask_sets
            .iter()
            .find(|m| m.level == level)
            .ok_or_else(|| Error::Precondition(format!("missing {} mask set", level.name())))?;
        let report = validate_mask_set_with(ms, h, w, opts.coverage_threshold.unwrap_or(DEFAULT_COVERAGE))?;
        if !report.valid {
            return Err(Error::Precondition(format!(
                "{} masks invalid: coverage {:.3}, empty {:?}",
                level.name(),
                report.coverage,
                report.empty_masks
            )));
        }
        ordered.push(ms);
    }
    let frame_id = ordered[0].frame_id.clone();
    let feature_map = providers.pixel.features(image).map_err(|message| Error::Provider {
        level: "image".into(),
        mask: 0,
        message,
    })?;
    let mut levels = Vec::with_capacity(3);
    for ms in ordered {
        let level = ms.level;
        let provider_err = |mask: usize, message: String| Error::Provider {
            level: level.name().into(),
            mask,
            message,
        };
        let mut records = Vec::with_capacity(ms.len());
        for (k, mask) in ms.masks.iter().enumerate() {
            let visual = pool_pixel_features(&feature_map, mask)?;
            let (short, long) = providers.caption.caption(image, mask).map_err(|m| provider_err(k, m))?;
            let text = providers.text.encode(&apply_template(&opts.text_template, &short));
            if norm(&visual) == 0.0 {
                return Err(provider_err(k, "visual feature has zero norm".into()));
            }
            if norm(&text) == 0.0 {
                return Err(provider_err(k, "text feature has zero norm".into()));
            }
            records.push(GuidanceRecord {
                mask_index: k,
                visual,
                text,
                caption_short: short,
                caption_long: long,
            });
        }
        levels.push(LevelGuidance {
            masks: ms.clone(),
            records,
        });
    }
    Ok(HierGuidance { frame_id, levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiles(frame: &str, level: HierarchyLevel) -> MaskSet {
        MaskSet {
            level,
            masks: vec![
                BinaryMask::from_fn(4, 4, |x, _| x < 2),
                BinaryMask::from_fn(4, 4, |x, _| x >= 2),
            ],
            frame_id: frame.into(),
        }
    }

    #[test]
    fn validate_examples() {
        let ms = tiles("f", HierarchyLevel::Instance);
        let r = validate_mask_set(&ms, 4, 4).unwrap();
        assert_eq!((r.coverage, r.overlap_pixels, r.valid), (1.0, 0, true));

        let mut dup = ms.clone();
        dup.masks.push(ms.masks[0].clone());
        let r = validate_mask_set(&dup, 4, 4).unwrap();
        assert_eq!(r.overlap_pixels, 8);
        assert!(r.valid);

        let half = MaskSet {
            masks: vec![ms.masks[0].clone()],
            ..ms.clone()
        };
        let r = validate_mask_set(&half, 4, 4).unwrap();
        assert_eq!(r.coverage, 0.5);
        assert!(!r.valid);
    }

    #[test]
    fn bad_rle_names_mask_index() {
        let good = BinaryMask::from_fn(2, 2, |_, _| true).to_rle();
        let bad = Rle { size: [2, 2], counts: vec![3] };
        let err = MaskSet::from_rles(HierarchyLevel::Part, "f", &[good, bad]).unwrap_err();
        assert!(err.to_string().contains("mask 1"), "{err}");
    }

    fn grid_from(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> FeatureGrid {
        let mut g = FeatureGrid::zeros(1, h, w);
        for y in 0..h {
            for x in 0..w {
                g.cell_mut(y, x)[0] = f(x, y);
            }
        }
        g
    }

    #[test]
    fn pool_constant_and_half_maps() {
        let mut g = FeatureGrid::zeros(3, 2, 2);
        g.data.iter_mut().for_each(|v| *v = 0.7);
        let m = BinaryMask::from_fn(8, 8, |x, y| x + y < 5);
        for v in pool_pixel_features(&g, &m).unwrap() {
            assert!((v - 0.7).abs() < 1e-12);
        }
        let halves = grid_from(4, 4, |x, _| if x < 2 { 2.0 } else { -3.0 });
        let left = BinaryMask::from_fn(8, 8, |x, _| x < 4);
        assert!((pool_pixel_features(&halves, &left).unwrap()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pool_weighted_mean_hand_case() {
        // 4x4 mask on a 2x2 grid: cells (0,0),(0,1) fully covered, (1,0) half covered.
        let g = grid_from(2, 2, |x, y| [1.0, 2.0, 3.0, 4.0][y * 2 + x]);
        let m = BinaryMask::from_fn(4, 4, |x, y| y < 2 || (y == 2 && x < 2));
        let w = area_resample(&m, 2, 2);
        assert_eq!(w, vec![1.0, 1.0, 0.5, 0.0]);
        let expected = (1.0 * 1.0 + 1.0 * 2.0 + 0.5 * 3.0) / 2.5;
        assert!((pool_pixel_features(&g, &m).unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn pool_empty_mask_is_precondition_error() {
        let g = FeatureGrid::zeros(1, 2, 2);
        assert!(matches!(pool_pixel_features(&g, &BinaryMask::new(4, 4)), Err(Error::Precondition(_))));
    }

    #[test]
    fn boxes_examples() {
        let single = BinaryMask::from_fn(8, 8, |x, y| (x, y) == (3, 5));
        let full = BinaryMask::from_fn(6, 9, |_, _| true);
        let ell = BinaryMask::from_fn(8, 8, |x, y| (y == 3 && (2..=6).contains(&x)) || (x == 2 && (1..=3).contains(&y)));
        let ms = MaskSet {
            level: HierarchyLevel::Part,
            masks: vec![single],
            frame_id: "f".into(),
        };
        assert_eq!(boxes_from_masks(&ms).unwrap()[0], PixelBox { x_min: 3, y_min: 5, x_max: 3, y_max: 5 });
        assert_eq!(full.bbox().unwrap(), PixelBox { x_min: 0, y_min: 0, x_max: 8, y_max: 5 });
        assert_eq!(ell.bbox().unwrap(), PixelBox { x_min: 2, y_min: 1, x_max: 6, y_max: 3 });
        let empty = MaskSet {
            level: HierarchyLevel::Part,
            masks: vec![BinaryMask::new(2, 2)],
            frame_id: "f".into(),
        };
        assert!(boxes_from_masks(&empty).is_err());
    }

    proptest! {
        #[test]
        fn pool_is_linear_in_feature_scale(c in -5.0f64..5.0, bits in any::<u16>()) {
            let g = grid_from(2, 2, |x, y| (x as f64 + 1.0) * (y as f64 - 0.5));
            let m = BinaryMask::from_fn(4, 4, |x, y| bits >> (y * 4 + x) & 1 == 1);
            prop_assume!(!m.is_empty());
            let base = pool_pixel_features(&g, &m).unwrap();
            let scaled = pool_pixel_features(&g.scaled(c), &m).unwrap();
            prop_assert!((scaled[0] - c * base[0]).abs() < 1e-12);
        }
    }
}
