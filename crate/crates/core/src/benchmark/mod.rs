//! Benchmark construction, prompt sampling, AP evaluation, pooling profiles,
//! parameter tables and mask-feature export.

pub mod ap;
pub mod features;
pub mod predict;
pub mod profile;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use ap::{evaluate_ap, matched_count, ClassAp, EvalReport, FramePredictions, Prediction, PredictionsDoc, THRESHOLDS};
pub use features::{export_mask_features, read_sft1, silhouette, write_sft1, FeatureRow};
pub use predict::{predict_frame, random_labels, PromptKind};
pub use profile::{count_params, profile_roi_align, profile_to_csv, ParamTable, ProfileRow};

pub use crate::mask::{box_from_mask, mask_iou};

use crate::guidance::{HierarchyLevel, MaskSet};
use crate::mask::{BinaryMask, Rle};
use crate::{Error, Result};

pub const DEFAULT_MIN_OVERLAP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub mask: Rle,
    pub label: String,
    pub level: HierarchyLevel,
    pub frame_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchFrame {
    pub frame_id: String,
    /// Event file for this frame, relative to the manifest.
    #[serde(default)]
    pub events: Option<PathBuf>,
    #[serde(default)]
    pub t_start: Option<u64>,
    pub annotations: Vec<InstanceAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub name: String,
    pub classes: Vec<String>,
    /// Classes dropped from annotations and from the query set.
    #[serde(default)]
    pub exclude: Vec<String>,
    pub frames: Vec<BenchFrame>,
}

impl BenchmarkManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_slice(&raw)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        for f in &self.frames {
            for a in &f.annotations {
                if !self.classes.contains(&a.label) {
                    return Err(Error::Validation(format!(
                        "frame {}: label '{}' not in class table",
                        f.frame_id, a.label
                    )));
                }
                if self.exclude.contains(&a.label) {
                    return Err(Error::Validation(format!(
                        "frame {}: excluded class '{}' annotated",
                        f.frame_id, a.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// Classes that can be predicted: the class table minus exclusions.
    pub fn query_classes(&self) -> Vec<String> {
        self.classes
            .iter()
            .filter(|c| !self.exclude.contains(c))
            .cloned()
            .collect()
    }

    pub fn class_id(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn annotation_count(&self) -> usize {
        self.frames.iter().map(|f| f.annotations.len()).sum()
    }
}

/// Background classes removed by default for the known benchmarks.
pub fn default_exclusions(benchmark: &str) -> Vec<String> {
    let v: &[&str] = match benchmark.to_ascii_lowercase().as_str() {
        "ddd17" | "ddd17-ins" => &["flat"],
        "dsec11" | "dsec11-ins" => &["background", "road", "sidewalk", "wall"],
        "dsec19" | "dsec19-ins" => &["background", "road", "sidewalk", "wall", "sky"],
        _ => &[],
    };
    v.iter().map(|s| s.to_string()).collect()
}

/// Labels each mask with the majority class of the semantic map under it.
/// Masks whose majority covers less than `min_overlap` of the mask, and masks
/// whose label is excluded, are dropped.
pub fn assign_labels(
    ms: &MaskSet,
    semantic: &[usize],
    classes: &[String],
    exclude: &[String],
    min_overlap: f64,
) -> Result<Vec<InstanceAnnotation>> {
    let mut out = Vec::new();
    for (k, mask) in ms.masks.iter().enumerate() {
        if semantic.len() != mask.height * mask.width {
            return Err(Error::Validation(format!(
                "semantic map has {} cells, mask {k} is {}x{}",
                semantic.len(),
                mask.width,
                mask.height
            )));
        }
        let mut counts = vec![0usize; classes.len()];
        let mut n = 0usize;
        for (x, y) in mask.pixels() {
            let c = semantic[y * mask.width + x];
            if c >= classes.len() {
                return Err(Error::Data(format!(
                    "semantic class {c} at ({x}, {y}) outside a table of {}",
                    classes.len()
                )));
            }
            counts[c] += 1;
            n += 1;
        }
        if n == 0 {
            continue;
        }
        let best = (0..classes.len())
            .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
            .expect("non-empty class table");
        if (counts[best] as f64) < min_overlap * n as f64 {
            continue;
        }
        let label = &classes[best];
        if exclude.contains(label) {
            continue;
        }
        out.push(InstanceAnnotation {
            mask: mask.to_rle(),
            label: label.clone(),
            level: ms.level,
            frame_id: ms.frame_id.clone(),
        });
    }
    Ok(out)
}

/// Deterministic furthest-point sampling over the set pixels of `mask`.
/// The first point is the set pixel nearest the centroid; each next point
/// maximizes the minimum distance to those already chosen. Ties go to the
/// smallest `(y, x)`. Returns `(x, y)` pairs; all pixels when `k` exceeds the area.
pub fn fps_points(mask: &BinaryMask, k: usize) -> Result<Vec<(usize, usize)>> {
    let mut pixels: Vec<(usize, usize)> = mask.pixels();
    if pixels.is_empty() {
        return Err(Error::Precondition("cannot sample points from an empty mask".into()));
    }
    // (y, x) order makes "first minimal" the tie-break
    pixels.sort_by_key(|&(x, y)| (y, x));
    let n = pixels.len() as i64;
    let sx: i64 = pixels.iter().map(|p| p.0 as i64).sum();
    let sy: i64 = pixels.iter().map(|p| p.1 as i64).sum();
    let centroid_dist = |&(x, y): &(usize, usize)| {
        let dx = n * x as i64 - sx;
        let dy = n * y as i64 - sy;
        dx as i128 * dx as i128 + dy as i128 * dy as i128
    };
    let first = pixels
        .iter()
        .enumerate()
        .min_by_key(|(i, p)| (centroid_dist(p), *i))
        .map(|(i, _)| i)
        .unwrap();
    let k = k.min(pixels.len());
    let mut chosen = vec![pixels[first]];
    let sq = |a: (usize, usize), b: (usize, usize)| {
        let dx = a.0 as i64 - b.0 as i64;
        let dy = a.1 as i64 - b.1 as i64;
        dx * dx + dy * dy
    };
    let mut mind: Vec<i64> = pixels.iter().map(|&p| sq(p, pixels[first])).collect();
    while chosen.len() < k {
        let mut best = 0;
        for i in 1..pixels.len() {
            if mind[i] > mind[best] {
                best = i;
            }
        }
        let p = pixels[best];
        chosen.push(p);
        for (i, &q) in pixels.iter().enumerate() {
            mind[i] = mind[i].min(sq(q, p));
        }
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table() -> Vec<String> {
        ["road", "car", "sky"].iter().map(|s| s.to_string()).collect()
    }

    fn one_mask(mask: BinaryMask) -> MaskSet {
        MaskSet {
            level: HierarchyLevel::Instance,
            masks: vec![mask],
            frame_id: "f".into(),
        }
    }

    #[test]
    fn majority_labels() {
        // 10 pixels in row 0; classes painted per column
        let mask = BinaryMask::from_fn(2, 10, |_, y| y == 0);
        let paint = |cars: usize, roads: usize| -> Vec<usize> {
            (0..20)
                .map(|i| {
                    let x = i % 10;
                    if x < cars {
                        1
                    } else if x < cars + roads {
                        0
                    } else {
                        2
                    }
                })
                .collect()
        };
        let ms = one_mask(mask);
        let full = assign_labels(&ms, &paint(10, 0), &table(), &[], 0.5).unwrap();
        assert_eq!(full[0].label, "car");
        let sixty = assign_labels(&ms, &paint(6, 4), &table(), &[], 0.5).unwrap();
        assert_eq!(sixty[0].label, "car");
        let split = assign_labels(&ms, &paint(4, 3), &table(), &[], 0.5).unwrap();
        assert!(split.is_empty());
        let excluded = assign_labels(&ms, &paint(0, 10), &table(), &["road".into()], 0.5).unwrap();
        assert!(excluded.is_empty());
        let bad = vec![7; 20];
        assert!(matches!(assign_labels(&ms, &bad, &table(), &[], 0.5), Err(Error::Data(_))));
    }

    #[test]
    fn fps_examples() {
        let strip = BinaryMask::from_fn(1, 11, |_, _| true);
        assert_eq!(fps_points(&strip, 3).unwrap(), vec![(5, 0), (0, 0), (10, 0)]);
        let three = BinaryMask::from_fn(4, 4, |x, y| (x, y) == (0, 0) || (x, y) == (3, 1) || (x, y) == (1, 3));
        let pts = fps_points(&three, 3).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts, fps_points(&three, 3).unwrap());
        assert_eq!(fps_points(&three, 10).unwrap().len(), 3);
        assert!(matches!(fps_points(&BinaryMask::new(2, 2), 1), Err(Error::Precondition(_))));
    }

    #[test]
    fn exclusion_defaults() {
        assert_eq!(default_exclusions("DDD17"), vec!["flat"]);
        assert_eq!(default_exclusions("dsec11").len(), 4);
        let d19 = default_exclusions("dsec19");
        assert_eq!(d19.len(), 5);
        assert!(d19.contains(&"sky".to_string()));
    }

    proptest! {
        #[test]
        fn excluded_labels_never_assigned(seed in 0u64..1000) {
            let sem: Vec<usize> = (0..64).map(|i| ((i as u64 * 7 + seed) % 3) as usize).collect();
            let masks: Vec<BinaryMask> = (0..4).map(|k| BinaryMask::from_fn(8, 8, move |x, y| (x + y * 8 + k) % 4 == 0 || y == k)).collect();
            let ms = MaskSet { level: HierarchyLevel::Part, masks, frame_id: "f".into() };
            let ex = vec!["sky".to_string()];
            for a in assign_labels(&ms, &sem, &table(), &ex, 0.3).unwrap() {
                prop_assert_ne!(a.label, "sky");
            }
        }
    }
}
