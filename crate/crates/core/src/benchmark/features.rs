//! Mask feature export (`SFT1`) and cluster separation.
//!
//! ```text
//! "SFT1" | u32 D | u32 rows | rows × (u32 frame index, u16 label id, D × f32), all little-endian
//! ```

use std::fs;
use std::path::Path;

use super::predict::{prompted_features, PromptKind};
use super::BenchmarkManifest;
use crate::events::VoxelGrid;
use crate::mask::BinaryMask;
use crate::model::SealModel;
use crate::tensor::Mat;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SFT1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub frame_index: u32,
    pub label_id: u16,
    /// The pooled semantic feature was empty for this mask.
    pub dead: bool,
    pub values: Vec<f64>,
}

/// `M̂` of every annotation, prompted from its own mask. `voxels[i]` is the
/// input of `manifest.frames[i]`; `queries` feed the fusion text tokens.
pub fn export_mask_features(
    model: &SealModel,
    manifest: &BenchmarkManifest,
    voxels: &[VoxelGrid],
    kind: PromptKind,
    queries: &[(String, Vec<f64>)],
) -> Result<Vec<FeatureRow>> {
    if voxels.len() != manifest.frames.len() {
        return Err(Error::Validation(format!(
            "{} voxel grids for {} frames",
            voxels.len(),
            manifest.frames.len()
        )));
    }
    let text = (!queries.is_empty()).then(|| {
        Mat::from_vec(
            queries.len(),
            model.config.d,
            queries.iter().flat_map(|(_, v)| v.iter().copied()).collect(),
        )
    });
    let mut rows = Vec::new();
    for (fi, (frame, voxel)) in manifest.frames.iter().zip(voxels).enumerate() {
        let masks: Vec<BinaryMask> = frame.annotations.iter().map(|a| a.mask.decode()).collect::<Result<_>>()?;
        let feats = prompted_features(model, voxel, &masks, kind, text.as_ref())?;
        for (a, (_, b)) in frame.annotations.iter().zip(feats) {
            let label_id = manifest
                .class_id(&a.label)
                .ok_or_else(|| Error::Validation(format!("label '{}' not in class table", a.label)))?;
            rows.push(FeatureRow {
                frame_index: fi as u32,
                label_id: label_id as u16,
                dead: b.dead,
                values: b.m_hat,
            });
        }
    }
    Ok(rows)
}

pub fn write_sft1(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.values.len());
    if rows.iter().any(|r| r.values.len() != d) {
        return Err(Error::Validation("feature rows differ in width".into()));
    }
    let mut out = Vec::with_capacity(12 + rows.len() * (6 + 4 * d));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    for r in rows {
        out.extend_from_slice(&r.frame_index.to_le_bytes());
        out.extend_from_slice(&r.label_id.to_le_bytes());
        for &v in &r.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads rows back; `dead` is set for all-zero rows.
pub fn read_sft1(path: &Path) -> Result<Vec<FeatureRow>> {
    let b = fs::read(path).map_err(|e| Error::io(path, e))?;
    if b.len() < 12 || &b[..4] != MAGIC {
        return Err(Error::Format(format!("{}: not a feature dump", path.display())));
    }
    let d = u32::from_le_bytes(b[4..8].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
    let stride = 6 + 4 * d;
    if b.len() != 12 + n * stride {
        return Err(Error::Format(format!(
            "{}: {} bytes for {n} rows of width {d}",
            path.display(),
            b.len()
        )));
    }
    Ok((0..n)
        .map(|i| {
            let r = &b[12 + i * stride..12 + (i + 1) * stride];
            let values: Vec<f64> = r[6..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            FeatureRow {
                frame_index: u32::from_le_bytes(r[0..4].try_into().unwrap()),
                label_id: u16::from_le_bytes(r[4..6].try_into().unwrap()),
                dead: values.iter().all(|&v| v == 0.0),
                values,
            }
        })
        .collect())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with Euclidean distance. Points alone in their
/// cluster score 0, as does a point whose intra and nearest-other distances
/// are both 0. Fewer than two clusters give 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    assert_eq!(points.len(), labels.len());
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 || points.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..points.len() {
        let mut sums = vec![(0.0, 0usize); clusters.len()];
        for j in 0..points.len() {
            if i == j {
                continue;
            }
            let c = clusters.binary_search(&labels[j]).unwrap();
            sums[c].0 += dist(&points[i], &points[j]);
            sums[c].1 += 1;
        }
        let own = clusters.binary_search(&labels[i]).unwrap();
        if sums[own].1 == 0 {
            continue;
        }
        let a = sums[own].0 / sums[own].1 as f64;
        let b = sums
            .iter()
            .enumerate()
            .filter(|&(c, s)| c != own && s.1 > 0)
            .map(|(_, s)| s.0 / s.1 as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / points.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sft1_round_trip() {
        let rows = vec![
            FeatureRow {
                frame_index: 3,
                label_id: 1,
                dead: false,
                values: vec![0.5, -1.0, 2.0],
            },
            FeatureRow {
                frame_index: 4,
                label_id: 0,
                dead: true,
                values: vec![0.0; 3],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.sft");
        write_sft1(&p, &rows).unwrap();
        assert_eq!(read_sft1(&p).unwrap(), rows);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 12 + 2 * (6 + 12));
    }

    #[test]
    fn silhouette_hand_cases() {
        // two tight, distant clusters
        let pts = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let s = silhouette(&pts, &[0, 0, 1, 1]);
        let a = 0.1;
        let b0 = (10.0 + 9.9) / 2.0;
        let b1 = (10.1 + 10.0) / 2.0;
        let expect = ((b0 - a) / b0 + (b1 - a) / b1 + (b1 - a) / b1 + (b0 - a) / b0) / 4.0;
        assert!((s - expect).abs() < 1e-12);
        // identical points carry no separation
        assert_eq!(silhouette(&[vec![0.0], vec![0.0], vec![0.0]], &[0, 1, 1]), 0.0);
        assert_eq!(silhouette(&pts, &[0, 0, 0, 0]), 0.0);
    }
}
