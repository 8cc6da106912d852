//! RoI pooling cost profile and parameter tables.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mask::{BinaryMask, PixelBox};
use crate::model::{roi_mask_pool, FeatureMap, ParamStore};
use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub resolution: usize,
    pub masks: usize,
    pub ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times mask pooling on a random `channels × r × r` map for every
/// `(resolution, mask count)` pair. Masks are random boxes at the map's own
/// resolution; only the pooling call is timed. Reports the median over
/// `repeats` runs in milliseconds.
pub fn profile_roi_align(
    resolutions: &[usize],
    mask_counts: &[usize],
    channels: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<ProfileRow>> {
    if resolutions.iter().chain(mask_counts).any(|&v| v == 0) || channels == 0 || repeats == 0 {
        return Err(Error::Validation("profile sizes must be positive".into()));
    }
    let mut rows = Vec::new();
    for &r in resolutions {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ r as u64);
        let data = Mat::from_vec(r * r, channels, (0..r * r * channels).map(|_| rng.random::<f64>()).collect());
        let fmap = FeatureMap::new(r, r, data);
        for &count in mask_counts {
            let boxes: Vec<PixelBox> = (0..count)
                .map(|_| {
                    let lo = (r / 8).max(1);
                    let hi = (r / 2).max(lo + 1);
                    let w = rng.random_range(lo..hi);
                    let h = rng.random_range(lo..hi);
                    let x = rng.random_range(0..=r - w);
                    let y = rng.random_range(0..=r - h);
                    PixelBox {
                        x_min: x,
                        y_min: y,
                        x_max: x + w - 1,
                        y_max: y + h - 1,
                    }
                })
                .collect();
            let mut runs = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let mut total = 0.0;
                for b in &boxes {
                    let mask = BinaryMask::from_box(r, r, *b);
                    let t = Instant::now();
                    let pooled = roi_mask_pool(&fmap, &mask, None)?;
                    total += t.elapsed().as_secs_f64();
                    std::hint::black_box(pooled);
                }
                runs.push(total * 1e3);
            }
            rows.push(ProfileRow {
                resolution: r,
                masks: count,
                ms: median(runs),
            });
        }
    }
    Ok(rows)
}

pub fn profile_to_csv(rows: &[ProfileRow]) -> String {
    let mut s = String::from("resolution,masks,ms\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.4}\n", r.resolution, r.masks, r.ms));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    /// `(group, count)` sorted by group name.
    pub groups: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamTable {
    pub fn render(&self) -> String {
        let mut s = format!("{:<12} {:>10}\n", "module", "params");
        for (g, n) in &self.groups {
            s.push_str(&format!("{g:<12} {n:>10}\n"));
        }
        s.push_str(&format!("{:<12} {:>10}\n", "total", self.total));
        s
    }
}

/// Parameter counts grouped by the first component of each name.
pub fn count_params(params: &ParamStore) -> ParamTable {
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for (name, m) in &params.tensors {
        let g = name.split('.').next().unwrap_or(name).to_string();
        *groups.entry(g).or_default() += m.len();
    }
    let total = groups.values().sum();
    ParamTable {
        groups: groups.into_iter().collect(),
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_counts() {
        let mut p = ParamStore::default();
        p.set("head.weight", Mat::zeros(3, 4));
        p.set("head.bias", Mat::zeros(1, 4));
        let t = count_params(&p);
        assert_eq!(t.groups, vec![("head".to_string(), 16)]);
        assert_eq!(t.total, 16);
    }

    #[test]
    fn grouping_and_conservation() {
        let mut p = ParamStore::default();
        p.set("fusion.0.self.attn.q.weight", Mat::zeros(2, 2));
        p.set("fusion.1.ffn.mlp.fc1.bias", Mat::zeros(1, 3));
        p.set("se.proj.weight", Mat::zeros(4, 2));
        let t = count_params(&p);
        assert_eq!(t.groups, vec![("fusion".to_string(), 7), ("se".to_string(), 8)]);
        assert_eq!(t.total, p.total());
    }

    #[test]
    fn profile_shape_and_csv() {
        let rows = profile_roi_align(&[8, 16], &[2, 5, 7], 2, 1, 0).unwrap();
        assert_eq!(rows.len(), 6);
        let csv = profile_to_csv(&rows);
        assert!(csv.starts_with("resolution,masks,ms\n"));
        assert_eq!(csv.lines().count(), 7);
        assert!(profile_roi_align(&[0], &[1], 1, 1, 0).is_err());
    }

    #[test]
    fn more_masks_take_longer() {
        let rows = profile_roi_align(&[64], &[10, 1000], 4, 3, 1).unwrap();
        assert!(rows[1].ms >= rows[0].ms);
    }
}
