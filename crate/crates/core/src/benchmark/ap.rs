//! Average precision for uniformly scored mask predictions.
//!
//! Every prediction carries the same confidence, so each class has a single
//! operating point per IoU threshold. AP at threshold τ is the precision there:
//! matched predictions over all predictions of the class, where predictions and
//! ground truth of the same class and frame are matched one-to-one with IoU ≥ τ
//! and the number of matches is as large as possible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::BenchmarkManifest;
use crate::mask::{mask_iou, BinaryMask, Rle};
use crate::{Error, Result};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub const THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask: BinaryMask,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePredictions {
    pub frame_id: String,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub mask: Rle,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFrame {
    pub frame_id: String,
    pub predictions: Vec<PredictionRecord>,
}

/// On-disk predictions document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionsDoc {
    pub frames: Vec<PredictionsFrame>,
}

impl PredictionsDoc {
    pub fn from_predictions(preds: &[FramePredictions]) -> Self {
        Self {
            frames: preds
                .iter()
                .map(|f| PredictionsFrame {
                    frame_id: f.frame_id.clone(),
                    predictions: f
                        .predictions
                        .iter()
                        .map(|p| PredictionRecord {
                            mask: p.mask.to_rle(),
                            label: p.label.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn to_predictions(&self) -> Result<Vec<FramePredictions>> {
        self.frames
            .iter()
            .map(|f| {
                Ok(FramePredictions {
                    frame_id: f.frame_id.clone(),
                    predictions: f
                        .predictions
                        .iter()
                        .map(|p| {
                            Ok(Prediction {
                                mask: p.mask.decode()?,
                                label: p.label.clone(),
                            })
                        })
                        .collect::<Result<_>>()?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub ground_truth: usize,
    pub predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub per_class: BTreeMap<String, ClassAp>,
    pub prompt: String,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:>7} {:>7} {:>7} {:>5} {:>5}\n", "class", "AP", "AP50", "AP25", "gt", "pred");
        for (c, r) in &self.per_class {
            s.push_str(&format!(
                "{:<16} {:>7.4} {:>7.4} {:>7.4} {:>5} {:>5}\n",
                c, r.ap, r.ap50, r.ap25, r.ground_truth, r.predictions
            ));
        }
        s.push_str(&format!(
            "{:<16} {:>7.4} {:>7.4} {:>7.4}\n",
            format!("mean ({})", self.prompt),
            self.ap,
            self.ap50,
            self.ap25
        ));
        s
    }
}

/// Size of a maximum one-to-one matching between predictions (rows) and
/// ground truth (columns) using pairs with IoU ≥ `tau`. Candidate pairs are
/// tried in descending IoU order and improved with augmenting paths.
pub fn matched_count(iou: &[Vec<f64>], tau: f64) -> usize {
    let n_pred = iou.len();
    let n_gt = iou.first().map_or(0, |r| r.len());
    let mut adj: Vec<Vec<usize>> = (0..n_pred)
        .map(|p| (0..n_gt).filter(|&g| iou[p][g] >= tau).collect())
        .collect();
    for (p, row) in adj.iter_mut().enumerate() {
        row.sort_by(|&a, &b| iou[p][b].partial_cmp(&iou[p][a]).unwrap().then(a.cmp(&b)));
    }
    let mut owner: Vec<Option<usize>> = vec![None; n_gt];
    fn augment(p: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &g in &adj[p] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            if owner[g].is_none() || augment(owner[g].unwrap(), adj, owner, seen) {
                owner[g] = Some(p);
                return true;
            }
        }
        false
    }
    // predictions ordered by their best IoU so the greedy pass comes first
    let mut order: Vec<usize> = (0..n_pred).collect();
    let best = |p: usize| iou[p].iter().cloned().fold(0.0, f64::max);
    order.sort_by(|&a, &b| best(b).partial_cmp(&best(a)).unwrap().then(a.cmp(&b)));
    let mut count = 0;
    for p in order {
        let mut seen = vec![false; n_gt];
        if augment(p, &adj, &mut owner, &mut seen) {
            count += 1;
        }
    }
    count
}

/// Evaluates predictions against the manifest's annotations.
pub fn evaluate_ap(predictions: &[FramePredictions], manifest: &BenchmarkManifest, prompt: &str) -> Result<EvalReport> {
    let mut by_frame: BTreeMap<&str, &FramePredictions> = BTreeMap::new();
    for f in predictions {
        for p in &f.predictions {
            if !manifest.classes.contains(&p.label) {
                return Err(Error::Validation(format!(
                    "frame {}: predicted label '{}' not in class table",
                    f.frame_id, p.label
                )));
            }
        }
        if by_frame.insert(f.frame_id.as_str(), f).is_some() {
            return Err(Error::Validation(format!("frame {} predicted twice", f.frame_id)));
        }
    }
    let n_thr = THRESHOLDS.len() + 1; // last slot is τ = 0.25
    let taus: Vec<f64> = THRESHOLDS.iter().copied().chain([0.25]).collect();
    let mut tp: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut n_pred: BTreeMap<String, usize> = BTreeMap::new();
    let mut n_gt: BTreeMap<String, usize> = BTreeMap::new();
    for frame in &manifest.frames {
        let gts: Vec<(BinaryMask, &str)> = frame
            .annotations
            .iter()
            .map(|a| Ok((a.mask.decode()?, a.label.as_str())))
            .collect::<Result<_>>()?;
        let preds: &[Prediction] = by_frame.get(frame.frame_id.as_str()).map_or(&[], |f| &f.predictions);
        for class in &manifest.classes {
            let g: Vec<&BinaryMask> = gts.iter().filter(|(_, l)| l == class).map(|(m, _)| m).collect();
            let p: Vec<&BinaryMask> = preds.iter().filter(|x| &x.label == class).map(|x| &x.mask).collect();
            *n_gt.entry(class.clone()).or_default() += g.len();
            *n_pred.entry(class.clone()).or_default() += p.len();
            let slot = tp.entry(class.clone()).or_insert_with(|| vec![0; n_thr]);
            if g.is_empty() || p.is_empty() {
                continue;
            }
            let iou: Vec<Vec<f64>> = p
                .iter()
                .map(|pm| g.iter().map(|gm| mask_iou(pm, gm)).collect::<Result<_>>())
                .collect::<Result<_>>()?;
            for (i, &tau) in taus.iter().enumerate() {
                slot[i] += matched_count(&iou, tau);
            }
        }
    }
    let mut per_class = BTreeMap::new();
    for class in &manifest.classes {
        let g = n_gt[class];
        if g == 0 {
            continue;
        }
        let p = n_pred[class];
        let prec = |i: usize| if p == 0 { 0.0 } else { tp[class][i] as f64 / p as f64 };
        let ap = (0..THRESHOLDS.len()).map(prec).sum::<f64>() / THRESHOLDS.len() as f64;
        per_class.insert(
            class.clone(),
            ClassAp {
                ap,
                ap50: prec(0),
                ap25: prec(THRESHOLDS.len()),
                ground_truth: g,
                predictions: p,
            },
        );
    }
    let k = per_class.len().max(1) as f64;
    Ok(EvalReport {
        ap: per_class.values().map(|c| c.ap).sum::<f64>() / k,
        ap50: per_class.values().map(|c| c.ap50).sum::<f64>() / k,
        ap25: per_class.values().map(|c| c.ap25).sum::<f64>() / k,
        per_class,
        prompt: prompt.to_string(),
    })
}
