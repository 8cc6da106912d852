//! Prompted predictions on benchmark frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ap::{FramePredictions, Prediction};
use super::fps_points;
use crate::events::VoxelGrid;
use crate::mask::BinaryMask;
use crate::model::{classify, Granularity, MaskFeatureBundle, MaskPrediction, Prompt, SealModel};
use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Point,
    Box,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Point => "point",
            PromptKind::Box => "box",
        }
    }

    /// Prompt sampled from a ground-truth mask: its tight box, or its first
    /// furthest-point sample.
    pub fn prompt_for(self, mask: &BinaryMask) -> Result<Prompt> {
        match self {
            PromptKind::Box => Ok(Prompt::from_box(
                mask.bbox()
                    .ok_or_else(|| Error::Precondition("cannot prompt from an empty mask".into()))?,
            )),
            PromptKind::Point => {
                let (x, y) = fps_points(mask, 1)?[0];
                Ok(Prompt::Point { x, y })
            }
        }
    }
}

impl std::str::FromStr for PromptKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(PromptKind::Point),
            "box" => Ok(PromptKind::Box),
            other => Err(Error::Validation(format!("prompt kind must be point or box, got '{other}'"))),
        }
    }
}

/// Runs the model with one prompt per ground-truth mask and keeps one mask per
/// prompt (the coarse one for points). Returns the predictions with features.
pub fn prompted_features(
    model: &SealModel,
    voxel: &VoxelGrid,
    gt_masks: &[BinaryMask],
    kind: PromptKind,
    text: Option<&Mat>,
) -> Result<Vec<(MaskPrediction, MaskFeatureBundle)>> {
    let prompts: Vec<Prompt> = gt_masks.iter().map(|m| kind.prompt_for(m)).collect::<Result<_>>()?;
    let out = model.infer(voxel, text, &prompts)?;
    Ok(out
        .into_iter()
        .filter(|(p, _)| matches!(p.granularity, Granularity::Single | Granularity::Coarse))
        .collect())
}

/// Predicts a labelled mask per ground-truth prompt. Queries are `(label,
/// embedding)` pairs; they also serve as the fusion text tokens.
pub fn predict_frame(
    model: &SealModel,
    frame_id: &str,
    voxel: &VoxelGrid,
    gt_masks: &[BinaryMask],
    kind: PromptKind,
    queries: &[(String, Vec<f64>)],
) -> Result<FramePredictions> {
    let text = Mat::from_vec(
        queries.len(),
        model.config.d,
        queries.iter().flat_map(|(_, v)| v.iter().copied()).collect(),
    );
    let feats = prompted_features(model, voxel, gt_masks, kind, Some(&text))?;
    let mut predictions = Vec::with_capacity(feats.len());
    for (p, b) in feats {
        let ranked = classify(&b.m_hat, queries, None)?;
        predictions.push(Prediction {
            mask: p.mask,
            label: ranked[0].label.clone(),
        });
    }
    Ok(FramePredictions {
        frame_id: frame_id.to_string(),
        predictions,
    })
}

/// Same masks, labels drawn uniformly from `classes`.
pub fn random_labels(preds: &[FramePredictions], classes: &[String], seed: u64) -> Vec<FramePredictions> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    preds
        .iter()
        .map(|f| FramePredictions {
            frame_id: f.frame_id.clone(),
            predictions: f
                .predictions
                .iter()
                .map(|p| Prediction {
                    mask: p.mask.clone(),
                    label: classes[rng.random_range(0..classes.len())].clone(),
                })
                .collect(),
        })
        .collect()
}
