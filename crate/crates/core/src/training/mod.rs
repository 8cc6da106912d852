//! Two-stage optimization.
//!
//! Stage 1 trains the backbone and mask decoder: backbone cells are aligned to
//! a projected teacher feature map, and decoder logits, upsampled to pixels,
//! are fit to ground-truth masks with binary cross-entropy plus soft Dice. Stage 2 freezes both and trains fusion,
//! pooling projection, spatial encoding and mask feature enhancer with the
//! hierarchical distillation loss.

pub mod data;
pub mod loss;

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{load_frames, FrameData, Manifest, ManifestEntry, TrainData};
pub use loss::{
    bce_with_logits, cosine_distance, dice_with_logits, distill_loss, stage1_align_loss, DistillLoss, LossToggles,
};

use crate::benchmark::fps_points;
use crate::guidance::{boxes_from_masks, FeatureGrid, HierarchyLevel};
use crate::mask::{bilinear_upsample, bilinear_upsample_adjoint};
use crate::model::params::round_f32;
use crate::model::{
    Checkpoint, CheckpointMeta, Graph, ModelConfig, ModuleToggles, Prompt, SealModel, STAGE1_PREFIXES,
    STAGE2_PREFIXES,
};
use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: u8,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub loss: LossToggles,
    /// Overrides the module toggles of the model for this run.
    #[serde(default)]
    pub modules: Option<ModuleToggles>,
    /// Ground-truth masks per frame used for decoder supervision in stage 1.
    pub decoder_masks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            iterations: 15_000,
            batch_size: 8,
            lr: 2e-4,
            decay: 0.9,
            decay_epoch: 3,
            seed: 0,
            loss: LossToggles::default(),
            modules: None,
            decoder_masks: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One-based epoch of a zero-based iteration.
pub fn epoch_of(iteration: usize, batch_size: usize, num_frames: usize) -> usize {
    iteration * batch_size / num_frames.max(1) + 1
}

/// Initial rate before `decay_epoch`, a single decay from then on.
pub fn lr_schedule(_iteration: usize, epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch >= cfg.decay_epoch {
        cfg.lr * cfg.decay
    } else {
        cfg.lr
    }
}

/// Adam with the usual β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Debug, Default)]
pub struct Adam {
    step: u64,
    m: HashMap<String, Mat>,
    v: HashMap<String, Mat>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    /// Updates every parameter that has a gradient, then rounds it to `f32`
    /// so the stored checkpoint reproduces the in-memory model exactly.
    pub fn step(&mut self, model: &mut SealModel, grads: &HashMap<String, Mat>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - Self::B1.powi(t);
        let c2 = 1.0 - Self::B2.powi(t);
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in names {
            let g = &grads[name];
            let p = model.params.get_mut(name).expect("gradient for unknown parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(g.rows, g.cols));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(g.rows, g.cols));
            for i in 0..g.len() {
                m.data[i] = Self::B1 * m.data[i] + (1.0 - Self::B1) * g.data[i];
                v.data[i] = Self::B2 * v.data[i] + (1.0 - Self::B2) * g.data[i] * g.data[i];
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + Self::EPS);
            }
            round_f32(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: u8,
    pub entries: Vec<LogEntry>,
    pub dead_features: usize,
    pub checkpoint: Option<String>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    /// One JSON object per line: `{"iter", "loss", "lr", "wall_ms"}`.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("log entry serializes"));
            s.push('\n');
        }
        s
    }

    /// Mean loss over iterations `[from, to)`.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let slice = &self.entries[from.min(self.entries.len())..to.min(self.entries.len())];
        slice.iter().map(|e| e.loss).sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Area-pools a teacher grid onto the student grid and maps it to `d2` channels.
pub fn teacher_map(grid: &FeatureGrid, h2: usize, w2: usize, projection: &Mat) -> Mat {
    let mut pooled = Mat::zeros(h2 * w2, grid.dim);
    for y in 0..h2 {
        let ys = y * grid.height / h2..((y + 1) * grid.height / h2).max(y * grid.height / h2 + 1);
        for x in 0..w2 {
            let xs = x * grid.width / w2..((x + 1) * grid.width / w2).max(x * grid.width / w2 + 1);
            let row = pooled.row_mut(y * w2 + x);
            let mut n = 0.0;
            for yy in ys.clone() {
                for xx in xs.clone() {
                    for (acc, v) in row.iter_mut().zip(grid.cell(yy.min(grid.height - 1), xx.min(grid.width - 1))) {
                        *acc += v;
                    }
                    n += 1.0;
                }
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    pooled.matmul(projection)
}

/// Fixed map from teacher width `d` to backbone width `d2`: the identity when
/// they agree, otherwise a seeded Gaussian matrix.
pub fn teacher_projection(d: usize, d2: usize, seed: u64) -> Mat {
    if d == d2 {
        return Mat::identity(d);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EAC_4E55);
    let s = 1.0 / (d as f64).sqrt();
    Mat::from_vec(d, d2, (0..d * d2).map(|_| rng.random_range(-1.0..1.0) * s * 3f64.sqrt()).collect())
}

struct Stage2Cache {
    feats: Mat,
    /// Mask tokens of every enabled level's masks, stacked in level order.
    tokens: Mat,
    masks: Vec<crate::mask::BinaryMask>,
    /// Row range per level inside `tokens`/`masks`.
    ranges: [(usize, usize); 3],
    text: Vec<String>,
}

fn stage2_cache(model: &SealModel, frame: &FrameData, toggles: &LossToggles) -> Result<Stage2Cache> {
    let mut g = Graph::new(&model.params);
    let feats = model.backbone(&mut g, &frame.voxel)?;
    let mut rows = Vec::new();
    let mut masks = Vec::new();
    let mut ranges = [(0, 0); 3];
    for level in HierarchyLevel::ALL {
        let start = masks.len();
        if toggles.level_enabled(level) {
            let lg = frame.guidance.level(level);
            for b in boxes_from_masks(&lg.masks)? {
                let out = model.decode(&mut g, feats, &Prompt::from_box(b));
                rows.extend_from_slice(g.value(out.tokens).row(0));
            }
            masks.extend(lg.masks.masks.iter().cloned());
        }
        ranges[level.index()] = (start, masks.len());
    }
    let mut text: Vec<String> = Vec::new();
    for lg in &frame.guidance.levels {
        for r in &lg.records {
            for s in [&r.caption_short, &r.caption_long] {
                if !s.is_empty() && !text.contains(s) {
                    text.push(s.clone());
                }
            }
        }
    }
    Ok(Stage2Cache {
        feats: g.value(feats).clone(),
        tokens: Mat::from_vec(masks.len(), model.config.d, rows),
        masks,
        ranges,
        text,
    })
}

fn merge_grads(total: &mut HashMap<String, Mat>, part: HashMap<String, Mat>) {
    for (k, g) in part {
        match total.get_mut(&k) {
            Some(t) => t.add_assign(&g),
            None => {
                total.insert(k, g);
            }
        }
    }
}

/// Runs one training stage. Stage 1 starts from `init` when given, otherwise
/// from a fresh model of `model_cfg`; stage 2 requires `init`.
pub fn train(
    init: Option<&Checkpoint>,
    model_cfg: &ModelConfig,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if data.frames.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut model = match (cfg.stage, init) {
        (2, None) => {
            return Err(Error::Precondition(
                "stage 2 needs a stage-1 checkpoint to initialize from (--init)".into(),
            ))
        }
        (_, Some(c)) => SealModel::from_checkpoint(c),
        (_, None) => SealModel::new(model_cfg.clone(), cfg.seed)?,
    };
    if let Some(t) = cfg.modules {
        model.config.toggles = t;
    }
    for f in &data.frames {
        model.check_voxel(&f.voxel)?;
    }
    let prefixes: &[&str] = if cfg.stage == 1 { &STAGE1_PREFIXES } else { &STAGE2_PREFIXES };
    let (h2, w2) = model.config.grid();

    let teachers: Vec<Mat> = if cfg.stage == 1 {
        let provider = data
            .teacher
            .as_ref()
            .ok_or_else(|| Error::Precondition("stage 1 needs a teacher feature provider".into()))?;
        let mut out = Vec::with_capacity(data.frames.len());
        let mut projection = None;
        for f in &data.frames {
            let image = f
                .image
                .as_ref()
                .ok_or_else(|| Error::Data(format!("frame {} has no image for the teacher", f.frame_id)))?;
            let grid = provider.features(image).map_err(|message| Error::Provider {
                level: "image".into(),
                mask: 0,
                message,
            })?;
            let p = projection.get_or_insert_with(|| teacher_projection(grid.dim, model.config.d2, cfg.seed));
            out.push(teacher_map(&grid, h2, w2, p));
        }
        out
    } else {
        Vec::new()
    };
    let caches: Vec<Stage2Cache> = if cfg.stage == 2 {
        data.frames
            .iter()
            .map(|f| stage2_cache(&model, f, &cfg.loss))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(cfg.stage as u64 * 0x9E37));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut adam = Adam::default();
    let mut log = TrainLog {
        stage: cfg.stage,
        ..Default::default()
    };
    let n_frames = data.frames.len();
    for it in 0..cfg.iterations {
        let start = Instant::now();
        let lr = lr_schedule(it, epoch_of(it, cfg.batch_size, n_frames), cfg);
        let mut grads: HashMap<String, Mat> = HashMap::new();
        let mut loss_sum = 0.0;
        let scale = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..n_frames).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let fi = order[cursor];
            cursor += 1;
            let frame = &data.frames[fi];
            let mut g = Graph::with_trainable(&model.params, prefixes);
            let mut seeds = Vec::new();
            let frame_loss = if cfg.stage == 1 {
                let feats = model.backbone(&mut g, &frame.voxel)?;
                let (align, ga, dead) = stage1_align_loss(g.value(feats), &teachers[fi])?;
                log.dead_features += dead;
                seeds.push((feats, ga.scaled(scale)));
                let masks = &frame.guidance.level(HierarchyLevel::Instance).masks.masks;
                let mut picks: Vec<usize> = (0..masks.len()).collect();
                picks.shuffle(&mut rng);
                picks.truncate(cfg.decoder_masks);
                let mut bce_total = 0.0;
                let n_prompts = (2 * picks.len()).max(1) as f64;
                let (hh, ww) = (model.config.height, model.config.width);
                for &k in &picks {
                    let mask = &masks[k];
                    let target: Vec<f64> = mask.data.iter().map(|&b| b as u8 as f64).collect();
                    let bx = mask.bbox().expect("guidance masks are non-empty");
                    let seed_pt = fps_points(mask, 1)?[0];
                    for prompt in [Prompt::from_box(bx), Prompt::Point { x: seed_pt.0, y: seed_pt.1 }] {
                        let out = model.decode(&mut g, feats, &prompt);
                        let logits = g.value(out.logits).clone();
                        // point prompts: supervise the best of the three granularities
                        let mut best: Option<(f64, usize, Vec<f64>)> = None;
                        for &(col, _) in prompt.outputs() {
                            let z: Vec<f64> = (0..logits.rows).map(|i| logits[(i, col)]).collect();
                            let up = bilinear_upsample(&z, h2, w2, hh, ww);
                            let (lb, gb) = bce_with_logits(&up, &target);
                            let (ld, gd) = dice_with_logits(&up, &target);
                            let g_up: Vec<f64> = gb.iter().zip(&gd).map(|(a, b)| a + b).collect();
                            let (l, gz) = (lb + ld, bilinear_upsample_adjoint(&g_up, h2, w2, hh, ww));
                            if best.as_ref().is_none_or(|b| l < b.0) {
                                best = Some((l, col, gz));
                            }
                        }
                        let (l, col, gz) = best.expect("prompt has outputs");
                        bce_total += l / n_prompts;
                        let mut seed = Mat::zeros(logits.rows, logits.cols);
                        for (i, v) in gz.into_iter().enumerate() {
                            seed[(i, col)] = v * scale / n_prompts;
                        }
                        seeds.push((out.logits, seed));
                    }
                }
                align + bce_total
            } else {
                let c = &caches[fi];
                if c.masks.is_empty() {
                    continue;
                }
                let feats = g.constant(c.feats.clone());
                let text = model.text_tokens(&mut g, data.text.as_ref(), &c.text);
                let fused = model.fuse(&mut g, feats, text);
                let tokens = g.constant(c.tokens.clone());
                let hv = model.head(&mut g, fused, tokens, &c.masks)?;
                let mh = g.value(hv.m_hat);
                let student: Vec<Mat> = c
                    .ranges
                    .iter()
                    .map(|&(a, b)| Mat::from_vec(b - a, mh.cols, mh.data[a * mh.cols..b * mh.cols].to_vec()))
                    .collect();
                let dl = distill_loss(&student, &frame.guidance, &cfg.loss)?;
                log.dead_features += dl.dead_features;
                let mut seed = Mat::zeros(mh.rows, mh.cols);
                for (l, &(a, _)) in c.ranges.iter().enumerate() {
                    let gl = &dl.grads[l];
                    seed.data[a * mh.cols..a * mh.cols + gl.len()].copy_from_slice(&gl.data);
                }
                seeds.push((hv.m_hat, seed.scaled(scale)));
                dl.value
            };
            if !frame_loss.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite loss at iteration {it} on frame {}",
                    frame.frame_id
                )));
            }
            loss_sum += frame_loss;
            merge_grads(&mut grads, g.param_grads(&seeds));
        }
        adam.step(&mut model, &grads, lr);
        log.entries.push(LogEntry {
            iter: it,
            loss: loss_sum * scale,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if it % 50 == 0 {
            log::info!("stage {} iter {it}: loss {:.4} lr {lr:.2e}", cfg.stage, loss_sum * scale);
        }
    }
    let meta = CheckpointMeta {
        stage: cfg.stage,
        iteration: cfg.iterations,
        seed: cfg.seed,
        text_encoder: data.text_spec.clone().or_else(|| init.and_then(|c| c.meta.text_encoder.clone())),
    };
    Ok((model.checkpoint(meta), log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, 1, &cfg), 2e-4);
        assert!((lr_schedule(0, 3, &cfg) - 1.8e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(0, 10, &cfg), lr_schedule(0, 3, &cfg));
        assert_eq!(lr_schedule(0, 2, &cfg), 2e-4);
    }

    #[test]
    fn epochs_count_passes_over_the_manifest() {
        assert_eq!(epoch_of(0, 8, 64), 1);
        assert_eq!(epoch_of(7, 8, 64), 1);
        assert_eq!(epoch_of(8, 8, 64), 2);
        assert_eq!(epoch_of(16, 8, 64), 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { iterations: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { stage: 3, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn teacher_map_pools_blocks() {
        let mut grid = FeatureGrid::zeros(2, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                grid.cell_mut(y, x).copy_from_slice(&[x as f64, y as f64]);
            }
        }
        let m = teacher_map(&grid, 2, 2, &Mat::identity(2));
        assert_eq!(m.row(0), &[0.5, 0.5]);
        assert_eq!(m.row(3), &[2.5, 2.5]);
    }
}
