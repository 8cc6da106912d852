//! Promptable mask decoder.
//!
//! Four learned mask tokens (one for box prompts, three granularities for point
//! prompts) are concatenated with prompt tokens, refined by two bidirectional
//! attention blocks against the image embedding and a final token-to-image
//! attention. Each mask token yields a logit map by a dot product between its
//! hyper-MLP embedding and the refined image embedding; its projection to the
//! guidance width is the mask token `G`.

use serde::{Deserialize, Serialize};

use super::layers::{attention, layer_norm, linear, mlp, sincos_grid, sincos_point, Graph};
use super::{FeatureMap, ModelConfig, SealModel};
use crate::autograd::Var;
use crate::mask::{bilinear_upsample, BinaryMask, PixelBox};
use crate::tensor::Mat;
use crate::{Error, Result};

pub const MASK_TOKENS: usize = 4;
pub const BLOCKS: usize = 2;

/// Visual prompt in input-pixel coordinates; box corners are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prompt {
    Point {
        x: usize,
        y: usize,
    },
    Box {
        x_min: usize,
        y_min: usize,
        x_max: usize,
        y_max: usize,
    },
}

impl Prompt {
    pub fn from_box(b: PixelBox) -> Self {
        Prompt::Box {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        match *self {
            Prompt::Point { x, y } => {
                if x >= width || y >= height {
                    return Err(Error::Validation(format!(
                        "point ({x}, {y}) outside {width}x{height} frame"
                    )));
                }
            }
            Prompt::Box {
                x_min,
                y_min,
                x_max,
                y_max,
            } => {
                if x_max >= width || y_max >= height {
                    return Err(Error::Validation(format!(
                        "box ({x_min}, {y_min}, {x_max}, {y_max}) outside {width}x{height} frame"
                    )));
                }
                if x_min > x_max || y_min > y_max {
                    return Err(Error::Validation(format!(
                        "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mask token rows used by this prompt kind, with their tags.
    pub fn outputs(&self) -> &'static [(usize, Granularity)] {
        match self {
            Prompt::Point { .. } => &[(1, Granularity::Coarse), (2, Granularity::Mid), (3, Granularity::Fine)],
            Prompt::Box { .. } => &[(0, Granularity::Single)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Single,
    Coarse,
    Mid,
    Fine,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Single => "single",
            Granularity::Coarse => "coarse",
            Granularity::Mid => "mid",
            Granularity::Fine => "fine",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction {
    pub prompt_index: usize,
    pub granularity: Granularity,
    pub mask: BinaryMask,
    /// Mask token `G`, `D` values.
    pub token: Vec<f64>,
}

pub struct DecoderVars {
    /// `N × 4` logits at feature resolution, one column per mask token.
    pub logits: Var,
    /// `4 × D` projected mask tokens.
    pub tokens: Var,
}

fn prompt_tokens(g: &mut Graph, prompt: &Prompt, cfg: &ModelConfig) -> Var {
    let (h2, w2) = cfg.grid();
    let sy = h2 as f64 / cfg.height as f64;
    let sx = w2 as f64 / cfg.width as f64;
    let code = |y: f64, x: f64| Mat::row_vector(sincos_point(y, x, h2, w2, cfg.d2));
    match *prompt {
        Prompt::Point { x, y } => {
            let pe = g.constant(code((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5));
            let t = g.param("decoder.type_point");
            g.tape.add(pe, t)
        }
        Prompt::Box {
            x_min,
            y_min,
            x_max,
            y_max,
        } => {
            let tl = g.constant(code(y_min as f64 * sy - 0.5, x_min as f64 * sx - 0.5));
            let br = g.constant(code((y_max + 1) as f64 * sy - 0.5, (x_max + 1) as f64 * sx - 0.5));
            let ttl = g.param("decoder.type_tl");
            let tbr = g.param("decoder.type_br");
            let a = g.tape.add(tl, ttl);
            let b = g.tape.add(br, tbr);
            g.tape.concat_rows(&[a, b])
        }
    }
}

pub fn forward(g: &mut Graph, image: Var, prompt: &Prompt, cfg: &ModelConfig) -> DecoderVars {
    let (h2, w2) = cfg.grid();
    let heads = cfg.heads;
    let pe = g.constant(sincos_grid(h2, w2, cfg.d2));
    let out_tokens = g.param("decoder.mask_tokens");
    let prompt = prompt_tokens(g, prompt, cfg);
    let t0 = g.tape.concat_rows(&[out_tokens, prompt]);
    let mut t = t0;
    let mut img = image;
    for b in 0..BLOCKS {
        let p = format!("decoder.block{b}");
        let a = attention(g, t, t, t, &format!("{p}.self"), heads, None);
        let s = g.tape.add(t, a);
        t = layer_norm(g, s, &format!("{p}.norm1"));

        let q = g.tape.add(t, t0);
        let k = g.tape.add(img, pe);
        let a = attention(g, q, k, img, &format!("{p}.t2i"), heads, None);
        let s = g.tape.add(t, a);
        t = layer_norm(g, s, &format!("{p}.norm2"));

        let f = mlp(g, t, &format!("{p}.mlp"));
        let s = g.tape.add(t, f);
        t = layer_norm(g, s, &format!("{p}.norm3"));

        let qi = g.tape.add(img, pe);
        let kt = g.tape.add(t, t0);
        let a = attention(g, qi, kt, t, &format!("{p}.i2t"), heads, None);
        let s = g.tape.add(img, a);
        img = layer_norm(g, s, &format!("{p}.norm4"));
    }
    let q = g.tape.add(t, t0);
    let k = g.tape.add(img, pe);
    let a = attention(g, q, k, img, "decoder.final", heads, None);
    let s = g.tape.add(t, a);
    t = layer_norm(g, s, "decoder.final_norm");

    let mask_tokens = g.tape.slice_rows(t, 0, MASK_TOKENS);
    let hyper = mlp(g, mask_tokens, "decoder.hyper");
    let logits = g.tape.matmul_t(img, hyper);
    let tokens = linear(g, mask_tokens, "decoder.token_proj");
    DecoderVars { logits, tokens }
}

/// Thresholds column `col` of the logit map at zero after bilinear upsampling.
pub fn mask_from_logits(logits: &Mat, col: usize, cfg: &ModelConfig) -> BinaryMask {
    let (h2, w2) = cfg.grid();
    let grid: Vec<f64> = (0..logits.rows).map(|i| logits[(i, col)]).collect();
    let up = bilinear_upsample(&grid, h2, w2, cfg.height, cfg.width);
    BinaryMask {
        height: cfg.height,
        width: cfg.width,
        data: up.iter().map(|&v| v > 0.0).collect(),
    }
}

/// Applies the prompt contract to a raw mask: box prompts keep only pixels in
/// the dilated box (the box itself if nothing survives); point prompts always
/// include the clicked pixel.
pub fn constrain_mask(mut mask: BinaryMask, prompt: &Prompt, cfg: &ModelConfig) -> BinaryMask {
    match *prompt {
        Prompt::Point { x, y } => {
            mask.set(x, y, true);
            mask
        }
        Prompt::Box {
            x_min,
            y_min,
            x_max,
            y_max,
        } => {
            let b = PixelBox {
                x_min,
                y_min,
                x_max,
                y_max,
            };
            let grown = b.dilate(cfg.box_dilation, cfg.height, cfg.width);
            for y in 0..mask.height {
                for x in 0..mask.width {
                    if !grown.contains(x, y) {
                        mask.set(x, y, false);
                    }
                }
            }
            if mask.is_empty() {
                BinaryMask::from_box(cfg.height, cfg.width, b)
            } else {
                mask
            }
        }
    }
}

pub(crate) fn predictions(
    g: &Graph,
    out: &DecoderVars,
    prompt_index: usize,
    prompt: &Prompt,
    cfg: &ModelConfig,
) -> Vec<MaskPrediction> {
    let logits = g.value(out.logits);
    let tokens = g.value(out.tokens);
    prompt
        .outputs()
        .iter()
        .map(|&(col, granularity)| MaskPrediction {
            prompt_index,
            granularity,
            mask: constrain_mask(mask_from_logits(logits, col, cfg), prompt, cfg),
            token: tokens.row(col).to_vec(),
        })
        .collect()
}

/// Decodes every prompt against backbone features.
pub fn decode_masks(model: &SealModel, features: &FeatureMap, prompts: &[Prompt]) -> Result<Vec<MaskPrediction>> {
    let cfg = &model.config;
    if (features.height, features.width) != cfg.grid() || features.dim() != cfg.d2 {
        return Err(Error::Config(format!(
            "feature map {}x{}x{} does not match model grid {:?} with width {}",
            features.dim(),
            features.height,
            features.width,
            cfg.grid(),
            cfg.d2
        )));
    }
    let mut g = Graph::new(&model.params);
    let image = g.constant(features.data.clone());
    let mut out = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        p.validate(cfg.height, cfg.width)?;
        let vars = forward(&mut g, image, p, cfg);
        out.extend(predictions(&g, &vars, i, p, cfg));
    }
    Ok(out)
}
