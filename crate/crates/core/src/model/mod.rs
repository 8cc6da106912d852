//! The segmentation network: event backbone, language fusion, promptable mask
//! decoder, RoI mask pooling, spatial encoding, mask feature enhancer and
//! cosine classification.
//!
//! Every forward pass is written against an autograd [`Graph`], so the same
//! code serves inference (no trainable parameters) and training.

pub mod backbone;
pub mod decoder;
pub mod fusion;
pub mod head;
pub mod layers;
pub mod params;
pub mod roi;

use serde::{Deserialize, Serialize};

pub use backbone::{encode_backbone, patchify};
pub use decoder::{decode_masks, Granularity, MaskPrediction, Prompt};
pub use fusion::{backbone_feature_enhancer, masked_cross_attention, windowed_self_attention};
pub use head::{classify, mask_feature_enhance, spatial_encode, Classification, CANONICAL_PHRASES};
pub use layers::Graph;
pub use params::{Checkpoint, CheckpointMeta, ParamStore};
pub use roi::{roi_mask_pool, roi_pool_weights, PooledMask, RoiWeights, ROI_GRID};

use crate::autograd::Var;
use crate::events::VoxelGrid;
use crate::guidance::TextEncoder;
use crate::mask::BinaryMask;
use crate::tensor::Mat;
use crate::{Error, Result};
use layers::{attention_specs, linear_specs, mlp_specs, norm_specs};
use params::{Init, ParamSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleToggles {
    pub fusion: bool,
    pub se: bool,
    pub mfe: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        Self {
            fusion: true,
            se: true,
            mfe: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    /// Patch size, which is also the downscale factor from input to feature grid.
    pub patch: usize,
    pub backbone_depth: usize,
    pub heads: usize,
    /// Backbone feature width.
    pub d2: usize,
    /// Guidance / classification width.
    pub d: usize,
    pub fusion_layers: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    /// Box prompts keep predicted pixels within the box grown by this many pixels.
    pub box_dilation: usize,
    #[serde(default)]
    pub toggles: ModuleToggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 512,
            width: 512,
            bins: 3,
            patch: 32,
            backbone_depth: 4,
            heads: 8,
            d2: 256,
            d: 256,
            fusion_layers: 6,
            window: 14,
            mlp_ratio: 4,
            box_dilation: 4,
            toggles: ModuleToggles::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration used for synthetic training runs.
    pub fn desk(size: usize, d: usize) -> Self {
        Self {
            height: size,
            width: size,
            bins: 3,
            patch: 8,
            backbone_depth: 1,
            heads: 2,
            d2: d,
            d,
            fusion_layers: 2,
            window: 4,
            mlp_ratio: 2,
            box_dilation: 2,
            toggles: ModuleToggles::default(),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!("input {}x{} not divisible by patch {}", self.height, self.width, self.patch));
        }
        if self.height == 0 || self.width == 0 || self.bins == 0 {
            return bad("input geometry and bins must be positive".into());
        }
        if self.d2 == 0 || self.d == 0 {
            return bad("feature widths must be positive".into());
        }
        if self.fusion_layers == 0 {
            return bad("need at least one fusion layer".into());
        }
        if self.heads == 0 || self.d2 % self.heads != 0 || self.d % self.heads != 0 {
            return bad(format!("widths {} and {} must be divisible by {} heads", self.d2, self.d, self.heads));
        }
        if self.d2 % 4 != 0 {
            return bad("backbone width must be divisible by 4 for positional codes".into());
        }
        if self.window == 0 || self.mlp_ratio == 0 {
            return bad("window and mlp ratio must be positive".into());
        }
        Ok(())
    }
}

/// Full parameter list for a configuration, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let (d2, d) = (cfg.d2, cfg.d);
    let hidden = d2 * cfg.mlp_ratio;

    linear_specs(&mut s, "backbone.patch", cfg.bins * cfg.patch * cfg.patch, d2, true);
    s.push(ParamSpec::new("backbone.pos", cfg.tokens(), d2, Init::Normal(0.02)));
    for b in 0..cfg.backbone_depth {
        let p = format!("backbone.block{b}");
        norm_specs(&mut s, &format!("{p}.norm1"), d2);
        attention_specs(&mut s, &format!("{p}.attn"), d2, d2, d2, d2);
        norm_specs(&mut s, &format!("{p}.norm2"), d2);
        mlp_specs(&mut s, &format!("{p}.mlp"), d2, hidden, d2);
    }
    norm_specs(&mut s, "backbone.norm", d2);

    for l in 0..cfg.fusion_layers {
        norm_specs(&mut s, &format!("fusion.{l}.self.norm"), d2);
        attention_specs(&mut s, &format!("fusion.{l}.self.attn"), d2, d2, d2, d2);
        norm_specs(&mut s, &format!("fusion.{l}.cross.norm"), d2);
        attention_specs(&mut s, &format!("fusion.{l}.cross.attn"), d2, d, d2, d2);
        norm_specs(&mut s, &format!("fusion.{l}.ffn.norm"), d2);
        mlp_specs(&mut s, &format!("fusion.{l}.ffn.mlp"), d2, hidden, d2);
    }

    s.push(ParamSpec::new("decoder.mask_tokens", decoder::MASK_TOKENS, d2, Init::Normal(1.0)));
    for t in ["point", "tl", "br"] {
        s.push(ParamSpec::new(format!("decoder.type_{t}"), 1, d2, Init::Normal(1.0)));
    }
    for b in 0..decoder::BLOCKS {
        let p = format!("decoder.block{b}");
        attention_specs(&mut s, &format!("{p}.self"), d2, d2, d2, d2);
        norm_specs(&mut s, &format!("{p}.norm1"), d2);
        attention_specs(&mut s, &format!("{p}.t2i"), d2, d2, d2, d2);
        norm_specs(&mut s, &format!("{p}.norm2"), d2);
        mlp_specs(&mut s, &format!("{p}.mlp"), d2, hidden, d2);
        norm_specs(&mut s, &format!("{p}.norm3"), d2);
        attention_specs(&mut s, &format!("{p}.i2t"), d2, d2, d2, d2);
        norm_specs(&mut s, &format!("{p}.norm4"), d2);
    }
    attention_specs(&mut s, "decoder.final", d2, d2, d2, d2);
    norm_specs(&mut s, "decoder.final_norm", d2);
    mlp_specs(&mut s, "decoder.hyper", d2, d2, d2);
    linear_specs(&mut s, "decoder.token_proj", d2, d, true);

    linear_specs(&mut s, "pool.proj", d2, d, false);
    linear_specs(&mut s, "se.proj", 2 * d, d, true);
    attention_specs(&mut s, "mfe.attn", d, d2, d, d);
    norm_specs(&mut s, "mfe.norm", d);
    s
}

/// Parameter groups updated in each training stage.
pub const STAGE1_PREFIXES: [&str; 2] = ["backbone.", "decoder."];
pub const STAGE2_PREFIXES: [&str; 4] = ["fusion.", "se.", "mfe.", "pool."];

/// `D2 × H2 × W2` feature map stored as one row per cell (`y * w + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Mat,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, data: Mat) -> Self {
        assert_eq!(data.rows, height * width, "feature map rows must equal cells");
        Self { height, width, data }
    }

    pub fn dim(&self) -> usize {
        self.data.cols
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        self.data.row(y * self.width + x)
    }

    pub fn is_finite(&self) -> bool {
        self.data.all_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskFeatureBundle {
    pub s: Vec<f64>,
    pub dead: bool,
    pub g: Vec<f64>,
    pub m: Vec<f64>,
    pub m_hat: Vec<f64>,
}

/// Tape handles produced by [`SealModel::head`] for `K` masks.
pub struct HeadVars {
    pub s: Var,
    pub m: Var,
    pub m_hat: Var,
    pub dead: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SealModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl SealModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&param_specs(&config), seed);
        Ok(Self { config, params })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self {
            config: ckpt.config.clone(),
            params: ckpt.params.clone(),
        }
    }

    pub fn checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            meta,
            params: self.params.clone(),
        }
    }

    pub fn check_voxel(&self, voxel: &VoxelGrid) -> Result<()> {
        let c = &voxel.config;
        if c.bins != self.config.bins || c.height != self.config.height || c.width != self.config.width {
            return Err(Error::Config(format!(
                "voxel grid {}x{}x{} does not match model input {}x{}x{}",
                c.bins, c.height, c.width, self.config.bins, self.config.height, self.config.width
            )));
        }
        Ok(())
    }

    /// Backbone features `I` as an `N × D2` node.
    pub fn backbone(&self, g: &mut Graph, voxel: &VoxelGrid) -> Result<Var> {
        self.check_voxel(voxel)?;
        let patches = patchify(voxel, self.config.patch);
        let x = g.constant(patches);
        Ok(backbone::forward(g, x, &self.config))
    }

    /// Fused features `Î`; identity when fusion is disabled.
    pub fn fuse(&self, g: &mut Graph, feats: Var, text: Option<Var>) -> Var {
        if !self.config.toggles.fusion {
            return feats;
        }
        let (h, w) = self.config.grid();
        fusion::forward(g, feats, text, h, w, &self.config)
    }

    pub fn decode(&self, g: &mut Graph, image: Var, prompt: &Prompt) -> decoder::DecoderVars {
        decoder::forward(g, image, prompt, &self.config)
    }

    /// Mask-level head for `K` masks: RoI pooling of `fused`, spatial encoding
    /// with the `K × D` tokens `tokens`, and the mask feature enhancer.
    pub fn head(&self, g: &mut Graph, fused: Var, tokens: Var, masks: &[BinaryMask]) -> Result<HeadVars> {
        head::forward(g, fused, tokens, masks, &self.config)
    }

    /// Text tokens for the fusion cross-attention, one row per string.
    pub fn text_tokens(&self, g: &mut Graph, encoder: &dyn TextEncoder, texts: &[String]) -> Option<Var> {
        if texts.is_empty() {
            return None;
        }
        let rows: Vec<f64> = texts.iter().flat_map(|t| encoder.encode(t)).collect();
        Some(g.constant(Mat::from_vec(texts.len(), self.config.d, rows)))
    }

    /// Runs backbone, fusion and decoder for a set of prompts, then pools each
    /// predicted mask and returns its features.
    pub fn infer(
        &self,
        voxel: &VoxelGrid,
        text: Option<&Mat>,
        prompts: &[Prompt],
    ) -> Result<Vec<(MaskPrediction, MaskFeatureBundle)>> {
        for p in prompts {
            p.validate(self.config.height, self.config.width)?;
        }
        let mut g = Graph::new(&self.params);
        let feats = self.backbone(&mut g, voxel)?;
        let text = text.map(|t| g.constant(t.clone()));
        let fused = self.fuse(&mut g, feats, text);
        let mut preds = Vec::new();
        for (i, p) in prompts.iter().enumerate() {
            let out = self.decode(&mut g, feats, p);
            preds.extend(decoder::predictions(&g, &out, i, p, &self.config));
        }
        if preds.is_empty() {
            return Ok(Vec::new());
        }
        let tokens = Mat::from_vec(
            preds.len(),
            self.config.d,
            preds.iter().flat_map(|p| p.token.iter().copied()).collect(),
        );
        let tokens_v = g.constant(tokens);
        let masks: Vec<BinaryMask> = preds.iter().map(|p| p.mask.clone()).collect();
        let hv = self.head(&mut g, fused, tokens_v, &masks)?;
        let (s, m, mh) = (g.value(hv.s), g.value(hv.m), g.value(hv.m_hat));
        Ok(preds
            .into_iter()
            .enumerate()
            .map(|(k, p)| {
                let bundle = MaskFeatureBundle {
                    s: s.row(k).to_vec(),
                    dead: hv.dead[k],
                    g: p.token.clone(),
                    m: m.row(k).to_vec(),
                    m_hat: mh.row(k).to_vec(),
                };
                (p, bundle)
            })
            .collect())
    }
}
