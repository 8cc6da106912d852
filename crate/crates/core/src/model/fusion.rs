//! Language fusion over backbone features: per layer, windowed self-attention
//! (global in the last layer), cross-attention to text tokens and a
//! feed-forward block, each pre-normalized with a residual connection.

use super::layers::{attention, layer_norm, mlp, window_allow, Graph};
use super::{FeatureMap, ModelConfig, SealModel};
use crate::autograd::Var;
use crate::tensor::Mat;

/// Self-attention restricted to `window × window` blocks of the `h × w` token grid.
pub fn windowed_self_attention(
    g: &mut Graph,
    tokens: Var,
    h: usize,
    w: usize,
    window: usize,
    prefix: &str,
    heads: usize,
) -> Var {
    if window >= h.max(w) {
        return attention(g, tokens, tokens, tokens, prefix, heads, None);
    }
    let allow = window_allow(h, w, window);
    attention(g, tokens, tokens, tokens, prefix, heads, Some(&allow))
}

/// Cross-attention from `queries` to `keys_values`; `allow` is row-major
/// `queries × keys` and may be `None` for unmasked attention.
pub fn masked_cross_attention(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    allow: Option<&[bool]>,
    prefix: &str,
    heads: usize,
) -> Var {
    attention(g, queries, keys_values, keys_values, prefix, heads, allow)
}

pub(crate) fn forward(g: &mut Graph, feats: Var, text: Option<Var>, h: usize, w: usize, cfg: &ModelConfig) -> Var {
    let mut x = feats;
    let text = text.filter(|t| g.value(*t).rows > 0);
    for l in 0..cfg.fusion_layers {
        let window = if l + 1 == cfg.fusion_layers { usize::MAX } else { cfg.window };
        let n = layer_norm(g, x, &format!("fusion.{l}.self.norm"));
        let a = windowed_self_attention(g, n, h, w, window, &format!("fusion.{l}.self.attn"), cfg.heads);
        x = g.tape.add(x, a);
        if let Some(t) = text {
            let n = layer_norm(g, x, &format!("fusion.{l}.cross.norm"));
            let c = masked_cross_attention(g, n, t, None, &format!("fusion.{l}.cross.attn"), cfg.heads);
            x = g.tape.add(x, c);
        }
        let n = layer_norm(g, x, &format!("fusion.{l}.ffn.norm"));
        let f = mlp(g, n, &format!("fusion.{l}.ffn.mlp"));
        x = g.tape.add(x, f);
    }
    x
}

/// Fuses a backbone feature map with `T × D` text tokens (`T` may be zero).
pub fn backbone_feature_enhancer(model: &SealModel, features: &FeatureMap, text: &Mat) -> FeatureMap {
    let mut g = Graph::new(&model.params);
    let f = g.constant(features.data.clone());
    let t = (text.rows > 0).then(|| g.constant(text.clone()));
    let out = forward(&mut g, f, t, features.height, features.width, &model.config);
    FeatureMap::new(features.height, features.width, g.value(out).clone())
}
