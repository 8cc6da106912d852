//! Patch-transformer event backbone.

use super::layers::{attention, layer_norm, linear, mlp, Graph};
use super::{FeatureMap, ModelConfig, SealModel};
use crate::autograd::Var;
use crate::events::VoxelGrid;
use crate::tensor::Mat;
use crate::Result;

/// Flattens non-overlapping `patch × patch` tiles into rows of `bins · patch²`
/// values, tiles in row-major order.
pub fn patchify(voxel: &VoxelGrid, patch: usize) -> Mat {
    let c = &voxel.config;
    let (gh, gw) = (c.height / patch, c.width / patch);
    let cols = c.bins * patch * patch;
    let mut m = Mat::zeros(gh * gw, cols);
    for ty in 0..gh {
        for tx in 0..gw {
            let row = m.row_mut(ty * gw + tx);
            let mut k = 0;
            for b in 0..c.bins {
                for dy in 0..patch {
                    for dx in 0..patch {
                        row[k] = voxel.get(b, ty * patch + dy, tx * patch + dx) as f64;
                        k += 1;
                    }
                }
            }
        }
    }
    m
}

pub(crate) fn forward(g: &mut Graph, patches: Var, cfg: &ModelConfig) -> Var {
    let x = linear(g, patches, "backbone.patch");
    let pos = g.param("backbone.pos");
    let mut x = g.tape.add(x, pos);
    for b in 0..cfg.backbone_depth {
        let p = format!("backbone.block{b}");
        let h = layer_norm(g, x, &format!("{p}.norm1"));
        let a = attention(g, h, h, h, &format!("{p}.attn"), cfg.heads, None);
        x = g.tape.add(x, a);
        let h = layer_norm(g, x, &format!("{p}.norm2"));
        let f = mlp(g, h, &format!("{p}.mlp"));
        x = g.tape.add(x, f);
    }
    layer_norm(g, x, "backbone.norm")
}

pub fn encode_backbone(model: &SealModel, voxel: &VoxelGrid) -> Result<FeatureMap> {
    let mut g = Graph::new(&model.params);
    let v = model.backbone(&mut g, voxel)?;
    let (h, w) = model.config.grid();
    Ok(FeatureMap::new(h, w, g.value(v).clone()))
}
