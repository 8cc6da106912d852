//! On-disk guidance layout, one directory per frame:
//!
//! ```text
//! masks_{s,i,p}.json     list of COCO-style RLE masks
//! vfeat_{s,i,p}.bin      rows of D little-endian f32 (visual features)
//! tfeat_{s,i,p}.bin      rows of D little-endian f32 (text features)
//! captions_{s,i,p}.json  list of {short, long}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GuidanceRecord, HierGuidance, HierarchyLevel, LevelGuidance, MaskSet};
use crate::mask::Rle;
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Caption {
    short: String,
    long: String,
}

fn write_rows(path: &Path, rows: &[&Vec<f64>]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in rows {
        for &v in r.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_rows(path: &Path, count: usize) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if count == 0 {
        return Ok(Vec::new());
    }
    if bytes.len() % (4 * count) != 0 {
        return Err(Error::Format(format!(
            "{}: {} bytes do not split into {count} f32 rows",
            path.display(),
            bytes.len()
        )));
    }
    let dim = bytes.len() / 4 / count;
    Ok(bytes
        .chunks_exact(4 * dim)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        })
        .collect())
}

pub fn save_guidance(dir: &Path, g: &HierGuidance) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for level in &g.levels {
        let tag = level.masks.level.tag();
        let masks = serde_json::to_vec(&level.masks.to_rles())?;
        let p = dir.join(format!("masks_{tag}.json"));
        fs::write(&p, masks).map_err(|e| Error::io(&p, e))?;
        write_rows(
            &dir.join(format!("vfeat_{tag}.bin")),
            &level.records.iter().map(|r| &r.visual).collect::<Vec<_>>(),
        )?;
        write_rows(
            &dir.join(format!("tfeat_{tag}.bin")),
            &level.records.iter().map(|r| &r.text).collect::<Vec<_>>(),
        )?;
        let caps: Vec<Caption> = level
            .records
            .iter()
            .map(|r| Caption {
                short: r.caption_short.clone(),
                long: r.caption_long.clone(),
            })
            .collect();
        let p = dir.join(format!("captions_{tag}.json"));
        fs::write(&p, serde_json::to_vec_pretty(&caps)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn load_guidance(dir: &Path, frame_id: &str) -> Result<HierGuidance> {
    let mut levels = Vec::with_capacity(3);
    for level in HierarchyLevel::ALL {
        let tag = level.tag();
        let p = dir.join(format!("masks_{tag}.json"));
        let raw = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let rles: Vec<Rle> = serde_json::from_slice(&raw)?;
        let masks = MaskSet::from_rles(level, frame_id, &rles)?;
        let visual = read_rows(&dir.join(format!("vfeat_{tag}.bin")), masks.len())?;
        let text = read_rows(&dir.join(format!("tfeat_{tag}.bin")), masks.len())?;
        let p = dir.join(format!("captions_{tag}.json"));
        let raw = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let caps: Vec<Caption> = serde_json::from_slice(&raw)?;
        if visual.len() != masks.len() || text.len() != masks.len() || caps.len() != masks.len() {
            return Err(Error::Format(format!(
                "{}: level {tag} has {} masks but {} visual rows, {} text rows, {} captions",
                dir.display(),
                masks.len(),
                visual.len(),
                text.len(),
                caps.len()
            )));
        }
        let records = visual
            .into_iter()
            .zip(text)
            .zip(caps)
            .enumerate()
            .map(|(k, ((v, t), c))| GuidanceRecord {
                mask_index: k,
                visual: v,
                text: t,
                caption_short: c.short,
                caption_long: c.long,
            })
            .collect();
        levels.push(LevelGuidance { masks, records });
    }
    let g = HierGuidance {
        frame_id: frame_id.to_string(),
        levels,
    };
    g.validate()?;
    Ok(g)
}
