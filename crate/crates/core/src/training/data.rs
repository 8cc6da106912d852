//! Training manifest and in-memory frames.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::events::{load_events, voxelize_at, EventFormat, VoxelConfig, VoxelGrid};
use crate::guidance::{load_guidance, HierGuidance, PixelFeatureProvider, TextEncoder, TextEncoderSpec};
use crate::{Error, Result};

/// One event-image pair. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame_id: String,
    pub events: PathBuf,
    #[serde(default)]
    pub image: Option<PathBuf>,
    pub guidance: PathBuf,
    /// Window start in microseconds; defaults to the first event.
    #[serde(default)]
    pub t_start: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct FrameData {
    pub frame_id: String,
    pub voxel: VoxelGrid,
    pub image: Option<RgbImage>,
    pub guidance: HierGuidance,
}

pub struct TrainData {
    pub frames: Vec<FrameData>,
    /// Dense teacher for stage 1.
    pub teacher: Option<Arc<dyn PixelFeatureProvider>>,
    /// Encodes captions into fusion text tokens.
    pub text: Arc<dyn TextEncoder>,
    /// Stored in the checkpoint so serving reproduces the text space.
    pub text_spec: Option<TextEncoderSpec>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads and voxelizes every manifest frame with its guidance.
pub fn load_frames(manifest: &Manifest, base: &Path, voxel: VoxelConfig) -> Result<Vec<FrameData>> {
    manifest
        .frames
        .iter()
        .map(|e| {
            let ev_path = resolve(base, &e.events);
            let geometry = Some((voxel.width as u16, voxel.height as u16));
            let stream = load_events(&ev_path, EventFormat::from_path(&ev_path), geometry)?;
            let t0 = e.t_start.or_else(|| stream.ts.first().copied()).unwrap_or(0);
            let grid = voxelize_at(&stream, &voxel, t0)?;
            let gdir = resolve(base, &e.guidance);
            let guidance = load_guidance(&gdir, &e.frame_id)
                .map_err(|err| Error::Data(format!("missing guidance for frame {}: {err}", e.frame_id)))?;
            let image = match &e.image {
                Some(p) => {
                    let p = resolve(base, p);
                    Some(
                        image::open(&p)
                            .map_err(|err| Error::Data(format!("frame {}: image {}: {err}", e.frame_id, p.display())))?
                            .to_rgb8(),
                    )
                }
                None => None,
            };
            Ok(FrameData {
                frame_id: e.frame_id.clone(),
                voxel: grid,
                image,
                guidance,
            })
        })
        .collect()
}
