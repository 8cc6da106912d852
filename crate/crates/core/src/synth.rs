//! Deterministic synthetic scenes for desk-scale training and evaluation.
//!
//! A [`SynthWorld`] fixes the class table, palette and teacher providers; each
//! call to [`SynthWorld::scene`] draws one frame: an RGB image painted with
//! class colours, a semantic map, three mask sets (semantic, instance, part)
//! and an event stream whose per-pixel temporal signature depends on the class.
//!
//! The teacher providers only look at the image. Pixel features are the class
//! basis vector of each pixel's colour plus per-cell Gaussian noise, and the
//! basis vectors coincide with the text encoder's vocabulary directions so the
//! visual and text teachers share one space.

use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::benchmark::{assign_labels, BenchFrame, BenchmarkManifest, DEFAULT_MIN_OVERLAP};
use crate::events::{voxelize_at, EventStream, VoxelConfig, DSEC_WINDOW_US};
use crate::guidance::{
    build_guidance, fnv1a, BasisTextEncoder, BuildOptions, CaptionProvider, FeatureGrid, HierarchyLevel, MaskSet,
    PixelFeatureProvider, TeacherProviders, TextEncoder, TextEncoderSpec,
};
use crate::training::{FrameData, TrainData};
use crate::mask::BinaryMask;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SynthLayout {
    /// The frame is cut into `tiles × tiles` rectangles, each painted with one class.
    Tiled { tiles: usize },
    /// Small thin objects on a background. Class 1 objects are tall, class 2
    /// objects are wide; several objects share each low-resolution feature cell.
    Conflict { objects: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    /// Class table; index 0 is the background class.
    pub classes: Vec<String>,
    pub layout: SynthLayout,
    pub dim: usize,
    pub noise_sigma: f64,
    /// Pixel stride of the teacher feature map.
    pub feature_stride: usize,
    pub seed: u64,
    pub window_us: u64,
}

impl SynthConfig {
    pub fn tiled(size: usize, dim: usize, seed: u64) -> Self {
        Self {
            size,
            classes: vec!["road".into(), "car".into(), "tree".into(), "person".into()],
            layout: SynthLayout::Tiled { tiles: 4 },
            dim,
            noise_sigma: 0.1,
            feature_stride: 4,
            seed,
            window_us: DSEC_WINDOW_US,
        }
    }

    pub fn conflict(size: usize, dim: usize, seed: u64) -> Self {
        Self {
            size,
            classes: vec!["background".into(), "pole".into(), "sign".into()],
            layout: SynthLayout::Conflict { objects: 10 },
            dim,
            noise_sigma: 0.1,
            feature_stride: 4,
            seed,
            window_us: DSEC_WINDOW_US,
        }
    }

    pub fn text_spec(&self) -> TextEncoderSpec {
        TextEncoderSpec {
            seed: self.seed,
            dim: self.dim,
            vocabulary: self.classes.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("need a background class and at least one object class".into()));
        }
        if self.classes.len() > self.dim {
            return Err(Error::Config(format!(
                "{} classes do not fit orthogonally in {} dimensions",
                self.classes.len(),
                self.dim
            )));
        }
        if self.feature_stride == 0 || self.size % self.feature_stride != 0 {
            return Err(Error::Config("feature stride must divide the frame size".into()));
        }
        if let SynthLayout::Tiled { tiles } = self.layout {
            if tiles == 0 || self.size % tiles != 0 || self.size / tiles < 2 {
                return Err(Error::Config("tiles must divide the frame into cells of at least 2 px".into()));
            }
        }
        Ok(())
    }
}

const PALETTE: [[u8; 3]; 10] = [
    [60, 60, 60],
    [220, 40, 40],
    [40, 180, 60],
    [240, 200, 40],
    [40, 90, 220],
    [200, 60, 200],
    [40, 200, 200],
    [250, 130, 30],
    [130, 80, 30],
    [160, 160, 250],
];

pub fn class_color(k: usize) -> [u8; 3] {
    if k < PALETTE.len() {
        PALETTE[k]
    } else {
        let h = fnv1a(&(k as u64).to_le_bytes());
        [h as u8, (h >> 8) as u8, (h >> 16) as u8]
    }
}

fn nearest_class(px: &Rgb<u8>, n_classes: usize) -> usize {
    (0..n_classes)
        .min_by_key(|&k| {
            let c = class_color(k);
            (0..3).map(|i| (px[i] as i32 - c[i] as i32).pow(2)).sum::<i32>()
        })
        .unwrap_or(0)
}

/// `base(class of pixel colour) + N(0, σ²)` averaged per `stride × stride` cell.
pub struct PaletteFeatureProvider {
    bases: Vec<Vec<f64>>,
    sigma: f64,
    stride: usize,
    seed: u64,
}

impl PixelFeatureProvider for PaletteFeatureProvider {
    fn features(&self, image: &RgbImage) -> std::result::Result<FeatureGrid, String> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        if w % self.stride != 0 || h % self.stride != 0 {
            return Err(format!("image {w}x{h} not divisible by stride {}", self.stride));
        }
        let dim = self.bases[0].len();
        let (h2, w2) = (h / self.stride, w / self.stride);
        let mut grid = FeatureGrid::zeros(dim, h2, w2);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(image.as_raw()));
        let normal = Normal::new(0.0, self.sigma.max(0.0)).map_err(|e| e.to_string())?;
        let per_cell = (self.stride * self.stride) as f64;
        for cy in 0..h2 {
            for cx in 0..w2 {
                let mut counts = vec![0usize; self.bases.len()];
                for y in cy * self.stride..(cy + 1) * self.stride {
                    for x in cx * self.stride..(cx + 1) * self.stride {
                        counts[nearest_class(image.get_pixel(x as u32, y as u32), self.bases.len())] += 1;
                    }
                }
                let cell = grid.cell_mut(cy, cx);
                for (k, &n) in counts.iter().enumerate() {
                    if n == 0 {
                        continue;
                    }
                    if n as f64 == per_cell {
                        cell.copy_from_slice(&self.bases[k]);
                    } else {
                        let f = n as f64 / per_cell;
                        for (c, b) in cell.iter_mut().zip(&self.bases[k]) {
                            *c += f * b;
                        }
                    }
                }
                if self.sigma > 0.0 {
                    for c in cell.iter_mut() {
                        *c += normal.sample(&mut rng);
                    }
                }
            }
        }
        Ok(grid)
    }
}

/// Names the majority class under the mask; the long caption adds position and size words.
pub struct PaletteCaptionProvider {
    classes: Vec<String>,
}

impl CaptionProvider for PaletteCaptionProvider {
    fn caption(&self, image: &RgbImage, mask: &BinaryMask) -> std::result::Result<(String, String), String> {
        let mut counts = vec![0usize; self.classes.len()];
        let (mut sx, mut sy, mut n) = (0usize, 0usize, 0usize);
        for (x, y) in mask.pixels() {
            counts[nearest_class(image.get_pixel(x as u32, y as u32), self.classes.len())] += 1;
            sx += x;
            sy += y;
            n += 1;
        }
        if n == 0 {
            return Err("empty mask".into());
        }
        let k = (0..counts.len()).max_by_key(|&k| (counts[k], usize::MAX - k)).unwrap();
        let name = &self.classes[k];
        let vertical = if sy / n < mask.height / 2 { "upper" } else { "lower" };
        let horizontal = if sx / n < mask.width / 2 { "left" } else { "right" };
        let size = if n * 16 < mask.height * mask.width { "small" } else { "large" };
        Ok((name.clone(), format!("a {size} {name} in the {vertical} {horizontal} part of the view")))
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub frame_id: String,
    pub image: RgbImage,
    /// Row-major class index per pixel.
    pub semantic: Vec<usize>,
    /// Semantic, instance and part mask sets, in that order.
    pub mask_sets: Vec<MaskSet>,
    pub events: EventStream,
    pub t_start: u64,
}

impl SynthScene {
    pub fn mask_set(&self, level: HierarchyLevel) -> &MaskSet {
        &self.mask_sets[level.index()]
    }
}

pub struct SynthWorld {
    pub config: SynthConfig,
    pub text: Arc<BasisTextEncoder>,
    bases: Vec<Vec<f64>>,
}

/// Per-class temporal signature: `(phase in [0, 1), polarity)` of each event a pixel emits.
fn class_signature(k: usize) -> Vec<(f64, i8)> {
    if k == 0 {
        return Vec::new();
    }
    let phase = ((k - 1) as f64 * 0.3) % 0.9;
    let pol: i8 = if k % 2 == 1 { 1 } else { -1 };
    let mut sig = vec![(phase, pol), (phase + 0.08, pol)];
    if k % 3 == 0 {
        sig.push(((phase + 0.5) % 0.95, -pol));
    }
    sig
}

struct Layout {
    semantic: Vec<usize>,
    /// `(class, instance mask, part masks)`
    objects: Vec<(usize, BinaryMask, Vec<BinaryMask>)>,
}

impl SynthWorld {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let text = Arc::new(BasisTextEncoder::new(config.text_spec())?);
        let bases = config.classes.iter().map(|c| text.encode(c)).collect();
        Ok(Self { config, text, bases })
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.config.classes.iter().position(|c| c == name)
    }

    pub fn base_vector(&self, k: usize) -> &[f64] {
        &self.bases[k]
    }

    pub fn providers(&self) -> TeacherProviders {
        TeacherProviders {
            pixel: Arc::new(PaletteFeatureProvider {
                bases: self.bases.clone(),
                sigma: self.config.noise_sigma,
                stride: self.config.feature_stride,
                seed: self.config.seed,
            }),
            caption: Arc::new(PaletteCaptionProvider {
                classes: self.config.classes.clone(),
            }),
            text: self.text.clone() as Arc<dyn TextEncoder>,
        }
    }

    fn tiled(&self, rng: &mut ChaCha8Rng, tiles: usize) -> Layout {
        let s = self.config.size;
        let t = s / tiles;
        let n_cls = self.config.classes.len();
        let mut semantic = vec![0usize; s * s];
        let mut objects = Vec::new();
        for ty in 0..tiles {
            for tx in 0..tiles {
                let k = if rng.random_bool(0.25) { 0 } else { rng.random_range(1..n_cls) };
                for y in ty * t..(ty + 1) * t {
                    for x in tx * t..(tx + 1) * t {
                        semantic[y * s + x] = k;
                    }
                }
                if k == 0 {
                    continue;
                }
                let inside = move |x: usize, y: usize| x >= tx * t && x < (tx + 1) * t && y >= ty * t && y < (ty + 1) * t;
                let mid = ty * t + t / 2;
                let inst = BinaryMask::from_fn(s, s, inside);
                let top = BinaryMask::from_fn(s, s, move |x, y| inside(x, y) && y < mid);
                let bottom = BinaryMask::from_fn(s, s, move |x, y| inside(x, y) && y >= mid);
                objects.push((k, inst, vec![top, bottom]));
            }
        }
        Layout { semantic, objects }
    }

    fn conflict(&self, rng: &mut ChaCha8Rng, count: usize) -> Layout {
        let s = self.config.size;
        let mut semantic = vec![0usize; s * s];
        let mut occupied = vec![false; s * s];
        let mut objects = Vec::new();
        let mut attempts = 0;
        while objects.len() < count && attempts < count * 200 {
            attempts += 1;
            let k = 1 + objects.len() % 2;
            let long = rng.random_range(5..=7usize);
            let (w, h) = if k == 1 { (2, long) } else { (long, 2) };
            if w + 2 > s || h + 2 > s {
                break;
            }
            let x0 = rng.random_range(1..s - w);
            let y0 = rng.random_range(1..s - h);
            let clear = (y0 - 1..=y0 + h).all(|y| (x0 - 1..=x0 + w).all(|x| !occupied[y * s + x]));
            if !clear {
                continue;
            }
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    occupied[y * s + x] = true;
                    semantic[y * s + x] = k;
                }
            }
            let inside = move |x: usize, y: usize| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h;
            let inst = BinaryMask::from_fn(s, s, inside);
            let parts = if k == 1 {
                let mid = y0 + h / 2;
                vec![
                    BinaryMask::from_fn(s, s, move |x, y| inside(x, y) && y < mid),
                    BinaryMask::from_fn(s, s, move |x, y| inside(x, y) && y >= mid),
                ]
            } else {
                let mid = x0 + w / 2;
                vec![
                    BinaryMask::from_fn(s, s, move |x, y| inside(x, y) && x < mid),
                    BinaryMask::from_fn(s, s, move |x, y| inside(x, y) && x >= mid),
                ]
            };
            objects.push((k, inst, parts));
        }
        Layout { semantic, objects }
    }

    /// Draws one frame. Identical `(seed, frame_id)` give identical scenes.
    pub fn scene(&self, seed: u64, frame_id: &str) -> SynthScene {
        let s = self.config.size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(31).wrapping_add(seed));
        let layout = match self.config.layout {
            SynthLayout::Tiled { tiles } => self.tiled(&mut rng, tiles),
            SynthLayout::Conflict { objects } => self.conflict(&mut rng, objects),
        };
        let n_cls = self.config.classes.len();

        let mut image = RgbImage::new(s as u32, s as u32);
        for y in 0..s {
            for x in 0..s {
                image.put_pixel(x as u32, y as u32, Rgb(class_color(layout.semantic[y * s + x])));
            }
        }

        let class_mask = |k: usize| BinaryMask::from_fn(s, s, |x, y| layout.semantic[y * s + x] == k);
        let background = class_mask(0);
        let mut semantic_masks: Vec<BinaryMask> = (0..n_cls).map(class_mask).filter(|m| !m.is_empty()).collect();
        if semantic_masks.is_empty() {
            semantic_masks.push(background.clone());
        }
        let mut instance_masks: Vec<BinaryMask> = layout.objects.iter().map(|o| o.1.clone()).collect();
        let mut part_masks: Vec<BinaryMask> = layout.objects.iter().flat_map(|o| o.2.clone()).collect();
        if !background.is_empty() {
            instance_masks.push(background.clone());
            part_masks.push(background);
        }
        let mask_sets = vec![
            MaskSet {
                level: HierarchyLevel::Semantic,
                masks: semantic_masks,
                frame_id: frame_id.into(),
            },
            MaskSet {
                level: HierarchyLevel::Instance,
                masks: instance_masks,
                frame_id: frame_id.into(),
            },
            MaskSet {
                level: HierarchyLevel::Part,
                masks: part_masks,
                frame_id: frame_id.into(),
            },
        ];

        let window = self.config.window_us;
        let t_start = seed.wrapping_mul(window) % 1_000_000_000;
        let mut events = EventStream::empty(s as u16, s as u16);
        let jitter = (window as f64 * 0.01).max(1.0);
        for y in 0..s {
            for x in 0..s {
                let k = layout.semantic[y * s + x];
                if k == 0 {
                    if rng.random_bool(0.03) {
                        let t = t_start + rng.random_range(0..window);
                        let p = if rng.random_bool(0.5) { 1 } else { -1 };
                        events.push(x as u16, y as u16, t, p);
                    }
                    continue;
                }
                for (phase, pol) in class_signature(k) {
                    if !rng.random_bool(0.9) {
                        continue;
                    }
                    let base = phase * window as f64 + rng.random_range(-jitter..jitter);
                    let t = base.clamp(0.0, (window - 1) as f64) as u64;
                    events.push(x as u16, y as u16, t_start + t, pol);
                }
            }
        }
        events.sort_by_time();

        SynthScene {
            frame_id: frame_id.into(),
            image,
            semantic: layout.semantic,
            mask_sets,
            events,
            t_start,
        }
    }
}

/// One synthetic frame plus its teacher providers.
pub fn synth_guidance(seed: u64, cfg: &SynthConfig) -> Result<(RgbImage, Vec<MaskSet>, TeacherProviders)> {
    let world = SynthWorld::new(cfg.clone())?;
    let scene = world.scene(seed, &format!("synth_{seed}"));
    Ok((scene.image, scene.mask_sets, world.providers()))
}

impl SynthWorld {
    pub fn voxel_config(&self, bins: usize) -> Result<VoxelConfig> {
        VoxelConfig::new(bins, self.config.window_us, self.config.size, self.config.size)
    }

    /// Voxelized events, image and teacher guidance of one scene, ready for training.
    pub fn frame_data(&self, scene: &SynthScene, bins: usize) -> Result<FrameData> {
        let voxel = voxelize_at(&scene.events, &self.voxel_config(bins)?, scene.t_start)?;
        let guidance = build_guidance(&scene.image, &scene.mask_sets, &self.providers(), &BuildOptions::default())?;
        Ok(FrameData {
            frame_id: scene.frame_id.clone(),
            voxel,
            image: Some(scene.image.clone()),
            guidance,
        })
    }

    /// Instance annotations of one scene, labelled by majority class with the
    /// background class excluded.
    pub fn bench_frame(&self, scene: &SynthScene) -> Result<BenchFrame> {
        let annotations = assign_labels(
            scene.mask_set(HierarchyLevel::Instance),
            &scene.semantic,
            &self.config.classes,
            &self.config.classes[..1],
            DEFAULT_MIN_OVERLAP,
        )?;
        Ok(BenchFrame {
            frame_id: scene.frame_id.clone(),
            events: None,
            t_start: Some(scene.t_start),
            annotations,
        })
    }

    /// Benchmark manifest over the given scenes.
    pub fn benchmark(&self, name: &str, scenes: &[SynthScene]) -> Result<BenchmarkManifest> {
        Ok(BenchmarkManifest {
            name: name.into(),
            classes: self.config.classes.clone(),
            exclude: self.config.classes[..1].to_vec(),
            frames: scenes.iter().map(|s| self.bench_frame(s)).collect::<Result<_>>()?,
        })
    }

    /// Training data over the given scenes with this world's teacher and text encoder.
    pub fn train_data(&self, scenes: &[SynthScene], bins: usize) -> Result<TrainData> {
        Ok(TrainData {
            frames: scenes.iter().map(|s| self.frame_data(s, bins)).collect::<Result<_>>()?,
            teacher: Some(self.providers().pixel),
            text: self.text.clone(),
            text_spec: Some(self.config.text_spec()),
        })
    }

    /// Class queries `(name, embedding)` for everything but the background.
    pub fn queries(&self) -> Vec<(String, Vec<f64>)> {
        self.config.classes[1..]
            .iter()
            .map(|c| (c.clone(), self.text.encode(c)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{build_guidance, validate_mask_set, BuildOptions};
    use crate::tensor::cosine;

    fn cfg(sigma: f64) -> SynthConfig {
        let mut c = SynthConfig::tiled(32, 16, 5);
        c.noise_sigma = sigma;
        c
    }

    #[test]
    fn same_seed_same_outputs() {
        let c = cfg(0.1);
        let (img_a, ms_a, prov_a) = synth_guidance(7, &c).unwrap();
        let (img_b, ms_b, prov_b) = synth_guidance(7, &c).unwrap();
        assert_eq!(img_a, img_b);
        assert_eq!(ms_a, ms_b);
        assert_eq!(prov_a.pixel.features(&img_a).unwrap(), prov_b.pixel.features(&img_b).unwrap());
    }

    #[test]
    fn mask_sets_cover_frame() {
        for layout in [SynthConfig::tiled(32, 16, 1), SynthConfig::conflict(32, 16, 1)] {
            let world = SynthWorld::new(layout).unwrap();
            let scene = world.scene(3, "f");
            for ms in &scene.mask_sets {
                let r = validate_mask_set(ms, 32, 32).unwrap();
                assert!(r.valid, "{:?} {:?}", ms.level, r);
                assert_eq!(r.overlap_pixels, 0);
            }
            scene.events.validate().unwrap();
        }
    }

    #[test]
    fn noiseless_class_features_are_identical_and_orthogonal() {
        let c = cfg(0.0);
        let (img, ms, prov) = synth_guidance(11, &c).unwrap();
        let g = build_guidance(&img, &ms, &prov, &BuildOptions::default()).unwrap();
        let world = SynthWorld::new(c.clone()).unwrap();
        let inst = g.level(HierarchyLevel::Instance);
        let mut by_class: Vec<Vec<&Vec<f64>>> = vec![Vec::new(); c.classes.len()];
        for r in &inst.records {
            let k = world.class_index(&r.caption_short).unwrap();
            by_class[k].push(&r.visual);
        }
        for feats in &by_class {
            for f in feats {
                let var: f64 = f.iter().zip(feats[0].iter()).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(var < 1e-24);
            }
        }
        assert!(cosine(world.base_vector(0), world.base_vector(1)).abs() < 0.1);
    }

    #[test]
    fn too_many_classes_rejected() {
        let mut c = cfg(0.0);
        c.dim = 2;
        assert!(matches!(SynthWorld::new(c), Err(Error::Config(_))));
    }

    #[test]
    fn conflict_objects_share_feature_cells_and_are_small() {
        let world = SynthWorld::new(SynthConfig::conflict(64, 16, 2)).unwrap();
        let scene = world.scene(1, "f");
        let inst = scene.mask_set(HierarchyLevel::Instance);
        assert!(inst.len() >= 8);
        for m in &inst.masks[..inst.len() - 1] {
            assert!(m.area() <= 14);
        }
    }
}
