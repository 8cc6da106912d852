//! Subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use seal_core::benchmark::{
    count_params, evaluate_ap, export_mask_features, predict_frame, profile_roi_align, profile_to_csv,
    random_labels, write_sft1, BenchmarkManifest, PredictionsDoc, PromptKind,
};
use seal_core::events::{load_events, slice_window, voxelize_at, EventFormat, VoxelConfig, VoxelGrid, DEFAULT_BINS};
use seal_core::guidance::{
    build_guidance, save_guidance, BasisTextEncoder, BuildOptions, HierarchyLevel, MaskSet, TextEncoder,
};
use seal_core::mask::Rle;
use seal_core::model::{Checkpoint, ModelConfig, ModuleToggles, Prompt};
use seal_core::synth::{SynthConfig, SynthWorld};
use seal_core::training::{train, LossToggles, Manifest, ManifestEntry, TrainConfig, TrainData};

use crate::service::{serve, AppState, GranularityFilter, InferRequest, Session};

/// A flag combination the command cannot run with. Exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Debug, Parser)]
#[command(name = "seal", version, about = "Open-vocabulary event instance segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert an event window into a voxel grid.
    Voxelize(VoxelizeArgs),
    /// Generate a synthetic world: training manifest, guidance, benchmark and frame store.
    Synth(SynthArgs),
    /// Build visual and text guidance for one image and its three mask sets.
    BuildGuidance(BuildGuidanceArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Prompted evaluation on a benchmark manifest.
    Eval(EvalArgs),
    /// Segment and classify prompts on one voxel grid.
    Infer(InferArgs),
    /// Time mask pooling across resolutions; optionally print a parameter table.
    Profile(ProfileArgs),
    /// Dump enhanced mask features of every benchmark annotation.
    ExportFeatures(ExportArgs),
    /// Serve the HTTP inference API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct VoxelizeArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = 25.0)]
    pub window_ms: f64,
    /// Window start in microseconds; defaults to the first event.
    #[arg(long)]
    pub t_start: Option<u64>,
    /// Output grid width; defaults to the sensor width.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Sensor geometry for CSV input, as WIDTHxHEIGHT.
    #[arg(long)]
    pub sensor: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum LayoutArg {
    Tiled,
    Conflict,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = LayoutArg::Tiled)]
    pub layout: LayoutArg,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Training frames.
    #[arg(long, default_value_t = 64)]
    pub train: u64,
    /// Held-out benchmark frames.
    #[arg(long, default_value_t = 16)]
    pub held_out: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct BuildGuidanceArgs {
    /// World description written by `seal synth`; selects the teacher providers.
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// JSON object with `semantic`, `instance` and `part` lists of RLE masks.
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub frame_id: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Caption template, `{}` standing for the caption.
    #[arg(long)]
    pub template: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub stage: u8,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint to start from; required for stage 2.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// World description providing the teacher and text encoder.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Model configuration JSON; defaults to the desk configuration of the world.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 15_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 25.0)]
    pub window_ms: f64,
    /// Loss log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Guidance levels to train on, any of `s`, `i`, `p`.
    #[arg(long, default_value = "s,i,p", value_delimiter = ',')]
    pub levels: Vec<String>,
    #[arg(long)]
    pub no_visual_guidance: bool,
    #[arg(long)]
    pub no_text_guidance: bool,
    #[arg(long)]
    pub no_fusion: bool,
    #[arg(long)]
    pub no_se: bool,
    #[arg(long)]
    pub no_mfe: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint; the SEAL_CKPT environment variable takes precedence.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "box")]
    pub prompt: PromptKind,
    #[arg(long, default_value_t = 25.0)]
    pub window_ms: f64,
    /// Also write the report document here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the predictions document here.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Also score the same masks with uniformly random labels drawn with this seed.
    #[arg(long)]
    pub random_baseline: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub voxel: PathBuf,
    /// Point prompt `X,Y`; repeatable.
    #[arg(long)]
    pub point: Vec<String>,
    /// Box prompt `X_MIN,Y_MIN,X_MAX,Y_MAX`; repeatable.
    #[arg(long = "box")]
    pub boxes: Vec<String>,
    /// Text query; repeatable.
    #[arg(long = "query", required = true)]
    pub queries: Vec<String>,
    #[arg(long, default_value = "auto")]
    pub granularity: GranularityFilter,
    #[arg(long)]
    pub canonical: bool,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long, default_value = "32,64,128,256,512", value_delimiter = ',')]
    pub resolutions: Vec<usize>,
    #[arg(long, default_value = "1,10,100,1000", value_delimiter = ',')]
    pub masks: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    pub channels: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the parameter table of this checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "box")]
    pub prompt: PromptKind,
    #[arg(long, default_value_t = 25.0)]
    pub window_ms: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Directory of `.vox` grids; file stems are frame ids.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

/// `SEAL_CKPT` wins over `--ckpt`.
pub fn resolve_ckpt(flag: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    match std::env::var_os("SEAL_CKPT").filter(|v| !v.is_empty()) {
        Some(v) => Ok(PathBuf::from(v)),
        None => match flag {
            Some(p) => Ok(p.clone()),
            None => usage("no checkpoint given (--ckpt or SEAL_CKPT)"),
        },
    }
}

fn window_us(ms: f64) -> anyhow::Result<u64> {
    if !(ms > 0.0) || !ms.is_finite() {
        return usage(format!("--window-ms must be positive, got {ms}"));
    }
    Ok((ms * 1000.0).round() as u64)
}

fn parse_numbers<const N: usize>(s: &str, what: &str) -> anyhow::Result<[usize; N]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return usage(format!("{what} needs {N} comma-separated integers, got '{s}'"));
    }
    let mut out = [0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = match p.parse() {
            Ok(v) => v,
            Err(_) => return usage(format!("{what}: '{p}' is not a non-negative integer")),
        };
    }
    Ok(out)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Voxelize(a) => voxelize_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::BuildGuidance(a) => build_guidance_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Profile(a) => profile_cmd(a),
        Command::ExportFeatures(a) => export_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn voxelize_cmd(a: VoxelizeArgs) -> anyhow::Result<()> {
    let window = window_us(a.window_ms)?;
    let geometry = match &a.sensor {
        Some(s) => {
            let (w, h) = s
                .split_once('x')
                .and_then(|(w, h)| Some((w.parse::<u16>().ok()?, h.parse::<u16>().ok()?)))
                .ok_or_else(|| UsageError(format!("--sensor must be WIDTHxHEIGHT, got '{s}'")))?;
            Some((w, h))
        }
        None => None,
    };
    let stream = load_events(&a.events, EventFormat::from_path(&a.events), geometry)?;
    let t0 = a.t_start.or_else(|| stream.ts.first().copied()).unwrap_or(0);
    let window_events = slice_window(&stream, t0, window);
    let cfg = VoxelConfig::new(
        a.bins,
        window,
        a.height.unwrap_or(stream.height as usize),
        a.width.unwrap_or(stream.width as usize),
    )?;
    let grid = voxelize_at(&window_events, &cfg, t0)?;
    grid.save(&a.out)?;
    println!(
        "{} events -> {}x{}x{} grid, sum {:.3}",
        window_events.len(),
        cfg.bins,
        cfg.height,
        cfg.width,
        grid.sum()
    );
    Ok(())
}

/// Everything `train`/`build-guidance` need to rebuild the synthetic providers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldFile {
    pub config: SynthConfig,
    pub bins: usize,
}

fn load_world(path: &Path) -> anyhow::Result<WorldFile> {
    let raw = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&raw).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskSetsFile {
    semantic: Vec<Rle>,
    instance: Vec<Rle>,
    part: Vec<Rle>,
}

fn synth_cmd(a: SynthArgs) -> anyhow::Result<()> {
    let config = match a.layout {
        LayoutArg::Tiled => SynthConfig::tiled(a.size, a.dim, a.seed),
        LayoutArg::Conflict => SynthConfig::conflict(a.size, a.dim, a.seed),
    };
    let world = SynthWorld::new(config.clone()).map_err(|e| UsageError(e.to_string()))?;
    let dirs = ["train", "guidance", "bench", "frames"].map(|d| a.out.join(d));
    for d in &dirs {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let [train_dir, guidance_dir, bench_dir, frames_dir] = dirs;
    let world_file = WorldFile { config, bins: a.bins };
    fs::write(a.out.join("world.json"), serde_json::to_vec_pretty(&world_file)?)?;

    let providers = world.providers();
    let mut manifest = Manifest::default();
    for i in 0..a.train {
        let id = format!("train_{i:04}");
        let scene = world.scene(i, &id);
        scene.events.save(&train_dir.join(format!("{id}.evt")), EventFormat::Binary)?;
        scene.image.save(train_dir.join(format!("{id}.png")))?;
        let rles = |l: HierarchyLevel| scene.mask_set(l).to_rles();
        let masks = MaskSetsFile {
            semantic: rles(HierarchyLevel::Semantic),
            instance: rles(HierarchyLevel::Instance),
            part: rles(HierarchyLevel::Part),
        };
        fs::write(train_dir.join(format!("{id}.masks.json")), serde_json::to_vec(&masks)?)?;
        let g = build_guidance(&scene.image, &scene.mask_sets, &providers, &BuildOptions::default())?;
        save_guidance(&guidance_dir.join(&id), &g)?;
        manifest.frames.push(ManifestEntry {
            frame_id: id.clone(),
            events: PathBuf::from(format!("train/{id}.evt")),
            image: Some(PathBuf::from(format!("train/{id}.png"))),
            guidance: PathBuf::from(format!("guidance/{id}")),
            t_start: Some(scene.t_start),
        });
    }
    manifest.save(&a.out.join("train.json"))?;

    let scenes: Vec<_> = (0..a.held_out)
        .map(|i| world.scene(1_000_000 + i, &format!("test_{i:04}")))
        .collect();
    let mut bench = world.benchmark("synth", &scenes)?;
    for (scene, frame) in scenes.iter().zip(&mut bench.frames) {
        let name = format!("{}.evt", scene.frame_id);
        scene.events.save(&bench_dir.join(&name), EventFormat::Binary)?;
        frame.events = Some(Path::new("bench").join(name));
        world
            .frame_data(scene, a.bins)?
            .voxel
            .save(&frames_dir.join(format!("{}.vox", scene.frame_id)))?;
    }
    bench.save(&a.out.join("bench.json"))?;
    println!(
        "wrote {} training frames, {} benchmark frames ({} annotations) to {}",
        a.train,
        a.held_out,
        bench.annotation_count(),
        a.out.display()
    );
    Ok(())
}

fn build_guidance_cmd(a: BuildGuidanceArgs) -> anyhow::Result<()> {
    let wf = load_world(&a.world)?;
    let world = SynthWorld::new(wf.config)?;
    let image = image::open(&a.image)
        .with_context(|| format!("reading {}", a.image.display()))?
        .to_rgb8();
    let raw = fs::read(&a.masks).with_context(|| format!("reading {}", a.masks.display()))?;
    let m: MaskSetsFile = serde_json::from_slice(&raw).with_context(|| format!("parsing {}", a.masks.display()))?;
    let sets = vec![
        MaskSet::from_rles(HierarchyLevel::Semantic, &a.frame_id, &m.semantic)?,
        MaskSet::from_rles(HierarchyLevel::Instance, &a.frame_id, &m.instance)?,
        MaskSet::from_rles(HierarchyLevel::Part, &a.frame_id, &m.part)?,
    ];
    let opts = BuildOptions {
        text_template: a.template,
        coverage_threshold: None,
    };
    let g = build_guidance(&image, &sets, &world.providers(), &opts)?;
    save_guidance(&a.out, &g)?;
    let counts: Vec<String> = g.levels.iter().map(|l| l.len().to_string()).collect();
    println!("guidance for {}: {} masks (s/i/p)", a.frame_id, counts.join("/"));
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    if a.stage != 1 && a.stage != 2 {
        return usage(format!("--stage must be 1 or 2, got {}", a.stage));
    }
    if a.stage == 2 && a.init.is_none() {
        return usage("stage 2 requires --init <stage-1 checkpoint>");
    }
    let Some(manifest_path) = a.manifest.clone() else {
        return usage("--manifest is required");
    };
    let Some(out) = a.out.clone() else {
        return usage("--out is required");
    };
    let mut levels = [false; 3];
    for l in &a.levels {
        match HierarchyLevel::from_tag(l.trim()) {
            Some(level) => levels[level.index()] = true,
            None => return usage(format!("unknown level '{l}' (use s, i, p)")),
        }
    }
    let init = a.init.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
    let world = a.world.as_ref().map(|p| load_world(p)).transpose()?;
    let model_cfg = match (&a.model_config, &init, &world) {
        (Some(p), _, _) => serde_json::from_slice(&fs::read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        (None, Some(ck), _) => ck.config.clone(),
        (None, None, Some(w)) => {
            let mut c = ModelConfig::desk(w.config.size, w.config.dim);
            c.bins = w.bins;
            c
        }
        (None, None, None) => return usage("stage 1 needs --world or --model-config"),
    };
    let window = match &world {
        Some(w) => w.config.window_us,
        None => window_us(a.window_ms)?,
    };
    let (text, text_spec, teacher): (std::sync::Arc<dyn TextEncoder>, _, _) = match (&world, &init) {
        (Some(w), _) => {
            let sw = SynthWorld::new(w.config.clone())?;
            (sw.text.clone(), Some(w.config.text_spec()), Some(sw.providers().pixel))
        }
        (None, Some(ck)) => match &ck.meta.text_encoder {
            Some(spec) => (std::sync::Arc::new(BasisTextEncoder::new(spec.clone())?), Some(spec.clone()), None),
            None => return usage("--init checkpoint has no text encoder; pass --world"),
        },
        (None, None) => return usage("--world is required to build the teacher"),
    };
    let manifest = Manifest::load(&manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let vcfg = VoxelConfig::new(model_cfg.bins, window, model_cfg.height, model_cfg.width)?;
    let frames = seal_core::training::load_frames(&manifest, base, vcfg)?;
    let data = TrainData {
        frames,
        teacher,
        text,
        text_spec,
    };
    let cfg = TrainConfig {
        stage: a.stage,
        iterations: a.iterations,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        loss: LossToggles {
            visual: !a.no_visual_guidance,
            text: !a.no_text_guidance,
            levels,
        },
        modules: Some(ModuleToggles {
            fusion: !a.no_fusion,
            se: !a.no_se,
            mfe: !a.no_mfe,
        }),
        ..Default::default()
    };
    let (ckpt, mut log) = train(init.as_ref(), &model_cfg, &data, &cfg)?;
    ckpt.save(&out)?;
    log.checkpoint = Some(out.display().to_string());
    let log_path = a.log.unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", out.display())));
    fs::write(&log_path, log.to_jsonl()).with_context(|| format!("writing {}", log_path.display()))?;
    let n = log.entries.len();
    println!(
        "stage {} done: {} iterations, loss {:.4} -> {:.4}, {} dead features; checkpoint {}",
        a.stage,
        n,
        log.mean_loss(0, 10.min(n)),
        log.mean_loss(n.saturating_sub(10), n),
        log.dead_features,
        out.display()
    );
    Ok(())
}

/// Voxelizes every benchmark frame from its event file.
pub fn load_bench_voxels(
    manifest: &BenchmarkManifest,
    base: &Path,
    cfg: &ModelConfig,
    window: u64,
) -> anyhow::Result<Vec<VoxelGrid>> {
    let vcfg = VoxelConfig::new(cfg.bins, window, cfg.height, cfg.width)?;
    manifest
        .frames
        .iter()
        .map(|f| {
            let rel = f
                .events
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("frame {} has no event file", f.frame_id))?;
            let path = if rel.is_absolute() { rel.clone() } else { base.join(rel) };
            let stream = load_events(&path, EventFormat::from_path(&path), Some((cfg.width as u16, cfg.height as u16)))?;
            let t0 = f.t_start.or_else(|| stream.ts.first().copied()).unwrap_or(0);
            Ok(voxelize_at(&slice_window(&stream, t0, window), &vcfg, t0)?)
        })
        .collect()
}

struct Loaded {
    ckpt: Checkpoint,
    encoder: BasisTextEncoder,
}

fn load_ckpt(flag: &Option<PathBuf>) -> anyhow::Result<Loaded> {
    let path = resolve_ckpt(flag)?;
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let spec = ckpt
        .meta
        .text_encoder
        .clone()
        .ok_or_else(|| anyhow::anyhow!("{} carries no text encoder description", path.display()))?;
    Ok(Loaded {
        encoder: BasisTextEncoder::new(spec)?,
        ckpt,
    })
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let l = load_ckpt(&a.ckpt)?;
    let manifest = BenchmarkManifest::load(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let model = seal_core::model::SealModel::from_checkpoint(&l.ckpt);
    let voxels = load_bench_voxels(&manifest, base, &model.config, window_us(a.window_ms)?)?;
    let queries: Vec<(String, Vec<f64>)> = manifest
        .query_classes()
        .into_iter()
        .map(|c| {
            let v = l.encoder.encode(&c);
            (c, v)
        })
        .collect();
    let mut preds = Vec::with_capacity(voxels.len());
    for (frame, voxel) in manifest.frames.iter().zip(&voxels) {
        let gt: Vec<_> = frame
            .annotations
            .iter()
            .map(|a| a.mask.decode())
            .collect::<seal_core::Result<_>>()?;
        preds.push(predict_frame(&model, &frame.frame_id, voxel, &gt, a.prompt, &queries)?);
    }
    let report = evaluate_ap(&preds, &manifest, a.prompt.as_str())?;
    println!("{}", report.table());
    if let Some(seed) = a.random_baseline {
        let rnd = evaluate_ap(&random_labels(&preds, &manifest.query_classes(), seed), &manifest, "random")?;
        println!("random-label baseline: AP {:.4} AP50 {:.4} AP25 {:.4}", rnd.ap, rnd.ap50, rnd.ap25);
    }
    let doc = serde_json::to_string_pretty(&report)?;
    println!("{doc}");
    if let Some(p) = &a.out {
        fs::write(p, &doc).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.predictions {
        let d = PredictionsDoc::from_predictions(&preds);
        fs::write(p, serde_json::to_vec_pretty(&d)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn infer_cmd(a: InferArgs) -> anyhow::Result<()> {
    let path = resolve_ckpt(&a.ckpt)?;
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let mut prompts = Vec::new();
    for p in &a.point {
        let [x, y] = parse_numbers::<2>(p, "--point")?;
        prompts.push(Prompt::Point { x, y });
    }
    for b in &a.boxes {
        let [x_min, y_min, x_max, y_max] = parse_numbers::<4>(b, "--box")?;
        prompts.push(Prompt::Box {
            x_min,
            y_min,
            x_max,
            y_max,
        });
    }
    if prompts.is_empty() {
        return usage("give at least one --point or --box");
    }
    let id = a
        .voxel
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("frame")
        .to_string();
    let frames = BTreeMap::from([(id.clone(), VoxelGrid::load(&a.voxel)?)]);
    let session = Session::new(&ckpt, frames)?;
    let req = InferRequest {
        frame_id: id,
        prompts,
        queries: a.queries,
        granularity: a.granularity,
        canonical: a.canonical,
    };
    let resp = session.handle_infer(&req).map_err(|e| match e {
        crate::service::ServiceError::Invalid(m) => anyhow::Error::new(UsageError(m)),
        other => anyhow::Error::new(other),
    })?;
    println!("{}", serde_json::to_string_pretty(&resp)?);
    Ok(())
}

fn profile_cmd(a: ProfileArgs) -> anyhow::Result<()> {
    let rows = profile_roi_align(&a.resolutions, &a.masks, a.channels, a.repeats, a.seed)
        .map_err(|e| UsageError(e.to_string()))?;
    let csv = profile_to_csv(&rows);
    match &a.out {
        Some(p) => fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    if a.ckpt.is_some() || std::env::var_os("SEAL_CKPT").is_some() {
        let path = resolve_ckpt(&a.ckpt)?;
        let ckpt = Checkpoint::load(&path)?;
        print!("{}", count_params(&ckpt.params).render());
    }
    Ok(())
}

fn export_cmd(a: ExportArgs) -> anyhow::Result<()> {
    let l = load_ckpt(&a.ckpt)?;
    let manifest = BenchmarkManifest::load(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let model = seal_core::model::SealModel::from_checkpoint(&l.ckpt);
    let voxels = load_bench_voxels(&manifest, base, &model.config, window_us(a.window_ms)?)?;
    let queries: Vec<(String, Vec<f64>)> = manifest
        .query_classes()
        .into_iter()
        .map(|c| {
            let v = l.encoder.encode(&c);
            (c, v)
        })
        .collect();
    let rows = export_mask_features(&model, &manifest, &voxels, a.prompt, &queries)?;
    write_sft1(&a.out, &rows)?;
    let dead = rows.iter().filter(|r| r.dead).count();
    println!("{} feature rows ({dead} from dead masks) -> {}", rows.len(), a.out.display());
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> anyhow::Result<()> {
    let path = resolve_ckpt(&a.ckpt)?;
    let session = Session::load(&path, &a.frames)?;
    log::info!("{} frames loaded from {}", session.frame_ids().len(), a.frames.display());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve(AppState::new(session), &a.addr))
}

/// Exit status for a failed command: 2 for usage and validation problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<UsageError>() {
        return 2;
    }
    match err.downcast_ref::<seal_core::Error>() {
        Some(seal_core::Error::Validation(_) | seal_core::Error::Config(_) | seal_core::Error::Precondition(_)) => 2,
        _ => 1,
    }
}
