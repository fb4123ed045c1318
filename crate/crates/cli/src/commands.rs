use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::Device;
use stylenerf_core::adain::{train_adain, AdainModel};
use stylenerf_core::data::checkpoint::{load_checkpoint, save_checkpoint, Stage};
use stylenerf_core::data::images::{load_image, ImageRgb};
use stylenerf_core::data::run::{RunConfig, RunDir, RunLock};
use stylenerf_core::data::scene::{load_scene, SceneDataset};
use stylenerf_core::data::synthetic::{default_styles, write_cube_scene, CubeSceneConfig};
use stylenerf_core::multistyle::{
    build_stylized_dataset, interpolate_styles, load_stylized_dataset, set_intensity, train_multistyle,
    MultiStyleModel, StyleSource, CONTENT_STYLE_ID,
};
use stylenerf_core::nerf::{evaluate_split, train_nerf, NerfModel};
use stylenerf_core::progress::Progress;
use stylenerf_core::rendering::{orbit_sweep, CameraPose};
use stylenerf_core::Error;
use stylenerf_service::{AppState, ServiceConfig};

use crate::args::*;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Loads `--config` (or defaults) and applies the run-level flags.
pub fn base_config(run: &RunArgs) -> Result<RunConfig> {
    let mut config = match &run.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(id) = &run.run_id {
        config.run_id = id.clone();
    }
    if run.runs_dir.is_some() {
        config.output_dir = run.runs_dir.clone();
    }
    Ok(config)
}

/// Validates the merged config, locks the run directory and archives the config.
fn begin(mut config: RunConfig, stage: Stage) -> Result<(RunConfig, RunDir, RunLock)> {
    config.stage = Some(stage);
    config.validate_for(stage)?;
    let dir = config.run_dir();
    let lock = dir.lock()?;
    dir.save_config(&config)?;
    Ok((config, dir, lock))
}

/// Prints each progress line to stdout and appends it to the stage log.
struct ProgressSink {
    log: BufWriter<File>,
}

impl ProgressSink {
    fn open(dir: &RunDir, stage: Stage) -> Result<Self> {
        let path = dir.log_path(stage);
        let file = File::options()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { log: BufWriter::new(file) })
    }

    fn emit(&mut self, progress: &Progress) {
        let line = progress.to_json_line();
        println!("{line}");
        // a full disk should not abort training; the stdout line still went out
        let _ = writeln!(self.log, "{line}");
    }
}

fn expand_images(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(path.clone());
        }
    }
    Ok(out)
}

fn load_images(paths: &[PathBuf]) -> Result<Vec<ImageRgb>> {
    paths
        .iter()
        .map(|p| Ok(load_image(p)?.composited([1.0; 3])))
        .collect()
}

fn load_run_scene(config: &RunConfig) -> Result<SceneDataset> {
    let path = config.scene.as_ref().ok_or_else(|| Error::validation("a scene path is required (--scene)"))?;
    Ok(load_scene(path, config.scene_defaults)?)
}

fn load_stage_checkpoint(path: &Path, stage: Stage) -> Result<stylenerf_core::data::checkpoint::ModelCheckpoint> {
    if !path.exists() {
        return Err(Error::state(format!("no {stage} checkpoint at {}; run that stage first", path.display())).into());
    }
    Ok(load_checkpoint(path, Some(stage))?)
}

pub fn train_adain_cmd(mut config: RunConfig, args: &TrainAdainArgs) -> Result<()> {
    if !args.content.is_empty() {
        config.content = args.content.clone();
    }
    if !args.styles.is_empty() {
        config.styles = args.styles.clone();
    }
    let a = &mut config.adain;
    if args.encoder_weights.is_some() {
        a.encoder.weights = args.encoder_weights.clone();
    }
    set(&mut a.steps, args.steps);
    set(&mut a.batch_size, args.batch_size);
    set(&mut a.learning_rate, args.learning_rate);
    set(&mut a.lambda, args.lambda);
    set(&mut a.crop_size, args.crop_size);
    set(&mut a.resize_shorter, args.resize_shorter);
    set(&mut a.seed, args.seed);
    let (config, dir, _lock) = begin(config, Stage::Adain)?;
    let content = load_images(&expand_images(&config.content)?)?;
    let styles = load_images(&expand_images(&config.styles)?)?;
    let resume = if args.resume {
        let ckpt = load_stage_checkpoint(&dir.checkpoint_path(Stage::Adain), Stage::Adain)?;
        Some(AdainModel::from_checkpoint(&ckpt, &Device::Cpu)?)
    } else {
        None
    };
    let mut sink = ProgressSink::open(&dir, Stage::Adain)?;
    let model = train_adain(&content, &styles, &config.adain, &mut |p| sink.emit(p), resume)?;
    let path = dir.checkpoint_path(Stage::Adain);
    save_checkpoint(&model.to_checkpoint()?, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn stylize_cmd(config: RunConfig, args: &StylizeArgs) -> Result<()> {
    let path = args.checkpoint.clone().unwrap_or_else(|| config.run_dir().checkpoint_path(Stage::Adain));
    let model = AdainModel::from_checkpoint(&load_stage_checkpoint(&path, Stage::Adain)?, &Device::Cpu)?;
    let content = load_image(&args.content)?.composited([1.0; 3]);
    let style = load_image(&args.style)?.composited([1.0; 3]);
    let out = model.stylize(&content, &style, args.alpha)?;
    out.save_png(&args.out)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

pub fn train_nerf_cmd(mut config: RunConfig, args: &TrainNerfArgs) -> Result<()> {
    if args.scene.is_some() {
        config.scene = args.scene.clone();
    }
    let n = &mut config.nerf;
    set(&mut n.steps, args.steps);
    set(&mut n.batch_rays, args.batch_rays);
    set(&mut n.learning_rate, args.learning_rate);
    set(&mut n.sampling.n_coarse, args.n_coarse);
    set(&mut n.sampling.n_fine, args.n_fine);
    set(&mut n.val_every, args.val_every);
    set(&mut n.seed, args.seed);
    let (config, dir, _lock) = begin(config, Stage::Nerf)?;
    let scene = load_run_scene(&config)?;
    let resume = if args.resume {
        let ckpt = load_stage_checkpoint(&dir.checkpoint_path(Stage::Nerf), Stage::Nerf)?;
        Some(NerfModel::from_checkpoint(&ckpt, &Device::Cpu)?)
    } else {
        None
    };
    let mut sink = ProgressSink::open(&dir, Stage::Nerf)?;
    let model = train_nerf(&scene, &config.nerf, &mut |p| sink.emit(p), resume)?;
    let path = dir.checkpoint_path(Stage::Nerf);
    save_checkpoint(&model.to_checkpoint()?, &path)?;
    eprintln!("wrote {}", path.display());
    if !scene.indices(stylenerf_core::data::scene::Split::Val).is_empty() {
        let psnr = evaluate_split(&model, &scene, stylenerf_core::data::scene::Split::Val, config.nerf.val_views)?;
        eprintln!("validation PSNR {psnr:.2} dB");
    }
    Ok(())
}

pub fn build_stylized_cmd(mut config: RunConfig, args: &BuildStylizedArgs) -> Result<()> {
    if args.scene.is_some() {
        config.scene = args.scene.clone();
    }
    if !args.styles.is_empty() {
        config.styles = args.styles.clone();
    }
    if args.no_content_style {
        config.include_content_style = false;
    }
    // this step consumes the decoder and feeds stage 3
    let (config, dir, _lock) = begin(config, Stage::Multistyle)?;
    let adain = AdainModel::from_checkpoint(
        &load_stage_checkpoint(&dir.checkpoint_path(Stage::Adain), Stage::Adain)?,
        &Device::Cpu,
    )?;
    let scene = load_run_scene(&config)?;
    let sources = StyleSource::numbered(&expand_images(&config.styles)?);
    let dataset = build_stylized_dataset(&scene, &sources, &adain, config.include_content_style, dir.stylized_root())?;
    eprintln!(
        "stylized {} frames in {} styles under {}",
        dataset.frame_ids.len(),
        dataset.registry.len(),
        dir.stylized_root().display()
    );
    Ok(())
}

pub fn train_multistyle_cmd(mut config: RunConfig, args: &TrainMultistyleArgs) -> Result<()> {
    if args.scene.is_some() {
        config.scene = args.scene.clone();
    }
    let m = &mut config.multistyle;
    set(&mut m.steps, args.steps);
    set(&mut m.batch_rays, args.batch_rays);
    set(&mut m.learning_rate, args.learning_rate);
    if args.trunk_split.is_some() {
        m.trunk_split = args.trunk_split;
    }
    m.density_aware |= args.density_aware;
    set(&mut m.seed, args.seed);
    let (config, dir, _lock) = begin(config, Stage::Multistyle)?;
    let nerf = NerfModel::from_checkpoint(
        &load_stage_checkpoint(&dir.checkpoint_path(Stage::Nerf), Stage::Nerf)?,
        &Device::Cpu,
    )?;
    let scene = load_run_scene(&config)?;
    let dataset = load_stylized_dataset(&scene, dir.stylized_root())
        .context("cannot read the stylized dataset; run build-stylized first")?;
    let resume = if args.resume {
        let ckpt = load_stage_checkpoint(&dir.checkpoint_path(Stage::Multistyle), Stage::Multistyle)?;
        Some(MultiStyleModel::from_checkpoint(&ckpt, &Device::Cpu)?)
    } else {
        None
    };
    let mut sink = ProgressSink::open(&dir, Stage::Multistyle)?;
    let model = train_multistyle(&dataset, &nerf, &config.multistyle, &mut |p| sink.emit(p), resume)?;
    let path = dir.checkpoint_path(Stage::Multistyle);
    save_checkpoint(&model.to_checkpoint()?, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn load_multistyle(config: &RunConfig) -> Result<MultiStyleModel> {
    let path = config.run_dir().checkpoint_path(Stage::Multistyle);
    Ok(MultiStyleModel::from_checkpoint(&load_stage_checkpoint(&path, Stage::Multistyle)?, &Device::Cpu)?)
}

fn resized(pose: CameraPose, width: Option<usize>) -> Result<CameraPose> {
    match width {
        None => Ok(pose),
        Some(0) => Err(Error::validation("--resolution must be at least 1").into()),
        Some(w) => {
            let h = ((w * pose.height) as f64 / pose.width as f64).round().max(1.0) as usize;
            Ok(pose.with_resolution(w, h))
        }
    }
}

pub fn render_cmd(mut config: RunConfig, args: &RenderArgs) -> Result<()> {
    if args.resolution.is_some() {
        config.render.resolution = args.resolution;
    }
    if args.seed.is_some() {
        config.render.seed = args.seed;
    }
    set(&mut config.render.orbit_frames, args.frames);
    config.validate()?;
    let model = load_multistyle(&config)?;
    let mut stats = model.style(&args.style)?;
    if let Some(intensity) = args.intensity {
        stats = set_intensity(&stats, &model.style(CONTENT_STYLE_ID)?, intensity)?;
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| config.run_dir().renders_dir().join(&args.style));
    let frames: Vec<(String, CameraPose)> = if args.orbit {
        let cameras = (0..model.cameras.len()).map(|i| model.camera(i)).collect::<Result<Vec<_>, _>>()?;
        orbit_sweep(&cameras, config.render.orbit_frames)?
            .into_iter()
            .enumerate()
            .map(|(k, p)| (format!("orbit_{k:03}.png"), p))
            .collect()
    } else {
        let index = args.pose_index.unwrap_or(0);
        vec![(format!("pose_{index:03}.png"), model.camera(index)?)]
    };
    for (name, pose) in frames {
        let pose = resized(pose, config.render.resolution)?;
        let (image, _) = model.render_view(&pose, &stats, config.render.seed)?;
        let path = out.join(name);
        image.save_png(&path)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

pub fn interpolate_cmd(mut config: RunConfig, args: &InterpolateArgs) -> Result<()> {
    if args.steps < 2 {
        return Err(Error::validation("--steps must be at least 2").into());
    }
    if args.resolution.is_some() {
        config.render.resolution = args.resolution;
    }
    if args.seed.is_some() {
        config.render.seed = args.seed;
    }
    config.validate()?;
    let model = load_multistyle(&config)?;
    let (a, b) = (model.style(&args.style_a)?, model.style(&args.style_b)?);
    let pose = resized(model.camera(args.pose_index)?, config.render.resolution)?;
    let out = args.out.clone().unwrap_or_else(|| {
        config
            .run_dir()
            .renders_dir()
            .join(format!("interp_{}_{}", args.style_a, args.style_b))
    });
    for k in 0..args.steps {
        let lambda = k as f64 / (args.steps - 1) as f64;
        let stats = interpolate_styles(&a, &b, lambda)?;
        let (image, _) = model.render_view(&pose, &stats, config.render.seed)?;
        let path = out.join(format!("lambda_{lambda:.2}.png"));
        image.save_png(&path)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

pub fn serve_cmd(config: RunConfig, args: &ServeArgs) -> Result<()> {
    let checkpoint = args
        .checkpoint
        .clone()
        .or_else(|| Some(config.run_dir().checkpoint_path(Stage::Multistyle)).filter(|p| p.exists()));
    let state = AppState::load(&ServiceConfig {
        checkpoint,
        stylized_root: None,
        max_in_flight: args.max_in_flight,
    })?;
    let runtime = tokio::runtime::Runtime::new().context("cannot start the async runtime")?;
    eprintln!("serving on http://{}", args.addr);
    runtime.block_on(stylenerf_service::serve(state, args.addr))?;
    Ok(())
}

pub fn synth_scene_cmd(args: &SynthSceneArgs) -> Result<()> {
    let cfg = CubeSceneConfig {
        train_views: args.train_views,
        val_views: args.val_views,
        resolution: args.resolution,
        seed: args.seed,
        ..CubeSceneConfig::default()
    };
    write_cube_scene(&args.out, &cfg)?;
    eprintln!("wrote scene to {}", args.out.display());
    if let Some(dir) = &args.styles_out {
        for (name, image) in default_styles(args.style_size) {
            image.save_png(&dir.join(format!("{name}.png")))?;
        }
        eprintln!("wrote styles to {}", dir.display());
    }
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
