use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Train and render stylized radiance fields.
///
/// Artifacts live in `{runs-dir}/{run-id}/`. Settings come from `--config`
/// (TOML), overridden by flags; the merged result is archived as
/// `config.toml` in the run directory. Progress is printed to stdout as one
/// JSON object per step.
#[derive(Debug, Parser)]
#[command(name = "stylenerf", version)]
pub struct Cli {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run name; selects the run directory.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    /// Directory holding run directories.
    #[arg(long, global = true, env = "STYLENERF_RUNS")]
    pub runs_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the AdaIN decoder on content and style images.
    TrainAdain(TrainAdainArgs),
    /// Stylize one image with the trained decoder.
    Stylize(StylizeArgs),
    /// Fit a radiance field to the scene.
    TrainNerf(TrainNerfArgs),
    /// Stylize every scene frame with every style and write the style registry.
    BuildStylized(BuildStylizedArgs),
    /// Train style-conditioned heads over the frozen radiance-field trunk.
    TrainMultistyle(TrainMultistyleArgs),
    /// Render one training pose, or an orbit sweep, in a style.
    Render(RenderArgs),
    /// Render a sweep of λ between two styles.
    Interpolate(InterpolateArgs),
    /// Start the HTTP render service.
    Serve(ServeArgs),
    /// Write the synthetic colored-cube scene and procedural style images.
    SynthScene(SynthSceneArgs),
}

#[derive(Debug, Args)]
pub struct TrainAdainArgs {
    /// Content images or directories of them.
    #[arg(long, num_args = 1..)]
    pub content: Vec<PathBuf>,
    /// Style images or directories of them.
    #[arg(long, num_args = 1..)]
    pub styles: Vec<PathBuf>,
    /// VGG-19 encoder weights (safetensors); a seeded encoder is used otherwise.
    #[arg(long)]
    pub encoder_weights: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Style-loss weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long)]
    pub resize_shorter: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the run's decoder checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Blend between content (0) and style (1) features.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Decoder checkpoint; defaults to the run's.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainNerfArgs {
    /// Scene directory with `images/` and `transforms.json`.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_rays: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub n_coarse: Option<usize>,
    #[arg(long)]
    pub n_fine: Option<usize>,
    /// Report validation PSNR every this many steps.
    #[arg(long)]
    pub val_every: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the run's radiance-field checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct BuildStylizedArgs {
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Style images or directories of them, registered as style_00, style_01, ...
    #[arg(long, num_args = 1..)]
    pub styles: Vec<PathBuf>,
    /// Do not register the original frames as style `content`.
    #[arg(long)]
    pub no_content_style: bool,
}

#[derive(Debug, Args)]
pub struct TrainMultistyleArgs {
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_rays: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Trunk layers kept frozen (defaults to all).
    #[arg(long)]
    pub trunk_split: Option<usize>,
    /// Let the style statistics modulate density as well as color.
    #[arg(long)]
    pub density_aware: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the run's multi-style checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Registered style id.
    #[arg(long)]
    pub style: String,
    /// Blend from the content style (0) to `--style` (1).
    #[arg(long)]
    pub intensity: Option<f64>,
    /// Training camera to render.
    #[arg(long, conflicts_with = "orbit")]
    pub pose_index: Option<usize>,
    /// Render an orbit sweep around the scene instead of one pose.
    #[arg(long)]
    pub orbit: bool,
    /// Frames in the orbit sweep.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Output width in pixels; height keeps the camera aspect.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Jitter seed; without one, samples are placed deterministically.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub style_a: String,
    #[arg(long)]
    pub style_b: String,
    /// Number of λ values, evenly spaced over [0, 1].
    #[arg(long, default_value_t = 11)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub pose_index: usize,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Multi-style checkpoint; defaults to the run's.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Renders allowed in flight before requests get 503.
    #[arg(long, default_value_t = stylenerf_service::DEFAULT_MAX_IN_FLIGHT)]
    pub max_in_flight: usize,
}

#[derive(Debug, Args)]
pub struct SynthSceneArgs {
    /// Scene output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write procedural style images here.
    #[arg(long)]
    pub styles_out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub train_views: usize,
    #[arg(long, default_value_t = 5)]
    pub val_views: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// Style image side length.
    #[arg(long, default_value_t = 256)]
    pub style_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
