//! Run configuration (one TOML file per run) and the run directory layout:
//!
//! ```text
//! runs/{run_id}/
//!   config.toml          merged configuration of the latest invocation
//!   checkpoints/         {adain,nerf,multistyle}.ckpt
//!   stylized/            {style_id}/{frame_id}.png
//!   registry.json
//!   logs/                {stage}.jsonl progress lines
//!   renders/
//! ```

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{write_atomic, Stage};
use super::scene::SceneDefaults;
use crate::adain::AdainConfig;
use crate::error::{Error, Result};
use crate::multistyle::MultiStyleConfig;
use crate::nerf::NerfConfig;

/// Environment variable naming the directory that holds run directories.
pub const RUNS_ENV: &str = "STYLENERF_RUNS";
pub const DEFAULT_RUNS_DIR: &str = "runs";
pub const CONFIG_FILE: &str = "config.toml";
const LOCK_FILE: &str = ".lock";

/// Offline rendering settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Output side length; `None` keeps the training camera resolution.
    pub resolution: Option<usize>,
    pub orbit_frames: usize,
    /// Jitter seed for renders; `None` samples deterministically.
    pub seed: Option<u64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            resolution: None,
            orbit_frames: 60,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    /// Stage of the invocation that archived this file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    /// Directory holding run directories; falls back to `$STYLENERF_RUNS`, then `runs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    pub scene_defaults: SceneDefaults,
    /// Content images (files or directories) for decoder training.
    pub content: Vec<PathBuf>,
    /// Style images; registered as `style_00`, `style_01`, … in this order.
    pub styles: Vec<PathBuf>,
    /// Register the unstylized frames as style `content`.
    pub include_content_style: bool,
    pub adain: AdainConfig,
    pub nerf: NerfConfig,
    pub multistyle: MultiStyleConfig,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            stage: None,
            output_dir: None,
            scene: None,
            scene_defaults: SceneDefaults::default(),
            content: Vec::new(),
            styles: Vec::new(),
            include_content_style: true,
            adain: AdainConfig::default(),
            nerf: NerfConfig::default(),
            multistyle: MultiStyleConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::validation(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Checks every field against its declared range.
    pub fn validate(&self) -> Result<()> {
        let id_ok = !self.run_id.is_empty()
            && self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
            && !self.run_id.starts_with('.');
        if !id_ok {
            return Err(Error::validation(format!(
                "run_id must be nonempty and use only letters, digits, '_', '-' or '.', got {:?}",
                self.run_id
            )));
        }
        let d = &self.scene_defaults;
        if !(d.near >= 0.0 && d.far > d.near && d.far.is_finite()) {
            return Err(Error::validation(format!("scene_defaults need 0 <= near < far, got {} and {}", d.near, d.far)));
        }
        self.adain.validate().map_err(|e| prefixed("adain", e))?;
        self.nerf.validate().map_err(|e| prefixed("nerf", e))?;
        self.multistyle.validate(&self.nerf.network).map_err(|e| prefixed("multistyle", e))?;
        if matches!(self.render.resolution, Some(0)) || self.render.orbit_frames == 0 {
            return Err(Error::validation("render.resolution and render.orbit_frames must be at least 1"));
        }
        Ok(())
    }

    /// [`RunConfig::validate`] plus the inputs `stage` needs.
    pub fn validate_for(&self, stage: Stage) -> Result<()> {
        self.validate()?;
        match stage {
            Stage::Adain if self.content.is_empty() || self.styles.is_empty() => {
                Err(Error::validation("decoder training needs content and styles"))
            }
            Stage::Nerf | Stage::Multistyle if self.scene.is_none() => Err(Error::validation("a scene path is required")),
            _ => Ok(()),
        }
    }

    /// The run directory this config points at.
    pub fn run_dir(&self) -> RunDir {
        RunDir::new(runs_root(self.output_dir.as_deref()).join(&self.run_id))
    }
}

fn prefixed(section: &str, e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::validation(format!("{section}: {m}")),
        other => other,
    }
}

/// `explicit`, else `$STYLENERF_RUNS`, else `runs`.
pub fn runs_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUNS_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUNS_DIR))
}

/// Paths inside one run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn config_path(&self) -> PathBuf {
        self.path.join(CONFIG_FILE)
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.path.join("checkpoints")
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.checkpoints_dir().join(format!("{stage}.ckpt"))
    }

    /// Root passed to the stylized-dataset builder (holds `stylized/` and `registry.json`).
    pub fn stylized_root(&self) -> &Path {
        &self.path
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.path.join("logs")
    }

    pub fn log_path(&self, stage: Stage) -> PathBuf {
        self.logs_dir().join(format!("{stage}.jsonl"))
    }

    pub fn renders_dir(&self) -> PathBuf {
        self.path.join("renders")
    }

    pub fn create(&self) -> Result<()> {
        for dir in [self.path.clone(), self.checkpoints_dir(), self.logs_dir()] {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }

    /// Writes the merged configuration that produced this run's artifacts.
    pub fn save_config(&self, config: &RunConfig) -> Result<()> {
        write_atomic(&self.config_path(), config.to_toml().as_bytes())
    }

    /// Takes the exclusive writer lock; released when the guard drops.
    pub fn lock(&self) -> Result<RunLock> {
        self.create()?;
        let path = self.path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                // best effort; the pid only helps a human clean up a stale lock
                let _ = writeln!(file, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::state(format!(
                "run directory {} is locked by another writer (delete {} if that process is gone)",
                self.path.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

/// Exclusive writer access to a run directory.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut config = RunConfig {
            run_id: "cube-1".into(),
            stage: Some(Stage::Nerf),
            scene: Some("scenes/cube".into()),
            styles: vec!["a.png".into(), "b.png".into()],
            ..RunConfig::default()
        };
        config.multistyle.density_aware = true;
        config.multistyle.trunk_split = Some(6);
        config.render.seed = Some(3);
        let back = RunConfig::from_toml(&config.to_toml()).unwrap();
        assert_eq!(back, config);
        back.validate().unwrap();
    }

    #[test]
    fn partial_files_take_defaults() {
        let config = RunConfig::from_toml("run_id = \"x\"\n[nerf]\nsteps = 7\n[nerf.sampling]\nn_fine = 0\n").unwrap();
        assert_eq!(config.nerf.steps, 7);
        assert_eq!(config.nerf.sampling.n_fine, 0);
        assert_eq!(config.nerf.sampling.n_coarse, 64);
        assert_eq!(config.adain, AdainConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_ranges_are_rejected() {
        assert!(RunConfig::from_toml("run_idd = \"x\"").unwrap_err().is_validation());
        let bad = |edit: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            edit(&mut c);
            c.validate().unwrap_err()
        };
        assert!(bad(|c| c.run_id = "../escape".into()).is_validation());
        assert!(bad(|c| c.nerf.learning_rate = 0.0).to_string().contains("nerf"));
        assert!(bad(|c| c.multistyle.trunk_split = Some(9)).to_string().contains("multistyle"));
        assert!(bad(|c| c.adain.crop_size = 30).to_string().contains("adain"));
        assert!(bad(|c| c.scene_defaults.far = 1.0).is_validation());
        assert!(RunConfig::default().validate_for(Stage::Nerf).unwrap_err().is_validation());
    }

    #[test]
    fn run_dir_layout_and_lock() {
        let tmp = tempfile::tempdir().unwrap();
        let config = RunConfig {
            run_id: "r".into(),
            output_dir: Some(tmp.path().to_path_buf()),
            ..RunConfig::default()
        };
        let dir = config.run_dir();
        assert_eq!(dir.path(), tmp.path().join("r"));
        assert_eq!(dir.checkpoint_path(Stage::Multistyle), tmp.path().join("r/checkpoints/multistyle.ckpt"));
        {
            let _guard = dir.lock().unwrap();
            assert!(dir.lock().unwrap_err().is_state());
        }
        let _again = dir.lock().unwrap();
        dir.save_config(&config).unwrap();
        assert_eq!(RunConfig::load(&dir.config_path()).unwrap(), config);
    }
}
