//! Scene directories: `images/` plus a `transforms.json` pose file.
//!
//! ```json
//! {
//!   "camera_angle_x": 0.69,
//!   "near": 2.0, "far": 6.0, "white_background": true,
//!   "frames": [
//!     {"file_path": "images/r_000.png", "transform_matrix": [[...], [...], [...], [0, 0, 0, 1]], "split": "train"}
//!   ]
//! }
//! ```
//!
//! Matrices are camera-to-world with the camera looking down −z. `file_path`
//! is relative to the scene directory; a missing extension means `.png`.
//! Instead of `camera_angle_x`, a focal length in pixels may be given as
//! `fl_x`. `near`, `far`, `white_background` and `split` are optional.

use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::images::{load_image, ImageRgb};
use crate::error::{Error, Result};
use crate::rendering::CameraPose;

pub const TRANSFORMS_FILE: &str = "transforms.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_angle_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fl_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub white_background: Option<bool>,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
    #[serde(default)]
    pub split: Split,
}

impl FrameEntry {
    pub fn frame_id(&self) -> String {
        Path::new(&self.file_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.file_path.clone())
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|r, c| self.transform_matrix[r][c])
    }
}

/// Near/far fallback when the pose file does not carry them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneDefaults {
    pub near: f64,
    pub far: f64,
    pub white_background: bool,
}

impl Default for SceneDefaults {
    fn default() -> Self {
        Self {
            near: 2.0,
            far: 6.0,
            white_background: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SceneDataset {
    pub frame_ids: Vec<String>,
    /// Composited onto the scene background when the files carry alpha.
    pub images: Vec<ImageRgb>,
    /// Per-frame coverage, present when the files carry alpha.
    pub alphas: Option<Vec<Vec<f32>>>,
    pub poses: Vec<CameraPose>,
    pub splits: Vec<Split>,
    pub near: f64,
    pub far: f64,
    pub white_background: bool,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn background(&self) -> [f32; 3] {
        if self.white_background {
            [1.0; 3]
        } else {
            [0.0; 3]
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|i| self.splits[*i] == split).collect()
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.images.first().map(|img| (img.width, img.height))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if self.poses.len() != n || self.frame_ids.len() != n || self.splits.len() != n {
            return Err(Error::validation(format!(
                "scene has {} images but {} poses",
                n,
                self.poses.len()
            )));
        }
        if let Some((w, h)) = self.resolution() {
            for (id, img) in self.frame_ids.iter().zip(&self.images) {
                if (img.width, img.height) != (w, h) {
                    return Err(Error::validation(format!(
                        "frame {id}: resolution {}×{} differs from {w}×{h}",
                        img.width, img.height
                    )));
                }
            }
        }
        if !(self.near >= 0.0 && self.far > self.near) {
            return Err(Error::validation(format!(
                "scene bounds must satisfy 0 <= near < far, got {} / {}",
                self.near, self.far
            )));
        }
        Ok(())
    }
}

fn resolve_frame_path(scene: &Path, file_path: &str) -> PathBuf {
    let p = scene.join(file_path);
    if p.extension().is_none() {
        p.with_extension("png")
    } else {
        p
    }
}

pub fn read_transforms(path: &Path) -> Result<TransformsFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_scene(path: &Path, defaults: SceneDefaults) -> Result<SceneDataset> {
    let transforms_path = path.join(TRANSFORMS_FILE);
    if !transforms_path.is_file() {
        return Err(Error::validation(format!("{} is missing", transforms_path.display())));
    }
    let transforms = read_transforms(&transforms_path)?;
    if transforms.frames.is_empty() {
        return Err(Error::validation(format!("{} lists no frames", transforms_path.display())));
    }
    for entry in &transforms.frames {
        let file = resolve_frame_path(path, &entry.file_path);
        if !file.is_file() {
            return Err(Error::validation(format!(
                "frame {}: image {} is missing",
                entry.frame_id(),
                file.display()
            )));
        }
    }

    let white_background = transforms.white_background.unwrap_or(defaults.white_background);
    let background = if white_background { [1.0; 3] } else { [0.0; 3] };
    let mut scene = SceneDataset {
        frame_ids: Vec::new(),
        images: Vec::new(),
        alphas: Some(Vec::new()),
        poses: Vec::new(),
        splits: Vec::new(),
        near: transforms.near.unwrap_or(defaults.near),
        far: transforms.far.unwrap_or(defaults.far),
        white_background,
    };
    for entry in &transforms.frames {
        let id = entry.frame_id();
        let decoded = load_image(&resolve_frame_path(path, &entry.file_path))?;
        let (w, h) = (decoded.rgb.width, decoded.rgb.height);
        let focal = match (transforms.fl_x, transforms.camera_angle_x) {
            (Some(f), _) => f,
            (None, Some(angle)) => 0.5 * w as f64 / (0.5 * angle).tan(),
            (None, None) => {
                return Err(Error::validation(format!(
                    "{}: needs camera_angle_x or fl_x",
                    transforms_path.display()
                )))
            }
        };
        let pose = CameraPose::from_matrix(&entry.matrix(), focal, w, h)
            .map_err(|e| Error::validation(format!("frame {id}: {e}")))?;
        match (&mut scene.alphas, &decoded.alpha) {
            (Some(alphas), Some(a)) => alphas.push(a.clone()),
            (alphas, _) => *alphas = None,
        }
        scene.images.push(decoded.composited(background));
        scene.poses.push(pose);
        scene.frame_ids.push(id);
        scene.splits.push(entry.split);
    }
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{write_cube_scene, CubeSceneConfig};

    fn small_scene(dir: &Path) {
        write_cube_scene(
            dir,
            &CubeSceneConfig {
                train_views: 4,
                val_views: 1,
                resolution: 16,
                ..CubeSceneConfig::default()
            },
        )
        .unwrap();
    }

    #[test]
    fn loads_generated_scene() {
        let dir = tempfile::tempdir().unwrap();
        small_scene(dir.path());
        let scene = load_scene(dir.path(), SceneDefaults::default()).unwrap();
        assert_eq!(scene.len(), 5);
        assert_eq!(scene.indices(Split::Train).len(), 4);
        assert_eq!(scene.indices(Split::Val).len(), 1);
        assert_eq!(scene.resolution(), Some((16, 16)));
        assert!(scene.alphas.is_some());
    }

    #[test]
    fn missing_image_names_frame() {
        let dir = tempfile::tempdir().unwrap();
        small_scene(dir.path());
        let transforms = read_transforms(&dir.path().join(TRANSFORMS_FILE)).unwrap();
        let victim = &transforms.frames[2];
        std::fs::remove_file(resolve_frame_path(dir.path(), &victim.file_path)).unwrap();
        let err = load_scene(dir.path(), SceneDefaults::default()).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains(&victim.frame_id()), "{err}");
    }

    #[test]
    fn reflected_pose_names_frame() {
        let dir = tempfile::tempdir().unwrap();
        small_scene(dir.path());
        let path = dir.path().join(TRANSFORMS_FILE);
        let mut transforms = read_transforms(&path).unwrap();
        for row in transforms.frames[1].transform_matrix.iter_mut().take(3) {
            row[0] = -row[0];
        }
        std::fs::write(&path, serde_json::to_string(&transforms).unwrap()).unwrap();
        let err = load_scene(dir.path(), SceneDefaults::default()).unwrap_err();
        assert!(err.is_validation());
        let msg = err.to_string();
        assert!(msg.contains(&transforms.frames[1].frame_id()) && msg.contains("determinant"), "{msg}");
    }

    #[test]
    fn missing_transforms() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_scene(dir.path(), SceneDefaults::default()).unwrap_err().is_validation());
    }
}
