use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adain::{AdainModel, StyleStatistics};
use crate::data::images::{load_image, ImageRgb};
use crate::data::scene::{SceneDataset, Split};
use crate::error::{Error, Result};
use crate::rendering::CameraPose;

/// Registry id of the content-as-style entry.
pub const CONTENT_STYLE_ID: &str = "content";
pub const REGISTRY_FILE: &str = "registry.json";
pub const STYLIZED_DIR: &str = "stylized";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleEntry {
    pub name: String,
    /// Source style image; absent for the content entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    pub statistics: Vec<f32>,
    pub layer_channels: Vec<usize>,
}

impl StyleEntry {
    pub fn style_statistics(&self) -> Result<StyleStatistics> {
        StyleStatistics::from_flat(&self.statistics, &self.layer_channels)
    }
}

/// Styles by id. Iteration order (sorted ids) defines each style's index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StyleRegistry {
    pub styles: BTreeMap<String, StyleEntry>,
}

impl StyleRegistry {
    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.styles.keys().cloned().collect()
    }

    pub fn has_content(&self) -> bool {
        self.styles.contains_key(CONTENT_STYLE_ID)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.styles.keys().position(|k| k == id)
    }

    pub fn statistics(&self, id: &str) -> Option<Result<StyleStatistics>> {
        self.styles.get(id).map(StyleEntry::style_statistics)
    }

    pub fn validate(&self) -> Result<()> {
        if self.styles.is_empty() {
            return Err(Error::validation("the style registry is empty"));
        }
        let mut dims = None;
        for (id, entry) in &self.styles {
            let stats = entry
                .style_statistics()
                .map_err(|e| Error::validation(format!("style {id}: {e}")))?;
            if *dims.get_or_insert(stats.flattened_dim()) != stats.flattened_dim() {
                return Err(Error::validation(format!("style {id} has a different statistics layout")));
            }
        }
        Ok(())
    }

    /// Flattened statistics dimension shared by all entries.
    pub fn flattened_dim(&self) -> usize {
        self.styles.values().next().map_or(0, |e| e.statistics.len())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("registry serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("registry serializes");
        crate::data::checkpoint::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let registry: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        registry.validate()?;
        Ok(registry)
    }
}

/// A style image to register: `(style_id, name, path)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSource {
    pub id: String,
    pub name: String,
    pub path: PathBuf,
}

impl StyleSource {
    /// Ids `style_00`, `style_01`, … in the given order; names are file stems.
    pub fn numbered(paths: &[PathBuf]) -> Vec<StyleSource> {
        paths
            .iter()
            .enumerate()
            .map(|(i, p)| StyleSource {
                id: format!("style_{i:02}"),
                name: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                path: p.clone(),
            })
            .collect()
    }
}

/// The N×M training grid: every frame rendered in every registered style,
/// all styles sharing the frame's camera.
#[derive(Clone, Debug)]
pub struct StylizedDataset {
    pub registry: StyleRegistry,
    pub frame_ids: Vec<String>,
    pub poses: Vec<CameraPose>,
    pub splits: Vec<Split>,
    pub near: f64,
    pub far: f64,
    pub background: [f32; 3],
    /// `images[style_id][frame]`.
    pub images: BTreeMap<String, Vec<ImageRgb>>,
}

impl StylizedDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.poses.len()).filter(|i| self.splits[*i] == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.registry.validate()?;
        let n = self.frame_ids.len();
        if n == 0 || self.poses.len() != n || self.splits.len() != n {
            return Err(Error::validation("stylized dataset frames, poses and splits must be nonempty and aligned"));
        }
        for id in self.registry.styles.keys() {
            let images = self
                .images
                .get(id)
                .ok_or_else(|| Error::validation(format!("no stylized images for style {id}")))?;
            if images.len() != n {
                return Err(Error::validation(format!("style {id} has {} images for {n} frames", images.len())));
            }
            for (img, pose) in images.iter().zip(&self.poses) {
                if (img.width, img.height) != (pose.width, pose.height) {
                    return Err(Error::validation(format!("style {id}: image size does not match its camera")));
                }
            }
        }
        Ok(())
    }
}

pub fn stylized_path(root: &Path, style_id: &str, frame_id: &str) -> PathBuf {
    root.join(STYLIZED_DIR).join(style_id).join(format!("{frame_id}.png"))
}

fn remask(image: &ImageRgb, alpha: Option<&Vec<f32>>, background: [f32; 3]) -> ImageRgb {
    let Some(alpha) = alpha else {
        return image.clone();
    };
    let mut out = image.clone();
    for (px, a) in out.data.chunks_mut(3).zip(alpha) {
        for (v, bg) in px.iter_mut().zip(background) {
            *v = *v * a + bg * (1.0 - a);
        }
    }
    out
}

/// Stylizes every frame of `scene` with every style and writes
/// `stylized/{style_id}/{frame_id}.png` plus `registry.json` under `root`.
///
/// When the scene carries alpha masks, stylized pixels are blended back over
/// the scene background with them so empty space stays empty. With
/// `include_content`, the original frames are added as style `content`, whose
/// statistics are the average of the per-frame statistics.
pub fn build_stylized_dataset(
    scene: &SceneDataset,
    styles: &[StyleSource],
    adain: &AdainModel,
    include_content: bool,
    root: &Path,
) -> Result<StylizedDataset> {
    scene.validate()?;
    if styles.is_empty() && !include_content {
        return Err(Error::validation("at least one style (or the content style) is required"));
    }
    let background = scene.background();
    let mut registry = StyleRegistry::default();
    let mut images = BTreeMap::new();
    for source in styles {
        if source.id == CONTENT_STYLE_ID || registry.styles.contains_key(&source.id) {
            return Err(Error::validation(format!("duplicate or reserved style id {}", source.id)));
        }
        let style_image = load_image(&source.path)?.composited([1.0; 3]);
        let stats = adain.style_statistics(&style_image)?;
        let mut frames = Vec::with_capacity(scene.len());
        for (n, frame_id) in scene.frame_ids.iter().enumerate() {
            let stylized = adain
                .stylize_with_statistics(&scene.images[n], &stats, 1.0)
                .map_err(|e| Error::validation(format!("frame {frame_id}: {e}")))?;
            let stylized = remask(&stylized, scene.alphas.as_ref().map(|a| &a[n]), background);
            stylized.save_png(&stylized_path(root, &source.id, frame_id))?;
            // keep exactly what was written, so training sees the 8-bit values
            frames.push(stylized.quantized());
        }
        images.insert(source.id.clone(), frames);
        registry.styles.insert(
            source.id.clone(),
            StyleEntry {
                name: source.name.clone(),
                image_path: Some(source.path.clone()),
                layer_channels: stats.layer_channels(),
                statistics: stats.flatten(),
            },
        );
    }
    if include_content {
        let per_frame = scene
            .images
            .iter()
            .map(|img| adain.style_statistics(img))
            .collect::<Result<Vec<_>>>()?;
        let stats = StyleStatistics::average(&per_frame)?;
        let mut frames = Vec::with_capacity(scene.len());
        for (n, frame_id) in scene.frame_ids.iter().enumerate() {
            scene.images[n].save_png(&stylized_path(root, CONTENT_STYLE_ID, frame_id))?;
            frames.push(scene.images[n].quantized());
        }
        images.insert(CONTENT_STYLE_ID.to_string(), frames);
        registry.styles.insert(
            CONTENT_STYLE_ID.to_string(),
            StyleEntry {
                name: "original".into(),
                image_path: None,
                layer_channels: stats.layer_channels(),
                statistics: stats.flatten(),
            },
        );
    }
    registry.save(&root.join(REGISTRY_FILE))?;
    let dataset = StylizedDataset {
        registry,
        frame_ids: scene.frame_ids.clone(),
        poses: scene.poses.clone(),
        splits: scene.splits.clone(),
        near: scene.near,
        far: scene.far,
        background,
        images,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Reads a dataset written by [`build_stylized_dataset`] back from `root`.
pub fn load_stylized_dataset(scene: &SceneDataset, root: &Path) -> Result<StylizedDataset> {
    let registry = StyleRegistry::load(&root.join(REGISTRY_FILE))?;
    let mut images = BTreeMap::new();
    for id in registry.styles.keys() {
        let frames = scene
            .frame_ids
            .iter()
            .map(|frame_id| Ok(load_image(&stylized_path(root, id, frame_id))?.rgb))
            .collect::<Result<Vec<_>>>()?;
        images.insert(id.clone(), frames);
    }
    let dataset = StylizedDataset {
        registry,
        frame_ids: scene.frame_ids.clone(),
        poses: scene.poses.clone(),
        splits: scene.splits.clone(),
        near: scene.near,
        far: scene.far,
        background: scene.background(),
        images,
    };
    dataset.validate()?;
    Ok(dataset)
}
