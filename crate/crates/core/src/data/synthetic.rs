//! Procedural test data: a colored cube scene rendered analytically, and a
//! handful of patterned style images.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::images::{save_rgba_png, ImageRgb};
use super::scene::{FrameEntry, Split, TransformsFile, TRANSFORMS_FILE};
use crate::error::{Error, Result};
use crate::rendering::{generate_rays, CameraPose, Ray};

/// Face colors indexed by `[+x, −x, +y, −y, +z, −z]`.
pub const CUBE_FACE_COLORS: [[f32; 3]; 6] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.80],
    [0.20, 0.75, 0.25],
    [0.80, 0.30, 0.80],
    [0.20, 0.35, 0.90],
    [0.95, 0.85, 0.20],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeSceneConfig {
    pub train_views: usize,
    pub val_views: usize,
    pub resolution: usize,
    pub half_size: f64,
    pub radius: f64,
    pub camera_angle_x: f64,
    /// Elevation range of the cameras, degrees.
    pub elevation: (f64, f64),
    /// Subpixel samples per axis.
    pub supersample: usize,
    pub seed: u64,
}

impl Default for CubeSceneConfig {
    fn default() -> Self {
        Self {
            train_views: 20,
            val_views: 5,
            resolution: 64,
            half_size: 0.8,
            radius: 4.0,
            camera_angle_x: 0.6911,
            elevation: (10.0, 60.0),
            supersample: 3,
            seed: 0,
        }
    }
}

impl CubeSceneConfig {
    pub fn focal(&self) -> f64 {
        0.5 * self.resolution as f64 / (0.5 * self.camera_angle_x).tan()
    }

    pub fn near_far(&self) -> (f64, f64) {
        (self.radius - 2.0, self.radius + 2.0)
    }

    /// Training poses spread evenly in azimuth; validation poses drawn at random.
    pub fn poses(&self) -> Result<Vec<(CameraPose, Split)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = self.elevation;
        let focal = self.focal();
        let mut out = Vec::new();
        for i in 0..self.train_views {
            let azimuth = 360.0 * i as f64 / self.train_views as f64 + rng.gen_range(-5.0..5.0);
            let elevation = rng.gen_range(lo..hi);
            out.push((CameraPose::orbit(azimuth, elevation, self.radius, focal, self.resolution, self.resolution)?, Split::Train));
        }
        for _ in 0..self.val_views {
            let azimuth = rng.gen_range(0.0..360.0);
            let elevation = rng.gen_range(lo..hi);
            out.push((CameraPose::orbit(azimuth, elevation, self.radius, focal, self.resolution, self.resolution)?, Split::Val));
        }
        Ok(out)
    }
}

/// Slab test against the axis-aligned cube; returns the hit face index.
pub fn intersect_cube(ray: &Ray, half_size: f64) -> Option<(f64, usize)> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut face = 0;
    for axis in 0..3 {
        let o = ray.origin[axis];
        let d = ray.direction[axis];
        if d.abs() < 1e-12 {
            if o.abs() > half_size {
                return None;
            }
            continue;
        }
        let t0 = (-half_size - o) / d;
        let t1 = (half_size - o) / d;
        let (near, far, near_face) = if t0 < t1 { (t0, t1, 2 * axis + 1) } else { (t1, t0, 2 * axis) };
        if near > t_enter {
            t_enter = near;
            face = near_face;
        }
        t_exit = t_exit.min(far);
    }
    (t_enter <= t_exit && t_enter > 0.0).then_some((t_enter, face))
}

/// Renders one view: color composited over `background`, plus per-pixel coverage.
pub fn render_cube(pose: &CameraPose, config: &CubeSceneConfig, background: [f32; 3]) -> Result<(ImageRgb, Vec<f32>)> {
    let ss = config.supersample.max(1);
    let hi = CameraPose {
        focal: pose.focal * ss as f64,
        width: pose.width * ss,
        height: pose.height * ss,
        ..pose.clone()
    };
    let (near, far) = config.near_far();
    let rays = generate_rays(&hi, near, far)?;
    let mut color = vec![0.0f32; pose.width * pose.height * 3];
    let mut alpha = vec![0.0f32; pose.width * pose.height];
    let weight = 1.0 / (ss * ss) as f32;
    for (i, ray) in rays.iter().enumerate() {
        let (row, col) = (i / hi.width / ss, (i % hi.width) / ss);
        let px = row * pose.width + col;
        if let Some((_, face)) = intersect_cube(ray, config.half_size) {
            alpha[px] += weight;
            for ch in 0..3 {
                color[px * 3 + ch] += weight * CUBE_FACE_COLORS[face][ch];
            }
        }
    }
    let mut composited = vec![0.0f32; color.len()];
    for px in 0..alpha.len() {
        for ch in 0..3 {
            composited[px * 3 + ch] = color[px * 3 + ch] + (1.0 - alpha[px]) * background[ch];
        }
    }
    Ok((ImageRgb::new(pose.width, pose.height, composited)?, alpha))
}

/// Writes `images/r_XXX.png` (RGBA) and `transforms.json` under `dir`.
pub fn write_cube_scene(dir: &Path, config: &CubeSceneConfig) -> Result<()> {
    if config.train_views + config.val_views == 0 || config.resolution == 0 {
        return Err(Error::validation("cube scene needs at least one view and a nonzero resolution"));
    }
    let (near, far) = config.near_far();
    let mut frames = Vec::new();
    for (i, (pose, split)) in config.poses()?.into_iter().enumerate() {
        let (rgb, alpha) = render_cube(&pose, config, [0.0; 3])?;
        let mut straight = rgb.clone();
        for (px, a) in straight.data.chunks_mut(3).zip(&alpha) {
            for v in px {
                *v = if *a > 0.0 { *v / a } else { 0.0 };
            }
        }
        let file_path = format!("images/r_{i:03}.png");
        save_rgba_png(&dir.join(&file_path), &straight, &alpha)?;
        let m = pose.to_matrix();
        frames.push(FrameEntry {
            file_path,
            transform_matrix: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
            split,
        });
    }
    let transforms = TransformsFile {
        camera_angle_x: Some(config.camera_angle_x),
        fl_x: None,
        near: Some(near),
        far: Some(far),
        white_background: Some(true),
        frames,
    };
    let path = dir.join(TRANSFORMS_FILE);
    let text = serde_json::to_string_pretty(&transforms).expect("transforms serialize");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StylePattern {
    Stripes,
    Checker,
    Rings,
}

impl StylePattern {
    pub const ALL: [StylePattern; 3] = [StylePattern::Stripes, StylePattern::Checker, StylePattern::Rings];

    pub fn name(self) -> &'static str {
        match self {
            StylePattern::Stripes => "stripes",
            StylePattern::Checker => "checker",
            StylePattern::Rings => "rings",
        }
    }
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    std::array::from_fn(|i| a[i] + (b[i] - a[i]) * t)
}

/// A `size × size` patterned image with mild seeded noise.
pub fn style_image(pattern: StylePattern, size: usize, seed: u64) -> ImageRgb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = ImageRgb::filled(size, size, [0.0; 3]);
    let s = size as f64;
    for row in 0..size {
        for col in 0..size {
            let (x, y) = (col as f64 / s, row as f64 / s);
            let rgb = match pattern {
                StylePattern::Stripes => {
                    let t = (0.5 + 0.5 * ((x + y) * 6.0 * PI).sin()) as f32;
                    lerp3([0.95, 0.55, 0.10], [0.35, 0.05, 0.15], t)
                }
                StylePattern::Checker => {
                    let cell = ((x * 6.0).floor() + (y * 6.0).floor()) as i64 % 2 == 0;
                    if cell {
                        [0.10, 0.20, 0.60]
                    } else {
                        [0.90, 0.92, 0.97]
                    }
                }
                StylePattern::Rings => {
                    let r = ((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt();
                    let t = (0.5 + 0.5 * (r * 14.0 * PI).cos()) as f32;
                    lerp3([0.15, 0.55, 0.20], [0.55, 0.20, 0.65], t)
                }
            };
            let noise: f32 = rng.gen_range(-0.04..0.04);
            img.set_pixel(col, row, rgb.map(|v| (v + noise).clamp(0.0, 1.0)));
        }
    }
    img
}

/// The three built-in styles, named `stripes`, `checker`, `rings`.
pub fn default_styles(size: usize) -> Vec<(String, ImageRgb)> {
    StylePattern::ALL
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name().to_string(), style_image(*p, size, 100 + i as u64)))
        .collect()
}
