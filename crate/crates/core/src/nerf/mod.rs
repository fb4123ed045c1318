//! Scene-fitting radiance field: an MLP trunk over encoded positions with a
//! density head and a view-dependent color head, rendered coarse-to-fine.

mod render;
mod train;

use std::collections::BTreeMap;

use candle_core::{Device, Tensor, D};
use candle_nn::ops::sigmoid;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use render::{render_image, render_rays, RenderOutput, RenderPass, SamplingConfig, DEFAULT_CHUNK};
pub use train::{evaluate_split, train_nerf, NerfConfig, NerfModel, SceneBounds};

use crate::error::{Error, Result};
use crate::nn::{digest_tensors, Linear, ParamStore, TensorData};
use crate::rendering::{encoded_dim, positional_encode_tensor, DIRECTION_LEVELS, POSITION_LEVELS};

const UNIT_TOLERANCE: f64 = 1e-4;

/// Anything that maps sample points and view directions to density and color.
pub trait RadianceField {
    /// `positions` and `directions` are `[N, 3]`; returns `σ` as `[N]` and color as `[N, 3]`.
    fn query(&self, positions: &Tensor, directions: &Tensor) -> Result<(Tensor, Tensor)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NerfNetworkConfig {
    pub depth: usize,
    pub width: usize,
    /// Trunk layers whose input is `[h, γ(x)]` instead of `h`.
    pub skips: Vec<usize>,
    pub position_levels: usize,
    pub direction_levels: usize,
    pub color_width: usize,
}

impl Default for NerfNetworkConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 256,
            skips: vec![4],
            position_levels: POSITION_LEVELS,
            direction_levels: DIRECTION_LEVELS,
            color_width: 128,
        }
    }
}

impl NerfNetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.color_width == 0 {
            return Err(Error::validation("network depth and widths must be at least 1"));
        }
        if self.position_levels == 0 || self.direction_levels == 0 {
            return Err(Error::validation("positional encodings need at least one level"));
        }
        if let Some(s) = self.skips.iter().find(|s| **s == 0 || **s >= self.depth) {
            return Err(Error::validation(format!("skip layer {s} must lie in 1..{}", self.depth)));
        }
        Ok(())
    }

    pub fn position_dim(&self) -> usize {
        encoded_dim(3, self.position_levels)
    }

    pub fn direction_dim(&self) -> usize {
        encoded_dim(3, self.direction_levels)
    }

    fn layer_input(&self, layer: usize) -> usize {
        match (layer, self.skips.contains(&layer)) {
            (0, _) => self.position_dim(),
            (_, true) => self.width + self.position_dim(),
            (_, false) => self.width,
        }
    }
}

/// Parameter names: `trunk.{i}`, `density`, `feature`, `color.{0,1}`.
#[derive(Clone, Debug)]
pub struct NerfNetwork {
    config: NerfNetworkConfig,
    store: ParamStore,
    trunk: Vec<Linear>,
    density: Linear,
    feature: Linear,
    color: [Linear; 2],
}

impl NerfNetwork {
    pub fn new(config: &NerfNetworkConfig, mut store: ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        for i in 0..config.depth {
            store.linear(&format!("trunk.{i}"), config.layer_input(i), config.width, rng)?;
        }
        store.linear("density", config.width, 1, rng)?;
        store.linear("feature", config.width, config.width, rng)?;
        store.linear("color.0", config.width + config.direction_dim(), config.color_width, rng)?;
        store.linear("color.1", config.color_width, 3, rng)?;
        Self::from_store(config, store)
    }

    /// Wraps parameters that already exist in `store`.
    pub fn from_store(config: &NerfNetworkConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let trunk = (0..config.depth)
            .map(|i| store.linear_from_existing(&format!("trunk.{i}")))
            .collect::<Result<Vec<_>>>()?;
        for (i, layer) in trunk.iter().enumerate() {
            if layer.in_dim() != config.layer_input(i) || layer.out_dim() != config.width {
                return Err(Error::state(format!(
                    "trunk layer {i} has shape {}→{}, config expects {}→{}",
                    layer.in_dim(),
                    layer.out_dim(),
                    config.layer_input(i),
                    config.width
                )));
            }
        }
        Ok(Self {
            density: store.linear_from_existing("density")?,
            feature: store.linear_from_existing("feature")?,
            color: [store.linear_from_existing("color.0")?, store.linear_from_existing("color.1")?],
            trunk,
            config: config.clone(),
            store,
        })
    }

    pub fn config(&self) -> &NerfNetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn density_head(&self) -> &Linear {
        &self.density
    }

    /// Features after the first `layers` trunk layers (ReLU applied), `[N, width]`.
    pub fn trunk_forward(&self, encoded_positions: &Tensor, layers: usize) -> Result<Tensor> {
        if layers == 0 || layers > self.trunk.len() {
            return Err(Error::validation(format!("trunk has {} layers, asked for {layers}", self.trunk.len())));
        }
        run_trunk(&self.trunk[..layers], &self.config.skips, encoded_positions)
    }

    pub fn trunk_layers(&self) -> &[Linear] {
        &self.trunk
    }

    /// The first `layers` trunk layers' parameters, named as in the store.
    pub fn trunk_tensors(&self, layers: usize) -> Result<BTreeMap<String, TensorData>> {
        let wanted: Vec<String> = (0..layers).map(|i| format!("trunk.{i}.")).collect();
        Ok(self
            .store
            .export("")?
            .into_iter()
            .filter(|(k, _)| wanted.iter().any(|p| k.starts_with(p)))
            .collect())
    }

    pub fn trunk_digest(&self, layers: usize) -> Result<String> {
        Ok(digest_tensors(&self.trunk_tensors(layers)?))
    }

    fn forward_encoded(&self, x: &Tensor, d: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.trunk_forward(x, self.trunk.len())?;
        let sigma = self.density.forward(&h)?.relu()?.squeeze(D::Minus1)?;
        let feature = self.feature.forward(&h)?;
        let c = self.color[0].forward(&Tensor::cat(&[&feature, d], D::Minus1)?)?.relu()?;
        let rgb = sigmoid(&self.color[1].forward(&c)?)?;
        Ok((sigma, rgb))
    }
}

impl RadianceField for NerfNetwork {
    fn query(&self, positions: &Tensor, directions: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = positional_encode_tensor(positions, self.config.position_levels)?;
        let d = positional_encode_tensor(directions, self.config.direction_levels)?;
        self.forward_encoded(&x, &d)
    }
}

/// Applies trunk layers with ReLU, feeding `[h, γ(x)]` to the layers listed in `skips`.
pub fn run_trunk(layers: &[Linear], skips: &[usize], encoded_positions: &Tensor) -> Result<Tensor> {
    let mut h = encoded_positions.clone();
    for (i, layer) in layers.iter().enumerate() {
        if i > 0 && skips.contains(&i) {
            h = Tensor::cat(&[&h, encoded_positions], D::Minus1)?;
        }
        h = layer.forward(&h)?.relu()?;
    }
    Ok(h)
}

/// Density and color at one sample point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample {
    pub sigma: f32,
    pub color: [f32; 3],
}

/// Point-wise evaluation of any field; directions must be unit length.
pub fn nerf_forward(
    positions: &[[f64; 3]],
    directions: &[[f64; 3]],
    field: &dyn RadianceField,
    device: &Device,
) -> Result<Vec<RadianceSample>> {
    if positions.len() != directions.len() {
        return Err(Error::validation(format!(
            "{} positions but {} directions",
            positions.len(),
            directions.len()
        )));
    }
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    for (i, d) in directions.iter().enumerate() {
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::validation(format!("direction {i} is not unit length (norm {norm})")));
        }
    }
    if positions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::validation("positions must be finite"));
    }
    let to_tensor = |v: &[[f64; 3]]| {
        let flat: Vec<f32> = v.iter().flatten().map(|x| *x as f32).collect();
        Tensor::from_vec(flat, (v.len(), 3), device)
    };
    let (sigma, rgb) = field.query(&to_tensor(positions)?, &to_tensor(directions)?)?;
    let sigma = sigma.to_vec1::<f32>()?;
    let rgb = rgb.to_vec2::<f32>()?;
    Ok(sigma
        .into_iter()
        .zip(rgb)
        .map(|(sigma, c)| RadianceSample {
            sigma,
            color: [c[0], c[1], c[2]],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub(crate) fn small_config() -> NerfNetworkConfig {
        NerfNetworkConfig {
            depth: 4,
            width: 32,
            skips: vec![2],
            color_width: 16,
            ..NerfNetworkConfig::default()
        }
    }

    fn network(seed: u64) -> NerfNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NerfNetwork::new(&small_config(), ParamStore::trainable(&Device::Cpu), &mut rng).unwrap()
    }

    fn unit(v: [f64; 3]) -> [f64; 3] {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.map(|x| x / n)
    }

    #[test]
    fn deterministic_and_in_range() {
        let net = network(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pos: Vec<[f64; 3]> = (0..64).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let dirs: Vec<[f64; 3]> = (0..64).map(|_| unit([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.5])).collect();
        let a = nerf_forward(&pos, &dirs, &net, &Device::Cpu).unwrap();
        let b = nerf_forward(&pos, &dirs, &net, &Device::Cpu).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!(s.sigma.is_finite() && s.sigma >= 0.0);
            assert!(s.color.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn density_ignores_direction() {
        let net = network(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..8 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let dirs: Vec<[f64; 3]> = (0..32)
                .map(|_| unit([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]))
                .collect();
            let out = nerf_forward(&vec![x; 32], &dirs, &net, &Device::Cpu).unwrap();
            assert!(out.iter().all(|s| s.sigma == out[0].sigma));
            assert!(out.iter().any(|s| s.color != out[0].color));
        }
    }

    #[test]
    fn rejects_non_unit_direction() {
        let net = network(1);
        let err = nerf_forward(&[[0.0; 3]], &[[0.0, 0.0, 2.0]], &net, &Device::Cpu).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn from_store_round_trip_and_trunk_digest() {
        let net = network(5);
        let tensors = net.store().export("").unwrap();
        let frozen = ParamStore::from_tensors(&tensors, "", &Device::Cpu).unwrap();
        let copy = NerfNetwork::from_store(&small_config(), frozen).unwrap();
        assert_eq!(copy.trunk_digest(4).unwrap(), net.trunk_digest(4).unwrap());
        assert_ne!(net.trunk_digest(3).unwrap(), net.trunk_digest(4).unwrap());
        assert_eq!(net.trunk_tensors(2).unwrap().len(), 4);
        let wrong = NerfNetworkConfig { width: 16, ..small_config() };
        assert!(NerfNetwork::from_store(&wrong, ParamStore::from_tensors(&tensors, "", &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn invalid_skip_is_rejected() {
        let cfg = NerfNetworkConfig { skips: vec![4], ..small_config() };
        assert!(cfg.validate().unwrap_err().is_validation());
    }
}
