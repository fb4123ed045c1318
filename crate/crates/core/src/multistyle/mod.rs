//! Style-conditioned heads over a frozen radiance-field trunk.
//!
//! Color is `MLP_rgb(MLP_style(s) ⊕ MLP_view(h ⊕ γ(d)))` where `h` is the
//! frozen trunk feature of `γ(x)` and `s` the flattened style statistics.
//! Density is `MLP_alpha(h)`, or `MLP_alpha(h ⊕ MLP_style_density(s))` in the
//! density-aware variant. Coarse and fine passes use separate head sets over
//! one shared trunk.

mod interp;
mod registry;
mod train;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::ops::sigmoid;
use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use interp::{interpolate_styles, set_intensity};
pub use registry::{
    build_stylized_dataset, load_stylized_dataset, stylized_path, StyleEntry, StyleRegistry, StyleSource,
    StylizedDataset, CONTENT_STYLE_ID, REGISTRY_FILE, STYLIZED_DIR,
};
pub use train::{evaluate_style_losses, train_multistyle};

use crate::adain::StyleStatistics;
use crate::data::checkpoint::{ModelCheckpoint, Stage, REGISTRY_DIGEST, TRUNK_DIGEST};
use crate::data::images::ImageRgb;
use crate::data::scene::Split;
use crate::error::{Error, Result};
use crate::nerf::{
    nerf_forward, render_rays, run_trunk, DEFAULT_CHUNK, NerfModel, NerfNetworkConfig, RadianceField, RadianceSample, SamplingConfig,
    SceneBounds,
};
use crate::nn::{Linear, Mlp, ParamStore};
use crate::rendering::{generate_rays, positional_encode_tensor, CameraPose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiStyleConfig {
    /// Number of stage-2 trunk layers reused frozen; `None` means all of them.
    pub trunk_split: Option<usize>,
    pub style_hidden: usize,
    pub style_dim: usize,
    pub view_dim: usize,
    pub rgb_hidden: usize,
    pub density_aware: bool,
    pub density_hidden: usize,
    pub density_style_dim: usize,
    pub sampling: SamplingConfig,
    pub batch_rays: usize,
    pub learning_rate: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_steps: u64,
    pub steps: u64,
    pub seed: u64,
}

impl Default for MultiStyleConfig {
    fn default() -> Self {
        Self {
            trunk_split: None,
            style_hidden: 256,
            style_dim: 128,
            view_dim: 128,
            rgb_hidden: 128,
            density_aware: false,
            density_hidden: 128,
            density_style_dim: 64,
            sampling: SamplingConfig::default(),
            batch_rays: 1024,
            learning_rate: 5e-4,
            lr_decay_rate: 0.1,
            lr_decay_steps: 250_000,
            steps: 10_000,
            seed: 0,
        }
    }
}

impl MultiStyleConfig {
    pub fn validate(&self, network: &NerfNetworkConfig) -> Result<()> {
        self.sampling.validate()?;
        let split = self.split(network);
        if split == 0 || split > network.depth {
            return Err(Error::validation(format!("trunk_split must lie in 1..={}, got {split}", network.depth)));
        }
        let dims = [self.style_hidden, self.style_dim, self.view_dim, self.rgb_hidden];
        if dims.contains(&0) || (self.density_aware && (self.density_hidden == 0 || self.density_style_dim == 0)) {
            return Err(Error::validation("head widths must be at least 1"));
        }
        if self.batch_rays == 0 {
            return Err(Error::validation("batch_rays must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lr_decay_rate > 0.0 && self.lr_decay_rate <= 1.0) || self.lr_decay_steps == 0 {
            return Err(Error::validation("lr_decay_rate must lie in (0, 1] and lr_decay_steps must be positive"));
        }
        Ok(())
    }

    pub fn split(&self, network: &NerfNetworkConfig) -> usize {
        self.trunk_split.unwrap_or(network.depth)
    }

    pub fn learning_rate_at(&self, step: u64) -> f64 {
        self.learning_rate * self.lr_decay_rate.powf(step as f64 / self.lr_decay_steps as f64)
    }
}

/// The first `split` stage-2 trunk layers, held as constants.
#[derive(Clone, Debug)]
pub struct FrozenTrunk {
    store: ParamStore,
    layers: Vec<Linear>,
    network: NerfNetworkConfig,
}

impl FrozenTrunk {
    fn from_store(store: ParamStore, network: &NerfNetworkConfig, split: usize) -> Result<Self> {
        if store.is_trainable() {
            return Err(Error::state("the trunk must be held in a frozen store"));
        }
        let layers = (0..split)
            .map(|i| store.linear_from_existing(&format!("trunk.{i}")))
            .collect::<Result<Vec<_>>>()?;
        if store.len() != 2 * split {
            return Err(Error::state(format!("frozen trunk holds {} tensors, expected {}", store.len(), 2 * split)));
        }
        Ok(Self {
            store,
            layers,
            network: network.clone(),
        })
    }

    pub fn from_nerf(nerf: &NerfModel, split: usize) -> Result<Self> {
        let tensors = nerf.fine.trunk_tensors(split)?;
        Self::from_store(ParamStore::from_tensors(&tensors, "", nerf.device())?, &nerf.config.network, split)
    }

    pub fn digest(&self) -> Result<String> {
        self.store.digest()
    }

    pub fn output_dim(&self) -> usize {
        self.network.width
    }

    pub fn forward(&self, encoded_positions: &Tensor) -> Result<Tensor> {
        run_trunk(&self.layers, &self.network.skips, encoded_positions)
    }
}

/// One set of trainable heads (`{prefix}style`, `view`, `rgb`, `alpha`, `style_density`).
#[derive(Clone, Debug)]
pub struct HeadSet {
    pub style: Mlp,
    pub view: Linear,
    pub rgb: Mlp,
    pub alpha: Linear,
    pub style_density: Option<Mlp>,
}

impl HeadSet {
    /// `alpha_init` (the stage-2 density head) seeds `alpha` when its input width matches;
    /// density-aware columns start at zero so training begins from the stage-2 geometry.
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &MultiStyleConfig,
        trunk_dim: usize,
        direction_dim: usize,
        stats_dim: usize,
        alpha_init: Option<&Linear>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let style = Mlp::new(store, &format!("{prefix}style"), &[stats_dim, config.style_hidden, config.style_dim], rng)?;
        let view = store.linear(&format!("{prefix}view"), trunk_dim + direction_dim, config.view_dim, rng)?;
        let rgb = Mlp::new(store, &format!("{prefix}rgb"), &[config.style_dim + config.view_dim, config.rgb_hidden, 3], rng)?;
        let style_density = if config.density_aware {
            Some(Mlp::new(
                store,
                &format!("{prefix}style_density"),
                &[stats_dim, config.density_hidden, config.density_style_dim],
                rng,
            )?)
        } else {
            None
        };
        let extra = if config.density_aware { config.density_style_dim } else { 0 };
        let alpha_name = format!("{prefix}alpha");
        let alpha = match alpha_init.filter(|l| l.in_dim() == trunk_dim && l.out_dim() == 1) {
            Some(init) => {
                let weight = if extra > 0 {
                    Tensor::cat(&[&init.weight, &Tensor::zeros((extra, 1), DType::F32, store.device())?], 0)?
                } else {
                    init.weight.clone()
                };
                store.insert(format!("{alpha_name}.weight"), weight.detach())?;
                store.insert(format!("{alpha_name}.bias"), init.bias.detach())?;
                store.linear_from_existing(&alpha_name)?
            }
            None => store.linear(&alpha_name, trunk_dim + extra, 1, rng)?,
        };
        Ok(Self {
            style,
            view,
            rgb,
            alpha,
            style_density,
        })
    }

    fn from_store(store: &ParamStore, prefix: &str, density_aware: bool) -> Result<Self> {
        let mlp = |name: &str, n: usize| -> Result<Mlp> {
            Ok(Mlp {
                layers: (0..n)
                    .map(|i| store.linear_from_existing(&format!("{prefix}{name}.{i}")))
                    .collect::<Result<_>>()?,
            })
        };
        Ok(Self {
            style: mlp("style", 2)?,
            view: store.linear_from_existing(&format!("{prefix}view"))?,
            rgb: mlp("rgb", 2)?,
            alpha: store.linear_from_existing(&format!("{prefix}alpha"))?,
            style_density: if density_aware { Some(mlp("style_density", 2)?) } else { None },
        })
    }
}

/// A [`RadianceField`] for a batch of rays, each conditioned on one of `K` styles.
pub struct StyledField<'a> {
    trunk: &'a FrozenTrunk,
    heads: &'a HeadSet,
    style_embedding: Tensor,
    density_embedding: Option<Tensor>,
    ray_styles: Tensor,
    rays: usize,
}

impl<'a> StyledField<'a> {
    /// `statistics` is `[K, stats_dim]`; `ray_styles[r]` picks the row used by ray `r`.
    pub fn new(trunk: &'a FrozenTrunk, heads: &'a HeadSet, statistics: &Tensor, ray_styles: &[u32]) -> Result<Self> {
        let (k, dim) = statistics.dims2()?;
        if dim != heads.style.in_dim() {
            return Err(Error::validation(format!(
                "style statistics have {dim} values, the style head expects {}",
                heads.style.in_dim()
            )));
        }
        if ray_styles.is_empty() || ray_styles.iter().any(|s| *s as usize >= k) {
            return Err(Error::validation(format!("ray style indices must lie in 0..{k}")));
        }
        Ok(Self {
            trunk,
            heads,
            style_embedding: heads.style.forward(statistics)?,
            density_embedding: heads.style_density.as_ref().map(|m| m.forward(statistics)).transpose()?,
            ray_styles: Tensor::new(ray_styles, statistics.device())?,
            rays: ray_styles.len(),
        })
    }
}

impl RadianceField for StyledField<'_> {
    fn query(&self, positions: &Tensor, directions: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = positions.dims()[0];
        if !n.is_multiple_of(self.rays) {
            return Err(Error::validation(format!("{n} samples do not divide evenly over {} rays", self.rays)));
        }
        let per_ray = n / self.rays;
        let index = self.ray_styles.unsqueeze(1)?.broadcast_as((self.rays, per_ray))?.contiguous()?.flatten_all()?;
        let net = &self.trunk.network;
        let x = positional_encode_tensor(positions, net.position_levels)?;
        let d = positional_encode_tensor(directions, net.direction_levels)?;
        let h = self.trunk.forward(&x)?;
        let alpha_in = match &self.density_embedding {
            Some(table) => Tensor::cat(&[&h, &table.index_select(&index, 0)?], D::Minus1)?,
            None => h.clone(),
        };
        let sigma = self.heads.alpha.forward(&alpha_in)?.relu()?.squeeze(D::Minus1)?;
        let view = self.heads.view.forward(&Tensor::cat(&[&h, &d], D::Minus1)?)?.relu()?;
        let style = self.style_embedding.index_select(&index, 0)?;
        let rgb = sigmoid(&self.heads.rgb.forward(&Tensor::cat(&[&style, &view], D::Minus1)?)?)?;
        Ok((sigma, rgb))
    }
}

/// A training camera kept in the stage-3 checkpoint so renders can refer to poses by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub frame_id: String,
    pub split: Split,
    pub transform_matrix: [[f64; 4]; 4],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraRecord {
    pub fn from_pose(frame_id: &str, split: Split, pose: &CameraPose) -> Self {
        let m = pose.to_matrix();
        Self {
            frame_id: frame_id.to_string(),
            split,
            transform_matrix: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
            focal: pose.focal,
            width: pose.width,
            height: pose.height,
        }
    }

    pub fn pose(&self) -> Result<CameraPose> {
        let m = Matrix4::from_fn(|r, c| self.transform_matrix[r][c]);
        CameraPose::from_matrix(&m, self.focal, self.width, self.height)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    multistyle: MultiStyleConfig,
    network: NerfNetworkConfig,
    bounds: SceneBounds,
    registry: StyleRegistry,
    cameras: Vec<CameraRecord>,
    steps_trained: u64,
}

const FROZEN_PREFIX: &str = "frozen.";
const HEADS_PREFIX: &str = "heads.";

#[derive(Clone, Debug)]
pub struct MultiStyleModel {
    pub config: MultiStyleConfig,
    pub network: NerfNetworkConfig,
    pub bounds: SceneBounds,
    pub trunk: FrozenTrunk,
    heads_store: ParamStore,
    pub coarse: HeadSet,
    pub fine: HeadSet,
    pub registry: StyleRegistry,
    pub cameras: Vec<CameraRecord>,
    pub steps_trained: u64,
}

impl MultiStyleModel {
    pub fn init(
        config: &MultiStyleConfig,
        nerf: &NerfModel,
        registry: StyleRegistry,
        cameras: Vec<CameraRecord>,
    ) -> Result<Self> {
        config.validate(&nerf.config.network)?;
        registry.validate()?;
        let split = config.split(&nerf.config.network);
        let trunk = FrozenTrunk::from_nerf(nerf, split)?;
        let density = (split == nerf.config.network.depth).then(|| nerf.fine.density_head());
        Self::assemble(config, &nerf.config.network, nerf.bounds, trunk, density, registry, cameras)
    }

    fn assemble(
        config: &MultiStyleConfig,
        network: &NerfNetworkConfig,
        bounds: SceneBounds,
        trunk: FrozenTrunk,
        density: Option<&Linear>,
        registry: StyleRegistry,
        cameras: Vec<CameraRecord>,
    ) -> Result<Self> {
        let device = trunk.store.device().clone();
        let mut store = ParamStore::trainable(&device);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (trunk_dim, dir_dim, stats_dim) = (trunk.output_dim(), network.direction_dim(), registry.flattened_dim());
        let coarse = HeadSet::new(&mut store, "coarse.", config, trunk_dim, dir_dim, stats_dim, density, &mut rng)?;
        let fine = HeadSet::new(&mut store, "fine.", config, trunk_dim, dir_dim, stats_dim, density, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            network: network.clone(),
            bounds,
            trunk,
            heads_store: store,
            coarse,
            fine,
            registry,
            cameras,
            steps_trained: 0,
        })
    }

    pub fn device(&self) -> &Device {
        self.heads_store.device()
    }

    pub fn heads_store(&self) -> &ParamStore {
        &self.heads_store
    }

    pub fn trunk_digest(&self) -> Result<String> {
        self.trunk.digest()
    }

    /// Statistics of a registered style.
    pub fn style(&self, id: &str) -> Result<StyleStatistics> {
        self.registry
            .statistics(id)
            .ok_or_else(|| Error::validation(format!("unknown style {id}")))?
    }

    pub fn camera(&self, index: usize) -> Result<CameraPose> {
        self.cameras
            .get(index)
            .ok_or_else(|| Error::validation(format!("pose index {index} is out of range (0..{})", self.cameras.len())))?
            .pose()
    }

    /// `[K, D]` tensor of `stats`, checked against the heads' input width.
    pub fn statistics_tensor(&self, stats: &[&StyleStatistics]) -> Result<Tensor> {
        let dim = self.coarse.style.in_dim();
        let mut flat = Vec::with_capacity(stats.len() * dim);
        for s in stats {
            s.validate()?;
            if s.flattened_dim() != dim {
                return Err(Error::validation(format!(
                    "style statistics have {} values, the model expects {dim}",
                    s.flattened_dim()
                )));
            }
            flat.extend(s.flatten());
        }
        Ok(Tensor::from_vec(flat, (stats.len(), dim), self.device())?)
    }

    /// Point queries through the fine heads.
    pub fn forward(&self, positions: &[[f64; 3]], directions: &[[f64; 3]], stats: &StyleStatistics) -> Result<Vec<RadianceSample>> {
        let table = self.statistics_tensor(&[stats])?;
        let field = StyledField::new(&self.trunk, &self.fine, &table, &[0])?;
        nerf_forward(positions, directions, &field, self.device())
    }

    /// Full coarse-to-fine render under `stats`; returns the image and its opacity map.
    ///
    /// Without a seed, samples sit at bin centers and CDF midpoints; with one,
    /// they are jittered by an RNG seeded from it. Either way the output is a
    /// pure function of the arguments.
    pub fn render_view(&self, pose: &CameraPose, stats: &StyleStatistics, seed: Option<u64>) -> Result<(ImageRgb, Vec<f32>)> {
        if self.steps_trained == 0 {
            return Err(Error::state("the multi-style model has not been trained"));
        }
        self.render_view_unchecked(pose, stats, seed)
    }

    pub(crate) fn render_view_unchecked(
        &self,
        pose: &CameraPose,
        stats: &StyleStatistics,
        seed: Option<u64>,
    ) -> Result<(ImageRgb, Vec<f32>)> {
        let table = self.statistics_tensor(&[stats])?;
        let sampling = SamplingConfig {
            perturb: seed.is_some(),
            ..self.config.sampling.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
        let rays = generate_rays(pose, self.bounds.near, self.bounds.far)?;
        let mut data = Vec::with_capacity(rays.len() * 3);
        let mut opacity = Vec::with_capacity(rays.len());
        for chunk in rays.chunks(DEFAULT_CHUNK) {
            let styles = vec![0u32; chunk.len()];
            let coarse = StyledField::new(&self.trunk, &self.coarse, &table, &styles)?;
            let fine = StyledField::new(&self.trunk, &self.fine, &table, &styles)?;
            let out = render_rays(chunk, &coarse, &fine, &sampling, self.bounds.background, &mut rng, self.device())?;
            let pass = out.best();
            data.extend(pass.color.clamp(0f32, 1f32)?.flatten_all()?.to_vec1::<f32>()?);
            opacity.extend(pass.opacity.to_vec1::<f32>()?);
        }
        Ok((ImageRgb::new(pose.width, pose.height, data)?, opacity))
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        let config = CheckpointConfig {
            multistyle: self.config.clone(),
            network: self.network.clone(),
            bounds: self.bounds,
            registry: self.registry.clone(),
            cameras: self.cameras.clone(),
            steps_trained: self.steps_trained,
        };
        let mut tensors = self.trunk.store.export(FROZEN_PREFIX)?;
        tensors.extend(self.heads_store.export(HEADS_PREFIX)?);
        Ok(
            ModelCheckpoint::new(Stage::Multistyle, serde_json::to_value(&config).expect("config serializes"), tensors)
                .with_digest(TRUNK_DIGEST, self.trunk_digest()?)
                .with_digest(REGISTRY_DIGEST, self.registry.digest()),
        )
    }

    /// Verifies the stored trunk and registry against their recorded digests.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint, device: &Device) -> Result<Self> {
        ckpt.expect_stage(Stage::Multistyle)?;
        let config: CheckpointConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::state(format!("multi-style checkpoint config is unreadable: {e}")))?;
        config.multistyle.validate(&config.network)?;
        let split = config.multistyle.split(&config.network);
        let frozen = ParamStore::from_tensors(&ckpt.tensors, FROZEN_PREFIX, device)?;
        let trunk = FrozenTrunk::from_store(frozen, &config.network, split)?;
        ckpt.verify_digest(TRUNK_DIGEST, &trunk.digest()?)?;
        ckpt.verify_digest(REGISTRY_DIGEST, &config.registry.digest())?;
        let mut model = Self::assemble(
            &config.multistyle,
            &config.network,
            config.bounds,
            trunk,
            None,
            config.registry,
            config.cameras,
        )?;
        model.heads_store.load(&ckpt.tensors, HEADS_PREFIX)?;
        model.coarse = HeadSet::from_store(&model.heads_store, "coarse.", model.config.density_aware)?;
        model.fine = HeadSet::from_store(&model.heads_store, "fine.", model.config.density_aware)?;
        model.steps_trained = config.steps_trained;
        Ok(model)
    }
}
