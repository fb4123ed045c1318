use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_image, render_rays, SamplingConfig};
use super::{NerfNetwork, NerfNetworkConfig};
use crate::data::checkpoint::{ModelCheckpoint, Stage, TRUNK_DIGEST};
use crate::data::images::ImageRgb;
use crate::data::scene::{SceneDataset, Split};
use crate::error::{Error, Result};
use crate::nn::{mse, psnr_from_mse, ParamStore};
use crate::progress::{step_seed, Progress};
use crate::rendering::{generate_rays, CameraPose, Ray};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NerfConfig {
    pub network: NerfNetworkConfig,
    pub sampling: SamplingConfig,
    pub batch_rays: usize,
    pub learning_rate: f64,
    /// The learning rate is multiplied by `lr_decay_rate` every `lr_decay_steps` steps (continuously).
    pub lr_decay_rate: f64,
    pub lr_decay_steps: u64,
    pub steps: u64,
    pub seed: u64,
    /// Validation PSNR cadence in steps; 0 disables periodic validation.
    pub val_every: u64,
    /// Validation views rendered each time; 0 means all.
    pub val_views: usize,
}

impl Default for NerfConfig {
    fn default() -> Self {
        Self {
            network: NerfNetworkConfig::default(),
            sampling: SamplingConfig::default(),
            batch_rays: 1024,
            learning_rate: 5e-4,
            lr_decay_rate: 0.1,
            lr_decay_steps: 250_000,
            steps: 5000,
            seed: 0,
            val_every: 0,
            val_views: 0,
        }
    }
}

impl NerfConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.sampling.validate()?;
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

    pub fn learning_rate_at(&self, step: u64) -> f64 {
        self.learning_rate * self.lr_decay_rate.powf(step as f64 / self.lr_decay_steps as f64)
    }
}

/// Depth range and background color the model was fitted with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub near: f64,
    pub far: f64,
    pub background: [f32; 3],
}

impl SceneBounds {
    pub fn of(dataset: &SceneDataset) -> Self {
        Self {
            near: dataset.near,
            far: dataset.far,
            background: dataset.background(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    nerf: NerfConfig,
    bounds: SceneBounds,
    steps_trained: u64,
}

const COARSE_PREFIX: &str = "coarse.";
const FINE_PREFIX: &str = "fine.";

#[derive(Clone, Debug)]
pub struct NerfModel {
    pub config: NerfConfig,
    pub bounds: SceneBounds,
    pub coarse: NerfNetwork,
    pub fine: NerfNetwork,
    pub steps_trained: u64,
}

impl NerfModel {
    pub fn init(config: &NerfConfig, bounds: SceneBounds, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let coarse = NerfNetwork::new(&config.network, ParamStore::trainable(device), &mut rng)?;
        let fine = NerfNetwork::new(&config.network, ParamStore::trainable(device), &mut rng)?;
        Ok(Self {
            config: config.clone(),
            bounds,
            coarse,
            fine,
            steps_trained: 0,
        })
    }

    pub fn device(&self) -> &Device {
        self.fine.device()
    }

    /// Digest of the fine network's full trunk, the part later reused frozen.
    pub fn trunk_digest(&self) -> Result<String> {
        self.fine.trunk_digest(self.config.network.depth)
    }

    pub fn render_rays(&self, rays: &[Ray], sampling: &SamplingConfig, rng: &mut impl Rng) -> Result<super::RenderOutput> {
        render_rays(rays, &self.coarse, &self.fine, sampling, self.bounds.background, rng, self.device())
    }

    /// Deterministic full-image render; returns the image and accumulated opacity.
    pub fn render(&self, pose: &CameraPose) -> Result<(ImageRgb, Vec<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        render_image(
            pose,
            self.bounds.near,
            self.bounds.far,
            &self.coarse,
            &self.fine,
            &self.config.sampling.deterministic(),
            self.bounds.background,
            &mut rng,
            self.device(),
        )
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        let config = CheckpointConfig {
            nerf: self.config.clone(),
            bounds: self.bounds,
            steps_trained: self.steps_trained,
        };
        let mut tensors = self.coarse.store().export(COARSE_PREFIX)?;
        tensors.extend(self.fine.store().export(FINE_PREFIX)?);
        Ok(
            ModelCheckpoint::new(Stage::Nerf, serde_json::to_value(&config).expect("config serializes"), tensors)
                .with_digest(TRUNK_DIGEST, self.trunk_digest()?),
        )
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint, device: &Device) -> Result<Self> {
        ckpt.expect_stage(Stage::Nerf)?;
        let config: CheckpointConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::state(format!("NeRF checkpoint config is unreadable: {e}")))?;
        let mut model = Self::init(&config.nerf, config.bounds, device)?;
        model.coarse.store().load(&ckpt.tensors, COARSE_PREFIX)?;
        model.fine.store().load(&ckpt.tensors, FINE_PREFIX)?;
        ckpt.verify_digest(TRUNK_DIGEST, &model.trunk_digest()?)?;
        model.steps_trained = config.steps_trained;
        Ok(model)
    }
}

/// Mean PSNR over the views of `split` (the first `max_views` of them when nonzero).
pub fn evaluate_split(model: &NerfModel, dataset: &SceneDataset, split: Split, max_views: usize) -> Result<f64> {
    let mut indices = dataset.indices(split);
    if max_views > 0 {
        indices.truncate(max_views);
    }
    if indices.is_empty() {
        return Err(Error::validation(format!("the scene has no {split:?} views")));
    }
    let mut total = 0.0;
    for &i in &indices {
        let (img, _) = model.render(&dataset.poses[i])?;
        total += psnr_from_mse(img.mse(&dataset.images[i]));
    }
    Ok(total / indices.len() as f64)
}

/// All pixels of the given views as rays with their target colors.
pub(crate) fn pixel_rays(poses: &[&CameraPose], images: &[&ImageRgb], near: f64, far: f64) -> Result<(Vec<Ray>, Vec<f32>)> {
    let mut rays = Vec::new();
    let mut colors = Vec::new();
    for (pose, img) in poses.iter().zip(images) {
        if (img.width, img.height) != (pose.width, pose.height) {
            return Err(Error::validation(format!(
                "image is {}×{} but its camera is {}×{}",
                img.width, img.height, pose.width, pose.height
            )));
        }
        rays.extend(generate_rays(pose, near, far)?);
        colors.extend_from_slice(&img.data);
    }
    Ok((rays, colors))
}

/// Fits coarse and fine networks to the training views with a squared
/// photometric loss on random ray batches.
///
/// Step `k` draws its rays and jitter from an RNG seeded by `(seed, k)`.
/// Optimizer moments restart from zero when resuming.
pub fn train_nerf(
    dataset: &SceneDataset,
    config: &NerfConfig,
    observer: &mut dyn FnMut(&Progress),
    resume: Option<NerfModel>,
) -> Result<NerfModel> {
    config.validate()?;
    dataset.validate()?;
    let train = dataset.indices(Split::Train);
    if train.len() < 2 {
        return Err(Error::validation(format!("training needs at least 2 views, the scene has {}", train.len())));
    }
    let device = Device::Cpu;
    let bounds = SceneBounds::of(dataset);
    let mut model = match resume {
        Some(m) => {
            if m.config.network != config.network {
                return Err(Error::state("resumed checkpoint has a different network architecture"));
            }
            NerfModel {
                config: config.clone(),
                bounds,
                ..m
            }
        }
        None => NerfModel::init(config, bounds, &device)?,
    };
    if model.steps_trained >= config.steps {
        return Ok(model);
    }
    let poses: Vec<_> = train.iter().map(|i| &dataset.poses[*i]).collect();
    let images: Vec<_> = train.iter().map(|i| &dataset.images[*i]).collect();
    let (rays, colors) = pixel_rays(&poses, &images, dataset.near, dataset.far)?;

    let mut vars = model.coarse.store().vars();
    vars.extend(model.fine.store().vars());
    let mut optimizer = AdamW::new(
        vars,
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let has_val = !dataset.indices(Split::Val).is_empty();
    for step in model.steps_trained..config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(config.seed, step));
        let picks: Vec<usize> = (0..config.batch_rays).map(|_| rng.gen_range(0..rays.len())).collect();
        let batch: Vec<Ray> = picks.iter().map(|i| rays[*i]).collect();
        let target: Vec<f32> = picks.iter().flat_map(|i| colors[3 * i..3 * i + 3].iter().copied()).collect();
        let target = Tensor::from_vec(target, (batch.len(), 3), &device)?;

        let out = model.render_rays(&batch, &config.sampling, &mut rng)?;
        let coarse_loss = mse(&out.coarse.color, &target)?;
        let loss = match &out.fine {
            Some(fine) => (&coarse_loss + mse(&fine.color, &target)?)?,
            None => coarse_loss,
        };
        let loss_value = loss.to_scalar::<f32>()? as f64;
        if !loss_value.is_finite() {
            return Err(Error::state(format!("NeRF loss diverged at step {step}")));
        }
        let best_mse = mse(&out.best().color, &target)?.to_scalar::<f32>()? as f64;
        optimizer.set_learning_rate(config.learning_rate_at(step));
        optimizer.backward_step(&loss)?;
        model.steps_trained = step + 1;

        let mut progress = Progress::new(Stage::Nerf, step, loss_value);
        progress.psnr = Some(psnr_from_mse(best_mse));
        progress.extra.insert("lr".into(), config.learning_rate_at(step));
        let last = step + 1 == config.steps;
        if has_val && config.val_every > 0 && ((step + 1) % config.val_every == 0 || last) {
            let val = evaluate_split(&model, dataset, Split::Val, config.val_views)?;
            progress.extra.insert("val_psnr".into(), val);
        }
        observer(&progress);
    }
    Ok(model)
}
