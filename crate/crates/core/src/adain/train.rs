use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adain_loss, adain_transform_tensor, channel_stats, Decoder, Encoder, EncoderConfig, StyleStatistics};
use crate::data::checkpoint::{ModelCheckpoint, Stage, ENCODER_DIGEST};
use crate::data::images::ImageRgb;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::progress::{step_seed, Progress};

const DECODER_PREFIX: &str = "decoder.";

/// The decoder halves resolution three times, so stylized images must be multiples of this.
pub const SIZE_MULTIPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdainConfig {
    pub encoder: EncoderConfig,
    pub lambda: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub crop_size: usize,
    pub resize_shorter: usize,
    pub seed: u64,
}

impl Default for AdainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            lambda: 10.0,
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-4,
            crop_size: 256,
            resize_shorter: 512,
            seed: 0,
        }
    }
}

impl AdainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::validation(format!("lambda must be a nonnegative number, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        check_size("crop_size", self.crop_size)?;
        if self.resize_shorter < self.crop_size {
            return Err(Error::validation(format!(
                "resize_shorter ({}) must be at least crop_size ({})",
                self.resize_shorter, self.crop_size
            )));
        }
        Ok(())
    }
}

fn check_size(what: &str, size: usize) -> Result<()> {
    if size < super::MIN_IMAGE_SIZE || !size.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::validation(format!(
            "{what} must be a multiple of {SIZE_MULTIPLE} and at least {}, got {size}",
            super::MIN_IMAGE_SIZE
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    adain: AdainConfig,
    encoder_identifier: String,
    steps_trained: u64,
}

/// Frozen encoder plus trained decoder.
#[derive(Clone, Debug)]
pub struct AdainModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub config: AdainConfig,
    pub steps_trained: u64,
}

impl AdainModel {
    /// Encoder from the config, decoder freshly initialized from `config.seed`.
    pub fn init(config: &AdainConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config.encoder, device)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let decoder = Decoder::new(ParamStore::trainable(device), &mut rng)?;
        Ok(Self {
            encoder,
            decoder,
            config: config.clone(),
            steps_trained: 0,
        })
    }

    pub fn device(&self) -> &Device {
        self.decoder.store().device()
    }

    pub fn style_statistics(&self, image: &ImageRgb) -> Result<StyleStatistics> {
        super::extract_style_statistics(&self.encoder, image, self.device())
    }

    /// `decode(α·AdaIN(f_c, style) + (1 − α)·f_c)`, clamped to `[0, 1]`.
    pub fn stylize(&self, content: &ImageRgb, style: &ImageRgb, alpha: f64) -> Result<ImageRgb> {
        let stats = self.style_statistics(style)?;
        self.stylize_with_statistics(content, &stats, alpha)
    }

    /// Like [`AdainModel::stylize`] but with precomputed statistics; only the deepest layer is used.
    pub fn stylize_with_statistics(&self, content: &ImageRgb, stats: &StyleStatistics, alpha: f64) -> Result<ImageRgb> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::validation(format!("stylization strength must lie in [0, 1], got {alpha}")));
        }
        check_size("content width", content.width)?;
        check_size("content height", content.height)?;
        let deepest = stats.deepest().ok_or_else(|| Error::validation("style statistics have no layers"))?;
        let dev = self.device();
        let taps = self.encoder.encode_tensor(&content.to_tensor(dev)?)?;
        let f_c = taps.last().expect("encoder has taps");
        let mean = Tensor::new(deepest.mean.as_slice(), dev)?.unsqueeze(0)?;
        let std = Tensor::new(deepest.std.as_slice(), dev)?.unsqueeze(0)?;
        let t = adain_transform_tensor(f_c, &mean, &std)?;
        let blended = if alpha == 1.0 {
            t
        } else {
            ((t * alpha)? + (f_c * (1.0 - alpha))?)?
        };
        ImageRgb::from_tensor(&self.decoder.forward(&blended)?.squeeze(0)?)
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        let config = CheckpointConfig {
            adain: self.config.clone(),
            encoder_identifier: self.encoder.identifier().to_string(),
            steps_trained: self.steps_trained,
        };
        let config = serde_json::to_value(&config).expect("config serializes");
        Ok(ModelCheckpoint::new(Stage::Adain, config, self.decoder.store().export(DECODER_PREFIX)?)
            .with_digest(ENCODER_DIGEST, self.encoder.digest()?))
    }

    /// Rebuilds the encoder from the stored config and refuses to load if its digest differs.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint, device: &Device) -> Result<Self> {
        ckpt.expect_stage(Stage::Adain)?;
        let config: CheckpointConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::state(format!("AdaIN checkpoint config is unreadable: {e}")))?;
        let mut model = Self::init(&config.adain, device)?;
        ckpt.verify_digest(ENCODER_DIGEST, &model.encoder.digest()?)?;
        model.decoder.store().load(&ckpt.tensors, DECODER_PREFIX)?;
        model.steps_trained = config.steps_trained;
        Ok(model)
    }
}

fn random_crop(image: &ImageRgb, size: usize, rng: &mut impl Rng) -> Result<ImageRgb> {
    let col = rng.gen_range(0..=image.width - size);
    let row = rng.gen_range(0..=image.height - size);
    image.crop(col, row, size, size)
}

fn prepare(images: &[ImageRgb], config: &AdainConfig, what: &str) -> Result<Vec<ImageRgb>> {
    if images.is_empty() {
        return Err(Error::validation(format!("the {what} corpus is empty")));
    }
    Ok(images.iter().map(|img| img.resize_shorter_side(config.resize_shorter)).collect())
}

fn batch_tensor(images: &[ImageRgb], device: &Device) -> Result<Tensor> {
    let tensors = images.iter().map(|i| i.to_tensor(device)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&tensors, 0)?)
}

/// Trains the decoder with `L = Lc + λ·Ls`; the encoder stays frozen.
///
/// Every step draws its crops from an RNG seeded by `(seed, step)`, so a run
/// resumed from a checkpoint sees the same batches as an uninterrupted one.
/// Optimizer moments are not persisted and restart from zero on resume.
pub fn train_adain(
    content: &[ImageRgb],
    styles: &[ImageRgb],
    config: &AdainConfig,
    observer: &mut dyn FnMut(&Progress),
    resume: Option<AdainModel>,
) -> Result<AdainModel> {
    config.validate()?;
    let content = prepare(content, config, "content")?;
    let styles = prepare(styles, config, "style")?;
    let device = Device::Cpu;
    let mut model = match resume {
        Some(m) => {
            if m.encoder.digest()? != Encoder::new(&config.encoder, &device)?.digest()? {
                return Err(Error::state("resumed model was trained with a different encoder"));
            }
            AdainModel { config: config.clone(), ..m }
        }
        None => AdainModel::init(config, &device)?,
    };
    if model.steps_trained >= config.steps {
        return Ok(model);
    }
    let encoder_digest = model.encoder.digest()?;
    let mut optimizer = AdamW::new(
        model.decoder.store().vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let dev = model.device().clone();
    for step in model.steps_trained..config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(config.seed, step));
        let mut c_batch = Vec::with_capacity(config.batch_size);
        let mut s_batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let c = &content[rng.gen_range(0..content.len())];
            let s = &styles[rng.gen_range(0..styles.len())];
            c_batch.push(random_crop(c, config.crop_size, &mut rng)?);
            s_batch.push(random_crop(s, config.crop_size, &mut rng)?);
        }
        let content_taps = model.encoder.encode_tensor(&batch_tensor(&c_batch, &dev)?)?;
        let style_taps = model.encoder.encode_tensor(&batch_tensor(&s_batch, &dev)?)?;
        let (s_mean, s_std) = channel_stats(style_taps.last().expect("taps"), 0.0)?;
        let target = adain_transform_tensor(content_taps.last().expect("taps"), &s_mean, &s_std)?.detach();
        let stylized = model.decoder.forward_raw(&target)?;
        let stylized_taps = model.encoder.encode_tensor(&stylized)?;
        let loss = adain_loss(&stylized_taps, &target, &style_taps, config.lambda)?;
        if !loss.total_value.is_finite() {
            return Err(Error::state(format!("AdaIN loss diverged at step {step}")));
        }
        optimizer.backward_step(&loss.total)?;
        model.steps_trained = step + 1;
        let mut progress = Progress::new(Stage::Adain, step, loss.total_value as f64);
        progress.extra.insert("content_loss".into(), loss.content as f64);
        progress.extra.insert("style_loss".into(), loss.style as f64);
        observer(&progress);
    }
    if model.encoder.digest()? != encoder_digest {
        return Err(Error::state("encoder weights changed during training"));
    }
    Ok(model)
}
