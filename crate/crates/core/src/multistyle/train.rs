use std::collections::BTreeMap;

use candle_core::{Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CameraRecord, MultiStyleConfig, MultiStyleModel, StyledField, StylizedDataset};
use crate::data::checkpoint::Stage;
use crate::data::scene::Split;
use crate::error::{Error, Result};
use crate::nerf::{render_rays, NerfModel, SamplingConfig};
use crate::nn::{mse, psnr_from_mse};
use crate::progress::{step_seed, Progress};
use crate::rendering::{generate_rays, Ray};

/// Training rays of every frame, shared by all styles, plus per-style target colors.
struct RayTable {
    rays: Vec<Ray>,
    /// `targets[style][3 * ray..3 * ray + 3]`.
    targets: Vec<Vec<f32>>,
}

impl RayTable {
    fn new(dataset: &StylizedDataset, frames: &[usize]) -> Result<Self> {
        let mut rays = Vec::new();
        for &n in frames {
            rays.extend(generate_rays(&dataset.poses[n], dataset.near, dataset.far)?);
        }
        let targets = dataset
            .images
            .values()
            .map(|imgs| frames.iter().flat_map(|n| imgs[*n].data.iter().copied()).collect())
            .collect();
        Ok(Self { rays, targets })
    }

    fn batch(&self, picks: &[(u32, usize)], device: &Device) -> Result<(Vec<Ray>, Vec<u32>, Tensor)> {
        let rays = picks.iter().map(|(_, r)| self.rays[*r]).collect();
        let styles = picks.iter().map(|(s, _)| *s).collect();
        let target: Vec<f32> = picks
            .iter()
            .flat_map(|(s, r)| self.targets[*s as usize][3 * r..3 * r + 3].iter().copied())
            .collect();
        Ok((rays, styles, Tensor::from_vec(target, (picks.len(), 3), device)?))
    }
}

fn forward_loss(
    model: &MultiStyleModel,
    table: &Tensor,
    rays: &[Ray],
    styles: &[u32],
    target: &Tensor,
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let coarse = StyledField::new(&model.trunk, &model.coarse, table, styles)?;
    let fine = StyledField::new(&model.trunk, &model.fine, table, styles)?;
    let out = render_rays(rays, &coarse, &fine, sampling, model.bounds.background, rng, model.device())?;
    let mut loss = mse(&out.coarse.color, target)?;
    if let Some(f) = &out.fine {
        loss = (loss + mse(&f.color, target)?)?;
    }
    let per_ray = (&out.best().color - target)?.sqr()?.mean(D::Minus1)?;
    Ok((loss, per_ray))
}

/// Mean squared error per style over a fixed, seeded set of training rays,
/// rendered without jitter. Comparable across checkpoints of one run.
pub fn evaluate_style_losses(
    model: &MultiStyleModel,
    dataset: &StylizedDataset,
    rays_per_style: usize,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let frames = dataset.indices(Split::Train);
    let table_rays = RayTable::new(dataset, &frames)?;
    let stats_table = stats_table(model, dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampling = model.config.sampling.deterministic();
    let mut out = BTreeMap::new();
    for (k, id) in dataset.registry.styles.keys().enumerate() {
        let picks: Vec<(u32, usize)> = (0..rays_per_style).map(|_| (k as u32, rng.gen_range(0..table_rays.rays.len()))).collect();
        let (rays, styles, target) = table_rays.batch(&picks, model.device())?;
        let (_, per_ray) = forward_loss(model, &stats_table, &rays, &styles, &target, &sampling, &mut rng)?;
        out.insert(id.clone(), per_ray.mean_all()?.to_scalar::<f32>()? as f64);
    }
    Ok(out)
}

fn stats_table(model: &MultiStyleModel, dataset: &StylizedDataset) -> Result<Tensor> {
    if model.registry.digest() != dataset.registry.digest() {
        return Err(Error::state("the dataset's style registry differs from the model's"));
    }
    let stats = dataset
        .registry
        .styles
        .values()
        .map(|e| e.style_statistics())
        .collect::<Result<Vec<_>>>()?;
    model.statistics_tensor(&stats.iter().collect::<Vec<_>>())
}

/// Trains the style heads on the N×M grid with a squared photometric loss;
/// the trunk taken from `nerf` stays frozen.
///
/// Each batch draws `(style, ray)` pairs uniformly, so every style gets
/// gradient every step. Step `k` uses an RNG seeded by `(seed, k)`.
/// `resume` must share `nerf`'s trunk and the dataset's registry.
pub fn train_multistyle(
    dataset: &StylizedDataset,
    nerf: &NerfModel,
    config: &MultiStyleConfig,
    observer: &mut dyn FnMut(&Progress),
    resume: Option<MultiStyleModel>,
) -> Result<MultiStyleModel> {
    config.validate(&nerf.config.network)?;
    dataset.validate()?;
    let split = config.split(&nerf.config.network);
    let expected_trunk = nerf.fine.trunk_digest(split)?;
    let mut model = match resume {
        Some(m) => {
            if m.trunk_digest()? != expected_trunk {
                return Err(Error::state("the resumed model's trunk does not match the scene checkpoint"));
            }
            if m.config.density_aware != config.density_aware || m.config.split(&m.network) != split {
                return Err(Error::state("the resumed model has a different head architecture"));
            }
            MultiStyleModel { config: config.clone(), ..m }
        }
        None => {
            let cameras = (0..dataset.poses.len())
                .map(|i| CameraRecord::from_pose(&dataset.frame_ids[i], dataset.splits[i], &dataset.poses[i]))
                .collect();
            MultiStyleModel::init(config, nerf, dataset.registry.clone(), cameras)?
        }
    };
    let table = stats_table(&model, dataset)?;
    if model.steps_trained >= config.steps {
        return Ok(model);
    }
    let frames = dataset.indices(Split::Train);
    if frames.is_empty() {
        return Err(Error::validation("the stylized dataset has no training frames"));
    }
    let rays = RayTable::new(dataset, &frames)?;
    let style_ids = dataset.registry.ids();
    let mut optimizer = AdamW::new(
        model.heads_store().vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    for step in model.steps_trained..config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(config.seed, step));
        let picks: Vec<(u32, usize)> = (0..config.batch_rays)
            .map(|_| (rng.gen_range(0..style_ids.len()) as u32, rng.gen_range(0..rays.rays.len())))
            .collect();
        let (batch, styles, target) = rays.batch(&picks, model.device())?;
        let (loss, per_ray) = forward_loss(&model, &table, &batch, &styles, &target, &config.sampling, &mut rng)?;
        let loss_value = loss.to_scalar::<f32>()? as f64;
        if !loss_value.is_finite() {
            return Err(Error::state(format!("multi-style loss diverged at step {step}")));
        }
        optimizer.set_learning_rate(config.learning_rate_at(step));
        optimizer.backward_step(&loss)?;
        model.steps_trained = step + 1;

        let per_ray = per_ray.to_vec1::<f32>()?;
        let mut sums = vec![(0.0f64, 0usize); style_ids.len()];
        for (s, e) in styles.iter().zip(&per_ray) {
            sums[*s as usize].0 += *e as f64;
            sums[*s as usize].1 += 1;
        }
        let mut progress = Progress::new(Stage::Multistyle, step, loss_value);
        progress.psnr = Some(psnr_from_mse(per_ray.iter().map(|v| *v as f64).sum::<f64>() / per_ray.len() as f64));
        for (id, (sum, count)) in style_ids.iter().zip(sums) {
            if count > 0 {
                progress.extra.insert(format!("loss/{id}"), sum / count as f64);
            }
        }
        observer(&progress);
    }
    if model.trunk_digest()? != expected_trunk {
        return Err(Error::state("trunk weights changed during training"));
    }
    Ok(model)
}
