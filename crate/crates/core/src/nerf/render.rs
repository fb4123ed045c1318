use candle_core::{Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RadianceField;
use crate::data::images::ImageRgb;
use crate::error::{Error, Result};
use crate::rendering::{
    composite_tensor, generate_rays, hierarchical_sample, merge_sorted, stratified_sample, CameraPose, ConstantSource,
    Ray, RngSource, SequenceSource,
};

/// Rays rendered per forward pass when drawing whole images.
pub const DEFAULT_CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    /// Extra samples for the fine pass; 0 disables it.
    pub n_fine: usize,
    /// Jitter samples inside their bins. When off, coarse samples sit at bin
    /// centers and fine samples at evenly spaced CDF quantiles.
    pub perturb: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 128,
            perturb: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_coarse == 0 {
            return Err(Error::validation("n_coarse must be at least 1"));
        }
        Ok(())
    }

    pub fn deterministic(&self) -> Self {
        Self {
            perturb: false,
            ..self.clone()
        }
    }
}

/// One compositing pass over a batch of rays.
#[derive(Clone, Debug)]
pub struct RenderPass {
    /// `[R, 3]`, background already blended in.
    pub color: Tensor,
    /// Accumulated opacity, `[R]`.
    pub opacity: Tensor,
    /// Quadrature weights, `[R, S]`.
    pub weights: Tensor,
    pub t_values: Vec<Vec<f64>>,
}

impl RenderPass {
    pub fn samples_per_ray(&self) -> usize {
        self.t_values.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub coarse: RenderPass,
    pub fine: Option<RenderPass>,
}

impl RenderOutput {
    /// The fine pass when present, otherwise the coarse one.
    pub fn best(&self) -> &RenderPass {
        self.fine.as_ref().unwrap_or(&self.coarse)
    }
}

fn render_pass(
    rays: &[Ray],
    t_values: Vec<Vec<f64>>,
    field: &dyn RadianceField,
    background: [f32; 3],
    device: &Device,
) -> Result<RenderPass> {
    let r = rays.len();
    let s = t_values[0].len();
    let mut positions = Vec::with_capacity(r * s * 3);
    let mut directions = Vec::with_capacity(r * s * 3);
    let mut deltas = Vec::with_capacity(r * s);
    for (ray, ts) in rays.iter().zip(&t_values) {
        for (i, t) in ts.iter().enumerate() {
            let p = ray.at(*t);
            positions.extend(p.iter().map(|v| *v as f32));
            directions.extend(ray.direction.iter().map(|v| *v as f32));
            let next = ts.get(i + 1).copied().unwrap_or(ray.far);
            deltas.push((next - t).max(0.0) as f32);
        }
    }
    let positions = Tensor::from_vec(positions, (r * s, 3), device)?;
    let directions = Tensor::from_vec(directions, (r * s, 3), device)?;
    let deltas = Tensor::from_vec(deltas, (r, s), device)?;
    let (sigma, rgb) = field.query(&positions, &directions)?;
    let out = composite_tensor(&sigma.reshape((r, s))?, &deltas, &rgb.reshape((r, s, 3))?)?;
    let bg = Tensor::new(&background, device)?.unsqueeze(0)?;
    let transparency = (1.0 - &out.opacity)?.unsqueeze(D::Minus1)?;
    let color = (out.color + transparency.broadcast_mul(&bg)?)?;
    Ok(RenderPass {
        color,
        opacity: out.opacity,
        weights: out.weights,
        t_values,
    })
}

/// Coarse pass on stratified depths, then a fine pass over the union of the
/// coarse depths and `n_fine` depths resampled from the coarse weights.
///
/// Interval `k` of the resampling density spans the midpoints around coarse
/// sample `k` (clipped to `[near, far]`) and carries its weight.
pub fn render_rays(
    rays: &[Ray],
    coarse: &dyn RadianceField,
    fine: &dyn RadianceField,
    sampling: &SamplingConfig,
    background: [f32; 3],
    rng: &mut impl Rng,
    device: &Device,
) -> Result<RenderOutput> {
    sampling.validate()?;
    if rays.is_empty() {
        return Err(Error::validation("render_rays needs at least one ray"));
    }
    for ray in rays {
        ray.validate()?;
    }
    let coarse_t = rays
        .iter()
        .map(|ray| {
            if sampling.perturb {
                stratified_sample(ray.near, ray.far, sampling.n_coarse, &mut RngSource(rng))
            } else {
                stratified_sample(ray.near, ray.far, sampling.n_coarse, &mut ConstantSource(0.5))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let coarse_pass = render_pass(rays, coarse_t, coarse, background, device)?;
    if sampling.n_fine == 0 {
        return Ok(RenderOutput {
            coarse: coarse_pass,
            fine: None,
        });
    }
    let weights = coarse_pass.weights.detach().to_vec2::<f32>()?;
    let fine_t = rays
        .iter()
        .zip(&coarse_pass.t_values)
        .zip(&weights)
        .map(|((ray, ts), w)| {
            let mut edges = Vec::with_capacity(ts.len() + 1);
            edges.push(ray.near);
            edges.extend(ts.windows(2).map(|p| 0.5 * (p[0] + p[1])));
            edges.push(ray.far);
            let w: Vec<f64> = w.iter().map(|v| f64::from(*v).max(0.0)).collect();
            let extra = if sampling.perturb {
                hierarchical_sample(&edges, &w, sampling.n_fine, &mut RngSource(rng))?
            } else {
                hierarchical_sample(&edges, &w, sampling.n_fine, &mut SequenceSource::midpoints(sampling.n_fine))?
            };
            Ok(merge_sorted(ts, &extra))
        })
        .collect::<Result<Vec<_>>>()?;
    let fine_pass = render_pass(rays, fine_t, fine, background, device)?;
    Ok(RenderOutput {
        coarse: coarse_pass,
        fine: Some(fine_pass),
    })
}

/// Renders every pixel of `pose`; returns the image and its accumulated-opacity map.
#[allow(clippy::too_many_arguments)]
pub fn render_image(
    pose: &CameraPose,
    near: f64,
    far: f64,
    coarse: &dyn RadianceField,
    fine: &dyn RadianceField,
    sampling: &SamplingConfig,
    background: [f32; 3],
    rng: &mut impl Rng,
    device: &Device,
) -> Result<(ImageRgb, Vec<f32>)> {
    let rays = generate_rays(pose, near, far)?;
    let mut data = Vec::with_capacity(rays.len() * 3);
    let mut opacity = Vec::with_capacity(rays.len());
    for chunk in rays.chunks(DEFAULT_CHUNK) {
        let out = render_rays(chunk, coarse, fine, sampling, background, rng, device)?;
        let pass = out.best();
        data.extend(pass.color.clamp(0f32, 1f32)?.flatten_all()?.to_vec1::<f32>()?);
        opacity.extend(pass.opacity.to_vec1::<f32>()?);
    }
    Ok((ImageRgb::new(pose.width, pose.height, data)?, opacity))
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Constant density inside a slab of depth, constant color.
    struct Slab {
        lo: f32,
        hi: f32,
        sigma: f32,
    }

    impl RadianceField for Slab {
        fn query(&self, positions: &Tensor, _directions: &Tensor) -> Result<(Tensor, Tensor)> {
            let z = positions.narrow(1, 2, 1)?.squeeze(1)?.to_vec1::<f32>()?;
            let sigma: Vec<f32> = z.iter().map(|z| if (self.lo..=self.hi).contains(z) { self.sigma } else { 0.0 }).collect();
            let n = sigma.len();
            Ok((
                Tensor::from_vec(sigma, n, positions.device())?,
                Tensor::full(0.5f32, (n, 3), positions.device())?,
            ))
        }
    }

    fn rays(n: usize) -> Vec<Ray> {
        (0..n)
            .map(|_| Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), 2.0, 6.0).unwrap())
            .collect()
    }

    #[test]
    fn empty_scene_is_background() {
        let empty = Slab { lo: 0.0, hi: 0.0, sigma: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SamplingConfig { n_coarse: 8, n_fine: 8, perturb: true };
        let out = render_rays(&rays(3), &empty, &empty, &cfg, [0.0; 3], &mut rng, &Device::Cpu).unwrap();
        let fine = out.fine.unwrap();
        assert!(fine.color.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
        assert!(fine.opacity.to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sample_counts() {
        let slab = Slab { lo: 3.0, hi: 3.5, sigma: 5.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SamplingConfig { n_coarse: 64, n_fine: 128, perturb: true };
        let out = render_rays(&rays(2), &slab, &slab, &cfg, [1.0; 3], &mut rng, &Device::Cpu).unwrap();
        assert_eq!(out.coarse.samples_per_ray(), 64);
        assert_eq!(out.fine.as_ref().unwrap().samples_per_ray(), 192);
        assert_eq!(out.fine.unwrap().weights.dims(), &[2, 192]);
    }

    #[test]
    fn fine_samples_follow_the_only_occupied_interval() {
        // a thin slab around the 5th coarse midpoint of 8 over [2, 6]
        let slab = Slab { lo: 4.2, hi: 4.3, sigma: 50.0 };
        let cfg = SamplingConfig { n_coarse: 8, n_fine: 32, perturb: false };
        let out = render_rays(&rays(1), &slab, &slab, &cfg, [0.0; 3], &mut ChaCha8Rng::seed_from_u64(0), &Device::Cpu).unwrap();
        let coarse = &out.coarse.t_values[0];
        let w = out.coarse.weights.to_vec2::<f32>().unwrap();
        let hot = w[0].iter().position(|v| *v > 0.0).unwrap();
        assert_eq!(w[0].iter().filter(|v| **v > 0.0).count(), 1);
        let lo = 0.5 * (coarse[hot - 1] + coarse[hot]);
        let hi = 0.5 * (coarse[hot] + coarse[hot + 1]);
        let fine = &out.fine.unwrap().t_values[0];
        let extra: Vec<_> = fine.iter().filter(|t| !coarse.contains(t)).collect();
        assert_eq!(extra.len(), 32);
        assert!(extra.iter().all(|t| (lo..=hi).contains(*t)));
    }

    #[test]
    fn deterministic_mode_ignores_rng() {
        let slab = Slab { lo: 3.0, hi: 4.0, sigma: 2.0 };
        let cfg = SamplingConfig { n_coarse: 16, n_fine: 16, perturb: false };
        let a = render_rays(&rays(2), &slab, &slab, &cfg, [1.0; 3], &mut ChaCha8Rng::seed_from_u64(1), &Device::Cpu).unwrap();
        let b = render_rays(&rays(2), &slab, &slab, &cfg, [1.0; 3], &mut ChaCha8Rng::seed_from_u64(2), &Device::Cpu).unwrap();
        assert_eq!(a.fine.unwrap().t_values, b.fine.unwrap().t_values);
    }

    #[test]
    fn opaque_slab_color() {
        let slab = Slab { lo: 3.0, hi: 6.0, sigma: 1e4 };
        let cfg = SamplingConfig { n_coarse: 32, n_fine: 0, perturb: false };
        let out = render_rays(&rays(1), &slab, &slab, &cfg, [1.0; 3], &mut ChaCha8Rng::seed_from_u64(1), &Device::Cpu).unwrap();
        assert!(out.fine.is_none());
        let c = out.best().color.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(c.iter().all(|v| (v - 0.5).abs() < 1e-5), "{c:?}");
    }
}
