//! 2D stylization: adaptive instance normalization between a frozen encoder
//! and a trainable decoder, plus the style statistics used to condition the
//! multi-style radiance field.

mod decoder;
mod encoder;
mod train;

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

pub use decoder::Decoder;
pub use encoder::{Encoder, EncoderConfig, MIN_IMAGE_SIZE, VGG19_STAGES};
pub use train::{train_adain, AdainConfig, AdainModel};

use crate::data::images::ImageRgb;
use crate::error::{Error, Result};

/// Denominator regularizer of the instance normalization.
pub const ADAIN_EPS: f64 = 1e-5;

/// Encoder activations, `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(Error::validation(format!("feature maps are rank 4, got {:?}", tensor.dims())));
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[3]
    }

    /// Channelwise `(mean, std)` over space, population convention, `[B, C]` each.
    pub fn channel_stats(&self) -> Result<(Tensor, Tensor)> {
        channel_stats(&self.0, 0.0)
    }
}

/// `(mean, sqrt(var + eps))` over the spatial dims of `[B, C, H, W]`, population variance.
pub fn channel_stats(x: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let var = flat.broadcast_sub(&mean)?.sqr()?.mean(D::Minus1)?;
    let std = (var + eps)?.sqrt()?;
    Ok((mean.squeeze(D::Minus1)?, std))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStatistics {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Channel means and standard deviations at each tapped encoder layer.
///
/// The flattened form concatenates `[mean_1, std_1, mean_2, std_2, …]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleStatistics {
    pub layers: Vec<LayerStatistics>,
}

impl StyleStatistics {
    pub fn new(layers: Vec<LayerStatistics>) -> Result<Self> {
        let stats = Self { layers };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.mean.len() != layer.std.len() {
                return Err(Error::validation(format!(
                    "layer {i}: {} means but {} stds",
                    layer.mean.len(),
                    layer.std.len()
                )));
            }
            if layer.mean.iter().chain(&layer.std).any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("layer {i}: statistics must be finite")));
            }
            if layer.std.iter().any(|s| *s < 0.0) {
                return Err(Error::validation(format!("layer {i}: standard deviations must be nonnegative")));
            }
        }
        Ok(())
    }

    pub fn layer_channels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.mean.len()).collect()
    }

    pub fn flattened_dim(&self) -> usize {
        2 * self.layers.iter().map(|l| l.mean.len()).sum::<usize>()
    }

    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.flattened_dim());
        for layer in &self.layers {
            out.extend_from_slice(&layer.mean);
            out.extend_from_slice(&layer.std);
        }
        out
    }

    pub fn from_flat(flat: &[f32], layer_channels: &[usize]) -> Result<Self> {
        let expected: usize = 2 * layer_channels.iter().sum::<usize>();
        if flat.len() != expected {
            return Err(Error::validation(format!(
                "flattened statistics have {} values, layer layout {layer_channels:?} needs {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let layers = layer_channels
            .iter()
            .map(|c| {
                let mean = flat[offset..offset + c].to_vec();
                let std = flat[offset + c..offset + 2 * c].to_vec();
                offset += 2 * c;
                LayerStatistics { mean, std }
            })
            .collect();
        Self::new(layers)
    }

    pub fn deepest(&self) -> Option<&LayerStatistics> {
        self.layers.last()
    }

    pub fn from_feature_maps(maps: &[FeatureMap]) -> Result<Self> {
        let layers = maps
            .iter()
            .map(|m| {
                if m.batch() != 1 {
                    return Err(Error::validation("style statistics are computed from a single image"));
                }
                let (mean, std) = m.channel_stats()?;
                Ok(LayerStatistics {
                    mean: mean.squeeze(0)?.to_vec1::<f32>()?,
                    std: std.squeeze(0)?.to_vec1::<f32>()?,
                })
            })
            .collect::<Result<_>>()?;
        Self::new(layers)
    }

    /// Elementwise mean of several statistics with the same layout.
    pub fn average(all: &[StyleStatistics]) -> Result<Self> {
        let first = all.first().ok_or_else(|| Error::validation("cannot average zero statistics"))?;
        let channels = first.layer_channels();
        let mut acc = vec![0.0f64; first.flattened_dim()];
        for s in all {
            if s.layer_channels() != channels {
                return Err(Error::validation("statistics layouts differ"));
            }
            for (a, v) in acc.iter_mut().zip(s.flatten()) {
                *a += v as f64;
            }
        }
        let n = all.len() as f64;
        let flat: Vec<f32> = acc.into_iter().map(|a| (a / n) as f32).collect();
        Self::from_flat(&flat, &channels)
    }
}

/// `std ⊙ (x − μ_x) / (σ_x + ε) + mean`, channelwise over space.
///
/// `style_mean` / `style_std` are `[B, C]` (or `[1, C]`, broadcast over the batch).
pub fn adain_transform_tensor(content: &Tensor, style_mean: &Tensor, style_std: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = content.dims4()?;
    for t in [style_mean, style_std] {
        if t.rank() != 2 || t.dims()[1] != c {
            return Err(Error::validation(format!(
                "style statistics shape {:?} does not match {c} content channels",
                t.dims()
            )));
        }
    }
    let (mean, std) = channel_stats(content, 0.0)?;
    let expand = |t: &Tensor| t.unsqueeze(D::Minus1).and_then(|t| t.unsqueeze(D::Minus1));
    let normalized = content.broadcast_sub(&expand(&mean)?)?.broadcast_div(&expand(&(std + ADAIN_EPS)?)?)?;
    Ok(normalized.broadcast_mul(&expand(style_std)?)?.broadcast_add(&expand(style_mean)?)?)
}

pub fn adain_transform(content: &FeatureMap, style_mean: &[f32], style_std: &[f32]) -> Result<FeatureMap> {
    if style_mean.len() != content.channels() || style_std.len() != content.channels() {
        return Err(Error::validation(format!(
            "content has {} channels but style statistics have {} means and {} stds",
            content.channels(),
            style_mean.len(),
            style_std.len()
        )));
    }
    let dev = content.tensor().device();
    let mean = Tensor::new(style_mean, dev)?.unsqueeze(0)?;
    let std = Tensor::new(style_std, dev)?.unsqueeze(0)?;
    FeatureMap::new(adain_transform_tensor(content.tensor(), &mean, &std)?)
}

/// Loss terms; `total` is a scalar tensor carrying the graph.
#[derive(Clone, Debug)]
pub struct AdainLoss {
    pub total: Tensor,
    pub content: f32,
    pub style: f32,
    pub total_value: f32,
}

/// Variance regularizer inside the style-loss standard deviations.
const STYLE_LOSS_EPS: f64 = 1e-5;

/// `L = Lc + λ·Ls`.
///
/// `Lc` is the mean squared distance between the deepest stylized activation
/// and `target`; `Ls` sums, over the tapped layers, the mean squared
/// distances between channel means and between channel stds of the stylized
/// and style activations.
pub fn adain_loss(stylized_taps: &[Tensor], target: &Tensor, style_taps: &[Tensor], lambda: f64) -> Result<AdainLoss> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::validation(format!("style weight must be nonnegative, got {lambda}")));
    }
    if stylized_taps.len() != style_taps.len() || stylized_taps.is_empty() {
        return Err(Error::validation("stylized and style activations must cover the same layers"));
    }
    let deepest = stylized_taps.last().expect("nonempty");
    let content = (deepest - target)?.sqr()?.mean_all()?;
    let mut style_terms = Vec::with_capacity(style_taps.len());
    for (g, s) in stylized_taps.iter().zip(style_taps) {
        let (gm, gs) = channel_stats(g, STYLE_LOSS_EPS)?;
        let (sm, ss) = channel_stats(s, STYLE_LOSS_EPS)?;
        let term = ((gm - sm)?.sqr()?.mean_all()? + (gs - ss)?.sqr()?.mean_all()?)?;
        style_terms.push(term);
    }
    let style = Tensor::stack(&style_terms, 0)?.sum_all()?;
    let total = (&content + (&style * lambda)?)?;
    let content_value = content.to_scalar::<f32>()?;
    let style_value = style.to_scalar::<f32>()?;
    Ok(AdainLoss {
        total_value: total.to_scalar::<f32>()?,
        total,
        content: content_value,
        style: style_value,
    })
}

/// Statistics of `image` at every tapped layer.
pub fn extract_style_statistics(encoder: &Encoder, image: &ImageRgb, device: &Device) -> Result<StyleStatistics> {
    let taps = encoder.encode(&image.to_tensor(device)?)?;
    StyleStatistics::from_feature_maps(&taps)
}
