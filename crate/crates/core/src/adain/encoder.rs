//! Frozen perceptual encoder with the VGG-19 layout up to `relu4_1`.
//!
//! Weights come either from a safetensors file (torchvision `features.N.*`
//! names or our own `conv{stage}_{i}.*` names) or from a seeded He-normal
//! initialization whose kernels are made left/right symmetric, so the
//! encoder commutes with horizontal mirroring.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore, TensorData};

/// `(channels, convolutions)` per stage; statistics are tapped at the first
/// activation of each stage.
pub const VGG19_STAGES: [(usize, usize); 4] = [(64, 2), (128, 2), (256, 4), (512, 1)];

/// Minimum accepted image side.
pub const MIN_IMAGE_SIZE: usize = 32;

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Position of each conv layer inside torchvision's `vgg19().features`.
const TORCHVISION_INDICES: [usize; 9] = [0, 2, 5, 7, 10, 12, 14, 16, 19];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Pretrained weights; when absent the seeded initialization is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { weights: None, seed: 0x5eed }
    }
}

fn layer_names() -> Vec<String> {
    VGG19_STAGES
        .iter()
        .enumerate()
        .flat_map(|(s, (_, n))| (1..=*n).map(move |i| format!("conv{}_{}", s + 1, i)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Encoder {
    store: ParamStore,
    stages: Vec<Vec<Conv2d>>,
    identifier: String,
    mean: Tensor,
    std: Tensor,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, device: &Device) -> Result<Self> {
        match &config.weights {
            Some(path) => Self::from_file(path, device),
            None => Self::seeded(config.seed, device),
        }
    }

    pub fn seeded(seed: u64, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::frozen(device);
        let mut in_ch = 3;
        let names = layer_names();
        let mut name_iter = names.iter();
        for (out_ch, n) in VGG19_STAGES {
            for _ in 0..n {
                let name = name_iter.next().expect("layer names match layout");
                store.conv3x3(name, in_ch, out_ch, true, &mut rng)?;
                in_ch = out_ch;
            }
        }
        Self::assemble(store, format!("vgg19-relu4_1/seeded-mirror/{seed}"), device)
    }

    pub fn from_file(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let archive = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let mut raw = BTreeMap::new();
        for (name, view) in archive.tensors() {
            if view.dtype() != safetensors::Dtype::F32 {
                return Err(Error::format(path, format!("tensor {name} is not f32")));
            }
            let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            raw.insert(
                name,
                TensorData {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        let mut store = ParamStore::frozen(device);
        for (i, name) in layer_names().iter().enumerate() {
            for suffix in ["weight", "bias"] {
                let ours = format!("{name}.{suffix}");
                let torchvision = format!("features.{}.{suffix}", TORCHVISION_INDICES[i]);
                let data = raw
                    .get(&ours)
                    .or_else(|| raw.get(&torchvision))
                    .ok_or_else(|| Error::format(path, format!("missing encoder tensor {ours} / {torchvision}")))?;
                store.insert(ours, data.to_tensor(device)?)?;
            }
        }
        let stem = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::assemble(store, format!("vgg19-relu4_1/file/{stem}"), device)
    }

    fn assemble(store: ParamStore, identifier: String, device: &Device) -> Result<Self> {
        let names = layer_names();
        let mut names = names.iter();
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (out_ch, n) in VGG19_STAGES {
            let mut convs = Vec::new();
            for _ in 0..n {
                let conv = store.conv_from_existing(names.next().expect("layout"))?;
                if conv.weight.dims() != [out_ch, in_ch, 3, 3] {
                    return Err(Error::validation(format!(
                        "encoder layer has shape {:?}, expected [{out_ch}, {in_ch}, 3, 3]",
                        conv.weight.dims()
                    )));
                }
                convs.push(conv);
                in_ch = out_ch;
            }
            stages.push(convs);
        }
        Ok(Self {
            store,
            stages,
            identifier,
            mean: Tensor::new(&IMAGENET_MEAN, device)?.reshape((1, 3, 1, 1))?,
            std: Tensor::new(&IMAGENET_STD, device)?.reshape((1, 3, 1, 1))?,
        })
    }

    pub fn identifier(&self) -> &str {
        &self.identifier
    }

    pub fn digest(&self) -> Result<String> {
        self.store.digest()
    }

    pub fn layer_channels(&self) -> Vec<usize> {
        VGG19_STAGES.iter().map(|(c, _)| *c).collect()
    }

    /// Writes the weights in the layout accepted by [`Encoder::from_file`].
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let tensors = self.store.export("")?;
        let bytes: BTreeMap<&str, Vec<u8>> = tensors
            .iter()
            .map(|(k, t)| (k.as_str(), t.data.iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = tensors
            .iter()
            .map(|(k, t)| {
                safetensors::tensor::TensorView::new(safetensors::Dtype::F32, t.shape.clone(), &bytes[k.as_str()])
                    .map(|v| (k.as_str(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, e.to_string()))?;
        let out = safetensors::tensor::serialize(views, None).map_err(|e| Error::format(path, e.to_string()))?;
        crate::data::checkpoint::write_atomic(path, &out)
    }

    /// Encodes a `[B, 3, H, W]` batch in `[0, 1]`; returns the four tapped
    /// activations, shallowest first. Gradients flow to the input.
    pub fn encode_tensor(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::validation(format!("encoder expects 3 channels, got {c}")));
        }
        if h < MIN_IMAGE_SIZE || w < MIN_IMAGE_SIZE {
            return Err(Error::validation(format!(
                "encoder input must be at least {MIN_IMAGE_SIZE}×{MIN_IMAGE_SIZE}, got {w}×{h}"
            )));
        }
        let mut x = images.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let mut taps = Vec::with_capacity(self.stages.len());
        for (s, convs) in self.stages.iter().enumerate() {
            if s > 0 {
                x = x.max_pool2d(2)?;
            }
            for (i, conv) in convs.iter().enumerate() {
                x = conv.forward(&x)?.relu()?;
                if i == 0 {
                    taps.push(x.clone());
                }
            }
        }
        Ok(taps)
    }

    pub fn encode(&self, images: &Tensor) -> Result<Vec<FeatureMap>> {
        self.encode_tensor(images)?.into_iter().map(FeatureMap::new).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::images::ImageRgb;

    #[test]
    fn layer_arithmetic() {
        let dev = Device::Cpu;
        let enc = Encoder::seeded(1, &dev).unwrap();
        let img = ImageRgb::filled(64, 48, [0.3, 0.5, 0.7]).to_tensor(&dev).unwrap();
        let taps = enc.encode(&img).unwrap();
        let shapes: Vec<_> = taps.iter().map(|f| (f.channels(), f.height(), f.width())).collect();
        assert_eq!(shapes, vec![(64, 48, 64), (128, 24, 32), (256, 12, 16), (512, 6, 8)]);
    }

    #[test]
    fn rejects_small_or_wrong_channel_input() {
        let dev = Device::Cpu;
        let enc = Encoder::seeded(1, &dev).unwrap();
        let small = Tensor::zeros((1, 3, 16, 64), candle_core::DType::F32, &dev).unwrap();
        assert!(enc.encode(&small).unwrap_err().is_validation());
        let gray = Tensor::zeros((1, 1, 64, 64), candle_core::DType::F32, &dev).unwrap();
        assert!(enc.encode(&gray).unwrap_err().is_validation());
    }

    #[test]
    fn weights_file_round_trip() {
        let dev = Device::Cpu;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        let enc = Encoder::seeded(9, &dev).unwrap();
        enc.save_weights(&path).unwrap();
        let loaded = Encoder::new(
            &EncoderConfig {
                weights: Some(path),
                seed: 0,
            },
            &dev,
        )
        .unwrap();
        assert_eq!(loaded.digest().unwrap(), enc.digest().unwrap());
        assert_ne!(loaded.identifier(), enc.identifier());
    }

    #[test]
    fn seed_changes_digest() {
        let dev = Device::Cpu;
        assert_ne!(
            Encoder::seeded(1, &dev).unwrap().digest().unwrap(),
            Encoder::seeded(2, &dev).unwrap().digest().unwrap()
        );
    }
}
