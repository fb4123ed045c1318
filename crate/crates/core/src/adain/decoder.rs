use candle_core::Tensor;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};

/// `(name, in, out, upsample_before)` mirroring the encoder, deepest first.
const LAYOUT: [(&str, usize, usize, bool); 9] = [
    ("dec4_1", 512, 256, false),
    ("dec3_4", 256, 256, true),
    ("dec3_3", 256, 256, false),
    ("dec3_2", 256, 256, false),
    ("dec3_1", 256, 128, false),
    ("dec2_2", 128, 128, true),
    ("dec2_1", 128, 64, false),
    ("dec1_2", 64, 64, true),
    ("dec1_1", 64, 3, false),
];

/// Trainable decoder: 3×3 convolutions with ReLU, nearest-neighbor upsampling,
/// no normalization layers; the final convolution is linear.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub(crate) store: ParamStore,
    layers: Vec<(Conv2d, bool)>,
}

impl Decoder {
    pub fn new(store: ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let mut store = store;
        let layers = LAYOUT
            .iter()
            .map(|(name, i, o, up)| Ok((store.conv3x3(name, *i, *o, false, rng)?, *up)))
            .collect::<Result<_>>()?;
        Ok(Self { store, layers })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Unclamped output, `[B, 512, h, w]` → `[B, 3, 8h, 8w]`.
    pub fn forward_raw(&self, features: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = features.dims4()?;
        if c != LAYOUT[0].1 {
            return Err(Error::validation(format!("decoder expects {} channels, got {c}", LAYOUT[0].1)));
        }
        let mut x = features.clone();
        let (mut h, mut w) = (h, w);
        let last = self.layers.len() - 1;
        for (i, (conv, upsample)) in self.layers.iter().enumerate() {
            if *upsample {
                h *= 2;
                w *= 2;
                x = x.upsample_nearest2d(h, w)?;
            }
            x = conv.forward(&x)?;
            if i < last {
                x = x.relu()?;
            }
        }
        Ok(x)
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.forward_raw(features)?.clamp(0f32, 1f32)?)
    }
}
