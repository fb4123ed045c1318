//! Minimal layer toolkit on top of candle with seeded initialization.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. A store is either
//! trainable (backed by [`Var`]s, so autograd tracks them) or frozen (plain
//! tensors that never receive gradients).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), device)?)
    }
}

/// SHA-256 over names, shapes and little-endian f32 payloads, in name order.
pub fn digest_tensors(tensors: &BTreeMap<String, TensorData>) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((t.shape.len() as u64).to_le_bytes());
        for d in &t.shape {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in &t.data {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone)]
enum Param {
    Trainable(Var),
    Frozen(Tensor),
}

impl Param {
    fn tensor(&self) -> &Tensor {
        match self {
            Param::Trainable(v) => v.as_tensor(),
            Param::Frozen(t) => t,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    trainable: bool,
    device: Device,
}

impl ParamStore {
    pub fn trainable(device: &Device) -> Self {
        Self {
            params: BTreeMap::new(),
            trainable: true,
            device: device.clone(),
        }
    }

    pub fn frozen(device: &Device) -> Self {
        Self {
            params: BTreeMap::new(),
            trainable: false,
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<Tensor> {
        let name = name.into();
        let value = value.to_dtype(DType::F32)?.to_device(&self.device)?;
        let param = if self.trainable {
            Param::Trainable(Var::from_tensor(&value)?)
        } else {
            Param::Frozen(value.detach())
        };
        let handle = param.tensor().clone();
        if self.params.insert(name.clone(), param).is_some() {
            return Err(Error::validation(format!("duplicate parameter name {name}")));
        }
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(Param::tensor)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params
            .values()
            .filter_map(|p| match p {
                Param::Trainable(v) => Some(v.clone()),
                Param::Frozen(_) => None,
            })
            .collect()
    }

    /// Overwrites existing parameters in place; every name must already exist with the same shape.
    pub fn load(&self, tensors: &BTreeMap<String, TensorData>, prefix: &str) -> Result<()> {
        for (name, param) in &self.params {
            let key = format!("{prefix}{name}");
            let data = tensors
                .get(&key)
                .ok_or_else(|| Error::state(format!("checkpoint is missing tensor {key}")))?;
            if data.shape != param.tensor().dims() {
                return Err(Error::state(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    data.shape,
                    param.tensor().dims()
                )));
            }
            let value = data.to_tensor(&self.device)?;
            match param {
                Param::Trainable(v) => v.set(&value)?,
                Param::Frozen(_) => {
                    return Err(Error::state("frozen parameters cannot be reloaded in place; use ParamStore::from_tensors"))
                }
            }
        }
        Ok(())
    }

    /// A frozen store holding exactly the tensors under `prefix` (prefix stripped).
    pub fn from_tensors(tensors: &BTreeMap<String, TensorData>, prefix: &str, device: &Device) -> Result<Self> {
        let mut store = Self::frozen(device);
        for (name, data) in tensors.range(prefix.to_string()..) {
            let Some(stripped) = name.strip_prefix(prefix) else { break };
            store.insert(stripped, data.to_tensor(device)?)?;
        }
        Ok(store)
    }

    pub fn export(&self, prefix: &str) -> Result<BTreeMap<String, TensorData>> {
        self.params
            .iter()
            .map(|(name, p)| Ok((format!("{prefix}{name}"), TensorData::from_tensor(p.tensor())?)))
            .collect()
    }

    pub fn digest(&self) -> Result<String> {
        Ok(digest_tensors(&self.export("")?))
    }

    /// Dense layer with `U(−1/√in, 1/√in)` weights and biases.
    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Linear> {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let weight = uniform(rng, in_dim * out_dim, bound);
        let bias = uniform(rng, out_dim, bound);
        let weight = self.insert(format!("{name}.weight"), Tensor::from_vec(weight, (in_dim, out_dim), &self.device)?)?;
        let bias = self.insert(format!("{name}.bias"), Tensor::from_vec(bias, out_dim, &self.device)?)?;
        Ok(Linear { weight, bias })
    }

    pub fn linear_from_existing(&self, name: &str) -> Result<Linear> {
        let get = |suffix: &str| {
            self.get(&format!("{name}.{suffix}"))
                .cloned()
                .ok_or_else(|| Error::state(format!("missing parameter {name}.{suffix}")))
        };
        Ok(Linear {
            weight: get("weight")?,
            bias: get("bias")?,
        })
    }

    /// 3×3 convolution, He-normal weights, zero bias. With `mirror_symmetric`
    /// each kernel is averaged with its horizontal flip.
    pub fn conv3x3(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        mirror_symmetric: bool,
        rng: &mut impl Rng,
    ) -> Result<Conv2d> {
        let fan_in = (in_ch * 9) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("valid std");
        let mut weight: Vec<f32> = (0..out_ch * in_ch * 9).map(|_| normal.sample(rng)).collect();
        if mirror_symmetric {
            for k in weight.chunks_mut(9) {
                for row in k.chunks_mut(3) {
                    let avg = 0.5 * (row[0] + row[2]);
                    row[0] = avg;
                    row[2] = avg;
                }
            }
        }
        let weight = self.insert(format!("{name}.weight"), Tensor::from_vec(weight, (out_ch, in_ch, 3, 3), &self.device)?)?;
        let bias = self.insert(format!("{name}.bias"), Tensor::zeros(out_ch, DType::F32, &self.device)?)?;
        Ok(Conv2d { weight, bias })
    }

    pub fn conv_from_existing(&self, name: &str) -> Result<Conv2d> {
        let get = |suffix: &str| {
            self.get(&format!("{name}.{suffix}"))
                .cloned()
                .ok_or_else(|| Error::state(format!("missing parameter {name}.{suffix}")))
        };
        Ok(Conv2d {
            weight: get("weight")?,
            bias: get("bias")?,
        })
    }
}

fn uniform(rng: &mut impl Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }
}

/// Stack of dense layers with ReLU between layers; the last layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| store.linear(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }
}

/// 3×3 convolution with zero padding 1, stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, 1, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    -10.0 * mse.max(1e-12).log10()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let dev = Device::Cpu;
        let build = || {
            let mut store = ParamStore::trainable(&dev);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            Mlp::new(&mut store, "mlp", &[4, 8, 2], &mut rng).unwrap();
            store.digest().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn frozen_store_has_no_vars_and_round_trips() {
        let dev = Device::Cpu;
        let mut store = ParamStore::trainable(&dev);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store.linear("a", 3, 2, &mut rng).unwrap();
        store.linear("b", 2, 1, &mut rng).unwrap();
        let exported = store.export("net.").unwrap();
        let frozen = ParamStore::from_tensors(&exported, "net.", &dev).unwrap();
        assert!(frozen.vars().is_empty());
        assert_eq!(frozen.len(), 4);
        assert_eq!(frozen.digest().unwrap(), store.digest().unwrap());
    }

    #[test]
    fn mirror_symmetric_kernels() {
        let dev = Device::Cpu;
        let mut store = ParamStore::frozen(&dev);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = store.conv3x3("c", 2, 3, true, &mut rng).unwrap();
        let w = conv.weight.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for row in w.chunks(3) {
            assert_eq!(row[0], row[2]);
        }
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParamStore::trainable(&dev);
        a.linear("l", 3, 2, &mut rng).unwrap();
        let mut b = ParamStore::trainable(&dev);
        b.linear("l", 2, 2, &mut rng).unwrap();
        assert!(b.load(&a.export("").unwrap(), "").is_err());
    }
}
