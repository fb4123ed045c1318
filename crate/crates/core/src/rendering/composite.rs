//! Transmittance-weighted compositing of samples along a ray.
//!
//! For samples `i = 1..N` with densities `σ_i`, gaps `δ_i` and colors `c_i`:
//!
//! ```text
//! T_i = exp(−Σ_{j<i} σ_j δ_j)      w_i = T_i (1 − exp(−σ_i δ_i))      C = Σ w_i c_i
//! ```
//!
//! The scalar path ([`composite`], [`composite_backward`]) works on one ray in
//! f64 and carries a hand-derived gradient. The tensor path
//! ([`composite_tensor`]) is the batched form used for training and relies on
//! autograd.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

/// Samples along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureBatch {
    pub t_values: Vec<f64>,
    pub deltas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl QuadratureBatch {
    /// Gaps between consecutive depths; the last sample spans up to `far`.
    pub fn from_depths(t_values: Vec<f64>, far: f64, sigmas: Vec<f64>, colors: Vec<[f64; 3]>) -> Result<Self> {
        let deltas = deltas_from_depths(&t_values, far);
        let batch = Self {
            t_values,
            deltas,
            sigmas,
            colors,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sigmas.len();
        if self.deltas.len() != n || self.colors.len() != n || self.t_values.len() != n {
            return Err(Error::validation(format!(
                "quadrature batch length mismatch: {} depths, {} deltas, {} sigmas, {} colors",
                self.t_values.len(),
                self.deltas.len(),
                n,
                self.colors.len()
            )));
        }
        if self.t_values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::validation("quadrature depths must be strictly increasing"));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::validation(format!("densities must be finite and nonnegative, got {s}")));
        }
        if let Some(d) = self.deltas.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::validation(format!("sample gaps must be finite and nonnegative, got {d}")));
        }
        Ok(())
    }
}

/// `t_{i+1} − t_i`, with `far − t_N` for the last sample.
pub fn deltas_from_depths(t_values: &[f64], far: f64) -> Vec<f64> {
    let mut deltas: Vec<f64> = t_values.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(last) = t_values.last() {
        deltas.push((far - last).max(0.0));
    }
    deltas
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composited {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub opacity: f64,
}

pub fn composite(batch: &QuadratureBatch) -> Result<Composited> {
    batch.validate()?;
    let n = batch.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut depth = 0.0f64;
    let mut color = [0.0; 3];
    for i in 0..n {
        let optical = batch.sigmas[i] * batch.deltas[i];
        let t = (-depth).exp();
        let w = t * -(-optical).exp_m1();
        transmittance.push(t);
        weights.push(w);
        for (acc, c) in color.iter_mut().zip(batch.colors[i]) {
            *acc += w * c;
        }
        depth += optical;
    }
    let opacity = weights.iter().sum();
    Ok(Composited {
        color,
        weights,
        transmittance,
        opacity,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeGradient {
    pub sigmas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

/// Vector–Jacobian product of [`composite`]'s color output.
///
/// With `S_k = Σ_{i>k} w_i c_i`, `∂C/∂c_k = w_k` and
/// `∂C/∂σ_k = δ_k (T_{k+1} c_k − S_k)`.
pub fn composite_backward(batch: &QuadratureBatch, grad_color: [f64; 3]) -> Result<CompositeGradient> {
    let fwd = composite(batch)?;
    let n = batch.len();
    let mut sigmas = vec![0.0; n];
    let mut colors = vec![[0.0; 3]; n];
    let mut tail = [0.0; 3];
    for k in (0..n).rev() {
        let next_t = fwd.transmittance[k] * (-batch.sigmas[k] * batch.deltas[k]).exp();
        let c = batch.colors[k];
        let dot: f64 = (0..3).map(|ch| grad_color[ch] * (next_t * c[ch] - tail[ch])).sum();
        sigmas[k] = batch.deltas[k] * dot;
        colors[k] = grad_color.map(|g| g * fwd.weights[k]);
        for ch in 0..3 {
            tail[ch] += fwd.weights[k] * c[ch];
        }
    }
    Ok(CompositeGradient { sigmas, colors })
}

/// Batched compositing output.
#[derive(Clone, Debug)]
pub struct CompositedTensor {
    /// `[rays, 3]`
    pub color: Tensor,
    /// `[rays, samples]`
    pub weights: Tensor,
    /// `[rays]`
    pub opacity: Tensor,
}

/// `sigmas`, `deltas`: `[rays, samples]`; `colors`: `[rays, samples, 3]`.
///
/// Differentiable with respect to `sigmas` and `colors`. Inputs are assumed
/// nonnegative; the scalar path validates.
pub fn composite_tensor(sigmas: &Tensor, deltas: &Tensor, colors: &Tensor) -> Result<CompositedTensor> {
    let (rays, samples) = sigmas.dims2()?;
    if deltas.dims() != [rays, samples] || colors.dims() != [rays, samples, 3] {
        return Err(Error::validation(format!(
            "composite: shape mismatch sigmas {:?}, deltas {:?}, colors {:?}",
            sigmas.dims(),
            deltas.dims(),
            colors.dims()
        )));
    }
    let optical = (sigmas * deltas)?;
    let exclusive = (optical.cumsum(D::Minus1)? - &optical)?;
    let transmittance = exclusive.neg()?.exp()?;
    let alpha = (1.0 - optical.neg()?.exp()?)?;
    let weights = (transmittance * alpha)?;
    let color = colors.broadcast_mul(&weights.unsqueeze(D::Minus1)?)?.sum(1)?;
    let opacity = weights.sum(D::Minus1)?;
    Ok(CompositedTensor {
        color,
        weights,
        opacity,
    })
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device, Var};
    use proptest::prelude::*;

    use super::*;

    fn batch(sigmas: Vec<f64>, deltas: Vec<f64>, colors: Vec<[f64; 3]>) -> QuadratureBatch {
        let mut t = 0.0;
        let t_values = deltas
            .iter()
            .map(|d| {
                let cur = t;
                t += d.max(1e-3);
                cur
            })
            .collect();
        QuadratureBatch {
            t_values,
            deltas,
            sigmas,
            colors,
        }
    }

    #[test]
    fn transparent_medium() {
        let b = batch(vec![0.0; 4], vec![0.5; 4], vec![[1.0, 0.5, 0.2]; 4]);
        let out = composite(&b).unwrap();
        assert_eq!(out.color, [0.0; 3]);
        assert!(out.weights.iter().all(|w| *w == 0.0));
        assert!(out.transmittance.iter().all(|t| *t == 1.0));
        assert_eq!(out.opacity, 0.0);
    }

    #[test]
    fn opaque_first_sample() {
        let b = batch(vec![1e6, 3.0], vec![1.0, 1.0], vec![[0.2, 0.4, 0.9], [1.0, 1.0, 1.0]]);
        let out = composite(&b).unwrap();
        for (got, want) in out.color.iter().zip([0.2, 0.4, 0.9]) {
            assert!((got - want).abs() < 1e-6);
        }
        assert!((out.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_sample_hand_evaluation() {
        let b = batch(vec![1.0, 2.0], vec![0.5, 0.5], vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let out = composite(&b).unwrap();
        let w1 = 1.0 - (-0.5f64).exp();
        let w2 = (-0.5f64).exp() * (1.0 - (-1.0f64).exp());
        assert!((out.weights[0] - w1).abs() < 1e-12);
        assert!((out.weights[1] - w2).abs() < 1e-12);
        assert!((w1 - 0.3935).abs() < 1e-4 && (w2 - 0.3834).abs() < 1e-4);
        assert!((out.color[0] - w1).abs() < 1e-12);
        assert!((out.color[1] - w2).abs() < 1e-12);
        assert_eq!(out.color[2], 0.0);
    }

    #[test]
    fn rejects_negative_density_and_gap() {
        let b = batch(vec![-1.0], vec![0.5], vec![[0.0; 3]]);
        assert!(composite(&b).unwrap_err().is_validation());
        let b = batch(vec![1.0], vec![-0.5], vec![[0.0; 3]]);
        assert!(composite(&b).unwrap_err().is_validation());
    }

    #[test]
    fn deltas_end_at_far() {
        assert_eq!(deltas_from_depths(&[1.0, 1.5, 3.0], 4.0), vec![0.5, 1.5, 1.0]);
    }

    #[test]
    fn tensor_path_matches_scalar() {
        let dev = Device::Cpu;
        let b = batch(vec![0.3, 2.0, 0.0, 5.0], vec![0.1, 0.4, 0.2, 0.3], vec![[0.1, 0.2, 0.3], [0.9, 0.1, 0.5], [0.2, 0.2, 0.2], [0.7, 0.6, 0.0]]);
        let s = Tensor::from_vec(b.sigmas.clone(), (1, 4), &dev).unwrap();
        let d = Tensor::from_vec(b.deltas.clone(), (1, 4), &dev).unwrap();
        let c = Tensor::from_vec(b.colors.iter().flatten().copied().collect::<Vec<_>>(), (1, 4, 3), &dev).unwrap();
        let t = composite_tensor(&s, &d, &c).unwrap();
        let scalar = composite(&b).unwrap();
        let color = t.color.to_vec2::<f64>().unwrap();
        for (a, b) in color[0].iter().zip(scalar.color) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = t.weights.to_vec2::<f64>().unwrap();
        for (a, b) in w[0].iter().zip(&scalar.weights) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn autograd_matches_analytic_gradient() {
        let dev = Device::Cpu;
        let b = batch(vec![0.3, 2.0, 0.7], vec![0.1, 0.4, 0.3], vec![[0.1, 0.2, 0.3], [0.9, 0.1, 0.5], [0.7, 0.6, 0.0]]);
        let g = [0.3, -1.0, 2.0];
        let s = Var::from_vec(b.sigmas.clone(), (1, 3), &dev).unwrap();
        let c = Var::from_vec(b.colors.iter().flatten().copied().collect::<Vec<_>>(), (1, 3, 3), &dev).unwrap();
        let d = Tensor::from_vec(b.deltas.clone(), (1, 3), &dev).unwrap();
        let out = composite_tensor(s.as_tensor(), &d, c.as_tensor()).unwrap();
        let gt = Tensor::new(&[g], &dev).unwrap().to_dtype(DType::F64).unwrap();
        let loss = (out.color * gt).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let ds = grads.get(s.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let analytic = composite_backward(&b, g).unwrap();
        for (a, b) in ds.iter().zip(&analytic.sigmas) {
            assert!((a - b).abs() < 1e-12, "{ds:?} vs {:?}", analytic.sigmas);
        }
        let dc = grads.get(c.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let flat: Vec<f64> = analytic.colors.iter().flatten().copied().collect();
        for (a, b) in dc.iter().zip(&flat) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn weights_telescope(
            sigmas in proptest::collection::vec(0.0..20.0f64, 1..16),
            delta in 0.001..0.5f64,
        ) {
            let n = sigmas.len();
            let b = batch(sigmas.clone(), vec![delta; n], vec![[0.5; 3]; n]);
            let out = composite(&b).unwrap();
            let total: f64 = sigmas.iter().map(|s| s * delta).sum();
            prop_assert!((out.opacity - (1.0 - (-total).exp())).abs() < 1e-5);
            prop_assert!(out.opacity >= 0.0 && out.opacity <= 1.0 + 1e-12);
            prop_assert_eq!(out.transmittance[0], 1.0);
            prop_assert!(out.transmittance.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
