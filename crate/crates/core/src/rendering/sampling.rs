//! Depth sampling along rays: stratified coarse samples and inverse-CDF
//! resampling of a piecewise-constant density.

use rand::Rng;

use crate::error::{Error, Result};

/// Mass added to every interval when all interval weights are zero.
pub const WEIGHT_FLOOR: f64 = 1e-5;

/// A stream of numbers in `[0, 1]`.
pub trait UniformSource {
    fn next_unit(&mut self) -> f64;
}

/// Adapts any [`rand::Rng`] (values in `[0, 1)`).
pub struct RngSource<'a, R: Rng + ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> UniformSource for RngSource<'_, R> {
    fn next_unit(&mut self) -> f64 {
        self.0.gen::<f64>()
    }
}

/// Always yields the same value; used for deterministic evaluation renders.
#[derive(Clone, Copy, Debug)]
pub struct ConstantSource(pub f64);

impl UniformSource for ConstantSource {
    fn next_unit(&mut self) -> f64 {
        self.0
    }
}

/// Replays a fixed sequence, cycling when exhausted.
#[derive(Clone, Debug)]
pub struct SequenceSource {
    values: Vec<f64>,
    next: usize,
}

impl SequenceSource {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "sequence source needs at least one value");
        Self { values, next: 0 }
    }

    /// `(j + 0.5) / n` for `j = 0..n`.
    pub fn midpoints(n: usize) -> Self {
        Self::new((0..n).map(|j| (j as f64 + 0.5) / n as f64).collect())
    }
}

impl UniformSource for SequenceSource {
    fn next_unit(&mut self) -> f64 {
        let v = self.values[self.next];
        self.next = (self.next + 1) % self.values.len();
        v
    }
}

/// One depth per equal-width bin of `[near, far]`, ascending.
pub fn stratified_sample(near: f64, far: f64, n_samples: usize, rng: &mut impl UniformSource) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::validation("stratified sampling needs at least one sample"));
    }
    if !(near.is_finite() && far.is_finite() && near < far) {
        return Err(Error::validation(format!(
            "stratified sampling needs near < far, got near={near} far={far}"
        )));
    }
    let width = (far - near) / n_samples as f64;
    Ok((0..n_samples)
        .map(|bin| {
            let u = rng.next_unit().clamp(0.0, 1.0);
            // bin edges are computed directly so the last edge lands on `far` exactly
            let lo = near + width * bin as f64;
            let hi = if bin + 1 == n_samples { far } else { near + width * (bin + 1) as f64 };
            lo + (hi - lo) * u
        })
        .collect())
}

/// Draws `n_fine` depths from the piecewise-constant density over the intervals
/// `[edges[k], edges[k + 1]]` with masses proportional to `weights[k]`.
///
/// Output is sorted and always lies inside `[edges[0], edges[last]]`. Intervals
/// with zero weight receive no samples unless every weight is zero, in which case
/// [`WEIGHT_FLOOR`] is added to each interval and the density becomes uniform.
pub fn hierarchical_sample(
    edges: &[f64],
    weights: &[f64],
    n_fine: usize,
    rng: &mut impl UniformSource,
) -> Result<Vec<f64>> {
    if edges.len() < 2 {
        return Err(Error::validation("hierarchical sampling needs at least one interval"));
    }
    if weights.len() + 1 != edges.len() {
        return Err(Error::validation(format!(
            "hierarchical sampling: {} edges need {} interval weights, got {}",
            edges.len(),
            edges.len() - 1,
            weights.len()
        )));
    }
    if edges.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::validation("hierarchical sampling: interval edges must be sorted"));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::validation(format!(
            "hierarchical sampling: weights must be finite and nonnegative, got {w}"
        )));
    }

    let total: f64 = weights.iter().sum();
    let floor = if total > 0.0 { 0.0 } else { WEIGHT_FLOOR };
    let mut cdf = Vec::with_capacity(edges.len());
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += w + floor;
        cdf.push(acc);
    }
    let norm = acc;
    for c in cdf.iter_mut() {
        *c /= norm;
    }
    let last_live = weights
        .iter()
        .rposition(|w| w + floor > 0.0)
        .expect("normalized density has positive mass");

    let mut out: Vec<f64> = (0..n_fine)
        .map(|_| {
            let u = rng.next_unit().clamp(0.0, 1.0);
            // first interval whose upper CDF exceeds u; zero-mass intervals are skipped
            let k = cdf[1..].partition_point(|c| *c <= u);
            if k > last_live {
                return edges[last_live + 1];
            }
            let mass = cdf[k + 1] - cdf[k];
            let frac = ((u - cdf[k]) / mass).clamp(0.0, 1.0);
            edges[k] + frac * (edges[k + 1] - edges[k])
        })
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Merges two ascending depth lists into one ascending list.
pub fn merge_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.sort_by(f64::total_cmp);
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn stratified_midpoints() {
        let out = stratified_sample(0.0, 1.0, 4, &mut ConstantSource(0.5)).unwrap();
        assert_eq!(out, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn stratified_left_edges() {
        let out = stratified_sample(0.0, 1.0, 4, &mut ConstantSource(0.0)).unwrap();
        assert_eq!(out, vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn stratified_right_edges() {
        let out = stratified_sample(2.0, 6.0, 2, &mut ConstantSource(1.0)).unwrap();
        assert_eq!(out, vec![4.0, 6.0]);
    }

    #[test]
    fn stratified_rejects_zero_samples() {
        assert!(stratified_sample(0.0, 1.0, 0, &mut ConstantSource(0.5)).unwrap_err().is_validation());
        assert!(stratified_sample(1.0, 1.0, 3, &mut ConstantSource(0.5)).is_err());
    }

    #[test]
    fn one_hot_weights_stay_in_hot_interval() {
        let edges: Vec<f64> = (0..=8).map(|i| i as f64 * 0.5).collect();
        let mut weights = vec![0.0; 8];
        weights[5] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = hierarchical_sample(&edges, &weights, 500, &mut RngSource(&mut rng)).unwrap();
        assert!(out.iter().all(|t| (2.5..=3.0).contains(t)));
        // stream endpoints map onto the hot interval as well
        let ends = hierarchical_sample(&edges, &weights, 2, &mut SequenceSource::new(vec![0.0, 1.0])).unwrap();
        assert_eq!(ends, vec![2.5, 3.0]);
    }

    #[test]
    fn analytic_inverse_cdf_split() {
        // weights (1, 3) over [0,1], [1,2]: CDF reaches 1/4 at t = 1
        let out = hierarchical_sample(&[0.0, 1.0, 2.0], &[1.0, 3.0], 4, &mut SequenceSource::midpoints(4)).unwrap();
        assert_eq!(out.iter().filter(|t| **t < 1.0).count(), 1);
        // u = 1/8 → t = 0.5; u = 3/8 → 1 + (1/8)/(3/4) = 7/6
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[1] - 7.0 / 6.0).abs() < 1e-12);

        let many = hierarchical_sample(&[0.0, 1.0, 2.0], &[1.0, 3.0], 1000, &mut SequenceSource::midpoints(1000)).unwrap();
        assert_eq!(many.iter().filter(|t| **t < 1.0).count(), 250);
    }

    #[test]
    fn all_zero_weights_fall_back_to_uniform() {
        let out = hierarchical_sample(&[0.0, 1.0, 2.0], &[0.0, 0.0], 4, &mut SequenceSource::midpoints(4)).unwrap();
        assert_eq!(out, vec![0.25, 0.75, 1.25, 1.75]);
    }

    #[test]
    fn rejects_malformed_inputs() {
        let mut src = ConstantSource(0.5);
        assert!(hierarchical_sample(&[0.0], &[], 3, &mut src).is_err());
        assert!(hierarchical_sample(&[0.0, 1.0], &[1.0, 1.0], 3, &mut src).is_err());
        assert!(hierarchical_sample(&[0.0, 1.0], &[-1.0], 3, &mut src).is_err());
        assert!(hierarchical_sample(&[1.0, 0.0], &[1.0], 3, &mut src).is_err());
    }

    proptest! {
        #[test]
        fn stratified_sample_j_lies_in_bin_j(seed in any::<u64>(), n in 1usize..64, near in 0.0..5.0f64, span in 0.1..10.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let far = near + span;
            let out = stratified_sample(near, far, n, &mut RngSource(&mut rng)).unwrap();
            let width = span / n as f64;
            for (j, t) in out.iter().enumerate() {
                prop_assert!(*t >= near + width * j as f64 - 1e-12);
                prop_assert!(*t <= near + width * (j + 1) as f64 + 1e-12);
            }
            prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn hierarchical_stays_within_edges(
            seed in any::<u64>(),
            weights in proptest::collection::vec(0.0..1.0f64, 1..20),
            start in -2.0..2.0f64,
        ) {
            let edges: Vec<f64> = (0..=weights.len()).map(|i| start + 0.3 * i as f64).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = hierarchical_sample(&edges, &weights, 64, &mut RngSource(&mut rng)).unwrap();
            prop_assert_eq!(out.len(), 64);
            prop_assert!(out.iter().all(|t| *t >= edges[0] && *t <= *edges.last().unwrap()));
            prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
