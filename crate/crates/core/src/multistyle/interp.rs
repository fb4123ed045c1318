use crate::adain::StyleStatistics;
use crate::error::{Error, Result};

fn lerp(a: f32, b: f32, lambda: f32) -> f32 {
    if a == b {
        a
    } else {
        (1.0 - lambda) * a + lambda * b
    }
}

/// `(1 − λ)·a + λ·b` over every mean and standard deviation.
///
/// Components on which `a` and `b` agree are copied unchanged, so
/// `interpolate_styles(a, a, λ) == a` and the endpoints are reproduced bitwise.
pub fn interpolate_styles(a: &StyleStatistics, b: &StyleStatistics, lambda: f64) -> Result<StyleStatistics> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation(format!("interpolation weight must lie in [0, 1], got {lambda}")));
    }
    if a.layer_channels() != b.layer_channels() {
        return Err(Error::validation(format!(
            "statistics layouts differ: {:?} vs {:?}",
            a.layer_channels(),
            b.layer_channels()
        )));
    }
    let lambda = lambda as f32;
    let flat: Vec<f32> = a.flatten().into_iter().zip(b.flatten()).map(|(x, y)| lerp(x, y, lambda)).collect();
    StyleStatistics::from_flat(&flat, &a.layer_channels())
}

/// Moves from the content statistics (`intensity = 0`) to the style (`intensity = 1`).
pub fn set_intensity(style: &StyleStatistics, content: &StyleStatistics, intensity: f64) -> Result<StyleStatistics> {
    interpolate_styles(content, style, intensity)
}
