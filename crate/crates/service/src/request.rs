use serde::{Deserialize, Serialize};
use stylenerf_core::adain::StyleStatistics;
use stylenerf_core::multistyle::{interpolate_styles, set_intensity, MultiStyleModel, CONTENT_STYLE_ID};
use stylenerf_core::rendering::CameraPose;

/// Side lengths a preview may be rendered at.
pub const RESOLUTIONS: [usize; 3] = [64, 128, 256];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Orbit {
    /// Degrees.
    pub azimuth: f64,
    /// Degrees, strictly inside (-90, 90).
    pub elevation: f64,
    /// Defaults to the mean distance of the training cameras from the origin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

/// Body of `POST /render`.
///
/// Pose: exactly one of `pose_index`, `pose_matrix` (camera-to-world) or `orbit`.
/// Style: exactly one of `style_id`, `style_a` + `style_b` + `lambda`, or
/// `style_id` + `intensity` (blend from the content style).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_matrix: Option<[[f64; 4]; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orbit: Option<Orbit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<f64>,
    pub resolution: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PoseSpec {
    Index(usize),
    Matrix([[f64; 4]; 4]),
    Orbit(Orbit),
}

#[derive(Clone, Debug, PartialEq)]
pub enum StyleSpec {
    Single(String),
    Pair { a: String, b: String, lambda: f64 },
    Intensity { id: String, intensity: f64 },
}

/// A request that passed shape validation.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidRequest {
    pub pose: PoseSpec,
    pub style: StyleSpec,
    pub resolution: usize,
    pub seed: Option<u64>,
}

/// Why a request was refused, mapped to 400 (`Invalid`) or 422 (`UnknownStyle`).
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum RequestError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown style {0:?}")]
    UnknownStyle(String),
}

fn invalid(field: &str, message: impl Into<String>) -> RequestError {
    RequestError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

fn unit_interval(field: &str, v: f64) -> Result<f64, RequestError> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(invalid(field, format!("must lie in [0, 1], got {v}")))
    }
}

impl RenderRequest {
    pub fn validate(&self) -> Result<ValidRequest, RequestError> {
        let pose = match (self.pose_index, &self.pose_matrix, &self.orbit) {
            (Some(i), None, None) => PoseSpec::Index(i),
            (None, Some(m), None) => {
                if m.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(invalid("pose_matrix", "values must be finite"));
                }
                PoseSpec::Matrix(*m)
            }
            (None, None, Some(o)) => {
                if !o.azimuth.is_finite() {
                    return Err(invalid("orbit.azimuth", "must be finite"));
                }
                if o.elevation.is_nan() || o.elevation.abs() >= 90.0 {
                    return Err(invalid("orbit.elevation", format!("must lie in (-90, 90), got {}", o.elevation)));
                }
                if let Some(r) = o.radius.filter(|r| !(r.is_finite() && *r > 0.0)) {
                    return Err(invalid("orbit.radius", format!("must be positive, got {r}")));
                }
                PoseSpec::Orbit(o.clone())
            }
            _ => return Err(invalid("pose", "give exactly one of pose_index, pose_matrix or orbit")),
        };
        let style = match (&self.style_id, &self.style_a, &self.style_b, self.lambda, self.intensity) {
            (Some(id), None, None, None, None) => StyleSpec::Single(id.clone()),
            (None, Some(a), Some(b), Some(lambda), None) => StyleSpec::Pair {
                a: a.clone(),
                b: b.clone(),
                lambda: unit_interval("lambda", lambda)?,
            },
            (Some(id), None, None, None, Some(intensity)) => StyleSpec::Intensity {
                id: id.clone(),
                intensity: unit_interval("intensity", intensity)?,
            },
            _ => {
                return Err(invalid(
                    "style",
                    "give exactly one of style_id, style_a + style_b + lambda, or style_id + intensity",
                ))
            }
        };
        if !RESOLUTIONS.contains(&self.resolution) {
            return Err(invalid("resolution", format!("must be one of {RESOLUTIONS:?}, got {}", self.resolution)));
        }
        Ok(ValidRequest {
            pose,
            style,
            resolution: self.resolution,
            seed: self.seed,
        })
    }
}

fn style(model: &MultiStyleModel, id: &str) -> Result<StyleStatistics, RequestError> {
    model.style(id).map_err(|_| RequestError::UnknownStyle(id.to_string()))
}

impl ValidRequest {
    /// Style statistics through the model's interpolation operations.
    pub fn statistics(&self, model: &MultiStyleModel) -> Result<StyleStatistics, RequestError> {
        match &self.style {
            StyleSpec::Single(id) => style(model, id),
            StyleSpec::Pair { a, b, lambda } => interpolate_styles(&style(model, a)?, &style(model, b)?, *lambda)
                .map_err(|e| invalid("lambda", e.to_string())),
            StyleSpec::Intensity { id, intensity } => {
                let target = style(model, id)?;
                let content = model
                    .style(CONTENT_STYLE_ID)
                    .map_err(|_| invalid("intensity", "the model has no content style to blend from"))?;
                set_intensity(&target, &content, *intensity).map_err(|e| invalid("intensity", e.to_string()))
            }
        }
    }

    /// Square camera at the requested resolution. Intrinsics follow the first
    /// training camera, scaled to keep its field of view.
    pub fn camera(&self, model: &MultiStyleModel) -> Result<CameraPose, RequestError> {
        let reference = model.camera(0).map_err(|e| invalid("pose", e.to_string()))?;
        let res = self.resolution;
        let focal = reference.focal * res as f64 / reference.width as f64;
        match &self.pose {
            PoseSpec::Index(i) => {
                let pose = model.camera(*i).map_err(|e| invalid("pose_index", e.to_string()))?;
                let focal = pose.focal * res as f64 / pose.width as f64;
                Ok(CameraPose { focal, width: res, height: res, ..pose })
            }
            PoseSpec::Matrix(m) => {
                let m = nalgebra::Matrix4::from_fn(|r, c| m[r][c]);
                CameraPose::from_matrix(&m, focal, res, res).map_err(|e| invalid("pose_matrix", e.to_string()))
            }
            PoseSpec::Orbit(o) => {
                let radius = o.radius.unwrap_or_else(|| mean_radius(model));
                CameraPose::orbit(o.azimuth, o.elevation, radius, focal, res, res)
                    .map_err(|e| invalid("orbit", e.to_string()))
            }
        }
    }
}

/// Mean distance of the training cameras from the origin.
pub fn mean_radius(model: &MultiStyleModel) -> f64 {
    let radii: Vec<f64> = (0..model.cameras.len())
        .filter_map(|i| model.camera(i).ok())
        .map(|p| p.translation.norm())
        .collect();
    radii.iter().sum::<f64>() / radii.len().max(1) as f64
}
