//! Ray geometry, positional encoding, depth sampling and compositing shared
//! by the scene and stylization stages.

pub mod camera;
pub mod composite;
pub mod encoding;
pub mod sampling;

pub use camera::{generate_rays, orbit_sweep, CameraPose, Ray};
pub use composite::{
    composite, composite_backward, composite_tensor, deltas_from_depths, CompositeGradient, Composited,
    CompositedTensor, QuadratureBatch,
};
pub use encoding::{encoded_dim, positional_encode, positional_encode_tensor, DIRECTION_LEVELS, POSITION_LEVELS};
pub use sampling::{
    hierarchical_sample, merge_sorted, stratified_sample, ConstantSource, RngSource, SequenceSource, UniformSource,
    WEIGHT_FLOOR,
};
