//! Post-hoc explanations of frozen forecasters.

pub mod occlusion;
pub mod saliency;
pub mod scoremax;

pub use occlusion::{
    mask, occlusion_map, percentage_change, regions, valid_patch_sizes, Fill, Labels, OcclusionMode,
    OcclusionSpec, OcclusionTarget, Region,
};
pub use saliency::{ramp_color, SaliencyMap};
pub use scoremax::{lag_maps, score, score_maximize, ScoremaxConfig, ScoremaxResult};
