//! Network descriptions, searchable mixture layers and layer cost counting.

mod choice;
mod model;
mod spec;

pub use choice::{format_assignment, parse_assignment, Assignment, ChoiceKey, ComputeMode, SearchMode};
pub use model::{
    argmax_assignment, sample_assignment, BoundParams, LayerWeights, MixtureLayer, Model, ModelSnapshot,
    Route, Trainable, SATURATION,
};
pub use spec::{
    count_macs, count_weights, preset, weighted_geometry, LayerCost, LayerSpec, LayerType, NetworkSpec,
    ResolvedLayer, ResolvedNetwork, Shape, WeightedGeometry, NETWORK_INPUT, PRESETS,
};
