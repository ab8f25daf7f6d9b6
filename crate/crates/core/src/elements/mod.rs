//! Synthetic elements scenes: configuration, sampling, rendering, ground
//! truth classes and probe datasets.

pub mod classes;
pub mod config;
pub mod dataset;
pub mod probe;
pub mod render;
pub mod scene;

pub use classes::{assign_classes, ClassDef, ClassTable, Concept};
pub use config::{Axis, Colour, CombinationRule, DatasetConfig, Shape, SpatialAxes, Texture};
pub use dataset::{class_inputs, Dataset, DatasetManifest, Split};
pub use probe::{build_probe, positive_set, random_set, ProbeDataset, ProbeSizes};
pub use render::render_image;
pub use scene::{
    sample_scene, sample_scene_with, ElementConstraint, ElementSpec, Region, SceneSpec,
};
