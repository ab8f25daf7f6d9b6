use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classes::ClassTable;
use super::config::DatasetConfig;
use super::probe::render_all;
use super::scene::{sample_scene, SceneSpec, MAX_PLACEMENT_ATTEMPTS};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::ImageTensor;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Named disjoint splits; each draws from its own RNG domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    fn domain(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

/// Scenes plus the class table they are labelled against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub table: ClassTable,
    pub split: Split,
    pub scenes: Vec<SceneSpec>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig, split: Split, count: usize) -> Result<Self> {
        config.validate()?;
        let scenes = (0..count as u64)
            .into_par_iter()
            .map(|i| sample_scene(config, &mut stream(config.seed, split.domain(), i), i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config: config.clone(),
            table: ClassTable::build(config),
            split,
            scenes,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn labels(&self, index: usize) -> Vec<bool> {
        self.table.assign(&self.scenes[index])
    }

    pub fn images(&self, indices: &[usize]) -> Vec<ImageTensor> {
        let scenes: Vec<SceneSpec> = indices.iter().map(|&i| self.scenes[i].clone()).collect();
        render_all(&scenes, &self.config)
    }

    /// Structured manifest (config, class table, scenes, generator choices).
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            schema_version: DATASET_SCHEMA_VERSION,
            config: self.config.clone(),
            split: self.split,
            class_names: self.table.names(),
            generator: GeneratorChoices::current(&self.config),
            scenes: self.scenes.clone(),
        }
    }

    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        if manifest.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::SchemaMismatch {
                expected: DATASET_SCHEMA_VERSION,
                found: manifest.schema_version,
            });
        }
        let table = ClassTable::build(&manifest.config);
        if table.names() != manifest.class_names {
            return Err(Error::Config(
                "class table does not match configuration".into(),
            ));
        }
        Ok(Dataset {
            config: manifest.config,
            table,
            split: manifest.split,
            scenes: manifest.scenes,
        })
    }
}

/// Generator parameters that are choices rather than measured facts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorChoices {
    pub overlap_policy: String,
    pub max_placement_attempts: usize,
    pub spot_radius_fraction: f32,
    pub spot_period_fraction: f32,
    pub stripe_angle_degrees: f32,
    pub stripe_period_fraction: f32,
    pub spatial_class_membership: String,
}

impl GeneratorChoices {
    pub fn current(config: &DatasetConfig) -> Self {
        let g = config.texture_geometry;
        GeneratorChoices {
            overlap_policy: "reject overlapping bounding boxes".into(),
            max_placement_attempts: MAX_PLACEMENT_ATTEMPTS,
            spot_radius_fraction: g.spot_radius,
            spot_period_fraction: g.spot_period,
            stripe_angle_degrees: 45.0,
            stripe_period_fraction: g.stripe_period,
            spatial_class_membership: "element centre strictly inside the half".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: DatasetConfig,
    pub split: Split,
    pub class_names: Vec<String>,
    pub generator: GeneratorChoices,
    pub scenes: Vec<SceneSpec>,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Fresh in-class scenes for a class, drawn by rejection from a per-class stream.
pub fn class_inputs(
    config: &DatasetConfig,
    table: &ClassTable,
    class: usize,
    count: usize,
) -> Result<Vec<SceneSpec>> {
    let def = table.classes.get(class).ok_or(Error::InvalidClass {
        index: class,
        count: table.len(),
    })?;
    let domain = format!("class/{}", def.name());
    let budget = (count as u64).max(1) * 10_000;
    let mut out = Vec::with_capacity(count);
    let mut i = 0u64;
    while out.len() < count {
        if i >= budget {
            return Err(Error::Numeric(format!(
                "class `{}` produced only {} of {count} inputs",
                def.name(),
                out.len()
            )));
        }
        let scene = sample_scene(config, &mut stream(config.seed, &domain, i), i)?;
        if def.matches(&scene, config.image_side) {
            out.push(scene);
        }
        i += 1;
    }
    Ok(out)
}
