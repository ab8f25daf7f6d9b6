//! Experiment configuration: one TOML document covering every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cav::CavHyper;
use crate::consistency::{OptimiseConfig, DEFAULT_GAMMA};
use crate::elements::{CombinationRule, DatasetConfig, ProbeSizes, SpatialAxes};
use crate::entanglement::DEFAULT_PAIR_THRESHOLD;
use crate::error::{Error, Result};
use crate::nn::{LayerId, ModelConfig, Preset, TrainConfig};
use crate::tcav::DEFAULT_P_THRESHOLD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetPreset {
    Simple,
    Standard,
    Spatial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub preset: DatasetPreset,
    pub combination_rule: CombinationRule,
    pub image_side: u32,
    pub elements_per_image: usize,
    pub spatial_axes: SpatialAxes,
    pub seed: u64,
    pub train_images: usize,
    pub validation_images: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            preset: DatasetPreset::Simple,
            combination_rule: CombinationRule::E1Unrestricted,
            image_side: crate::elements::config::DESK_IMAGE_SIDE,
            elements_per_image: 4,
            spatial_axes: SpatialAxes::default(),
            seed: 0,
            train_images: 20_000,
            validation_images: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Defaults to the preset matching the dataset.
    pub preset: Option<Preset>,
    /// Overrides the preset's channel widths.
    pub channels_per_layer: Option<Vec<usize>>,
    pub hidden_units: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub train: usize,
    pub test: usize,
    /// Random negative sets, and CAVs per concept family.
    pub r: usize,
    /// Random CAVs per layer.
    pub random_cavs: usize,
    pub l2: f64,
    pub iterations: usize,
    /// Probe labels to capture and train, such as `red` or `striped@left`.
    pub concepts: Vec<String>,
    /// Layers to capture; empty means every layer.
    pub layers: Vec<LayerId>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let h = CavHyper::default();
        let s = ProbeSizes::default();
        ProbeSection {
            train: s.train,
            test: s.test,
            r: 30,
            random_cavs: 30,
            l2: h.l2,
            iterations: h.iterations,
            concepts: Vec::new(),
            layers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcavSection {
    pub class_inputs: usize,
    pub p_threshold: f64,
    /// Removed from the eligible layers.
    pub omit_layers: Vec<LayerId>,
    /// Classes to score; empty means every class.
    pub classes: Vec<String>,
}

impl Default for TcavSection {
    fn default() -> Self {
        TcavSection {
            class_inputs: 200,
            p_threshold: DEFAULT_P_THRESHOLD,
            omit_layers: vec![LayerId(1)],
            classes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencySection {
    pub concept: String,
    pub l1: LayerId,
    pub l2: LayerId,
    pub gamma: f64,
    pub recentre: bool,
    pub seed: u64,
    pub inputs: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub patience: usize,
}

impl Default for ConsistencySection {
    fn default() -> Self {
        let o = OptimiseConfig::default();
        ConsistencySection {
            concept: "striped".into(),
            l1: LayerId(2),
            l2: LayerId(3),
            gamma: DEFAULT_GAMMA,
            recentre: true,
            seed: 0,
            inputs: o.inputs,
            learning_rate: o.learning_rate,
            steps: o.steps,
            patience: o.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntanglementSection {
    pub pair_threshold: f64,
}

impl Default for EntanglementSection {
    fn default() -> Self {
        EntanglementSection {
            pair_threshold: DEFAULT_PAIR_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialSection {
    pub dependence_threshold: f64,
    /// Half-mass fraction above which a grid counts as concentrated.
    pub mass_threshold: f64,
}

impl Default for SpatialSection {
    fn default() -> Self {
        SpatialSection {
            dependence_threshold: DEFAULT_PAIR_THRESHOLD,
            mass_threshold: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub probes: ProbeSection,
    pub tcav: TcavSection,
    pub consistency: ConsistencySection,
    pub entanglement: EntanglementSection,
    pub spatial: SpatialSection,
}

impl LabConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: LabConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.dataset;
        let base = match d.preset {
            DatasetPreset::Simple => DatasetConfig::simple(d.seed),
            DatasetPreset::Standard => DatasetConfig::standard(d.seed),
            DatasetPreset::Spatial => DatasetConfig::spatial(d.seed),
        };
        let mut config = base
            .with_rule(d.combination_rule)
            .with_image_side(d.image_side);
        config.elements_per_image = d.elements_per_image;
        config.spatial_axes = d.spatial_axes;
        config
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let preset = self.model.preset.unwrap_or(match self.dataset.preset {
            DatasetPreset::Simple => Preset::Simple,
            DatasetPreset::Standard => Preset::Standard,
            DatasetPreset::Spatial => Preset::Spatial,
        });
        let mut config = ModelConfig::preset(preset, num_classes, self.dataset.image_side as usize);
        if let Some(channels) = &self.model.channels_per_layer {
            config.channels_per_layer = channels.clone();
        }
        config.hidden_units = self.model.hidden_units;
        config
    }

    pub fn probe_sizes(&self) -> ProbeSizes {
        ProbeSizes {
            train: self.probes.train,
            test: self.probes.test,
        }
    }

    pub fn cav_hyper(&self) -> CavHyper {
        CavHyper {
            l2: self.probes.l2,
            iterations: self.probes.iterations,
            train_fraction: self.probes.train as f64
                / (self.probes.train + self.probes.test) as f64,
        }
    }

    pub fn optimise_config(&self) -> OptimiseConfig {
        let c = &self.consistency;
        OptimiseConfig {
            learning_rate: c.learning_rate,
            steps: c.steps,
            inputs: c.inputs,
            patience: c.patience,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dc = self.dataset_config();
        dc.validate()?;
        let mc = self.model_config(crate::elements::ClassTable::build(&dc).len());
        mc.validate()?;
        let depth = mc.channels_per_layer.len();
        let named = self.probes.layers.iter().chain(&self.tcav.omit_layers);
        for layer in named.chain([&self.consistency.l1, &self.consistency.l2]) {
            if layer.0 >= depth {
                return Err(Error::InvalidLayer(format!(
                    "{layer} (model has {depth} layers)"
                )));
            }
        }
        let p = &self.probes;
        if p.train == 0 || p.test == 0 {
            return Err(Error::Config(
                "probe train and test sizes must be positive".into(),
            ));
        }
        if p.r < 2 {
            return Err(Error::Config("probes.r must be at least 2".into()));
        }
        if self.dataset.train_images == 0 {
            return Err(Error::Config(
                "dataset.train_images must be positive".into(),
            ));
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tcav.p_threshold) {
            return Err(Error::Config("tcav.p_threshold must lie in [0, 1]".into()));
        }
        if self.tcav.class_inputs < 1 {
            return Err(Error::Config("tcav.class_inputs must be positive".into()));
        }
        if self.consistency.l1 >= self.consistency.l2 {
            return Err(Error::Config(
                "consistency.l1 must precede consistency.l2".into(),
            ));
        }
        Ok(())
    }
}
