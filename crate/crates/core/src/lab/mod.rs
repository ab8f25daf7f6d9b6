//! Experiment pipeline: configuration, a content-addressed artifact store
//! and the stages gen, train, capture, cav, tcav, consistency, entangle,
//! spatial and report.
//!
//! Each stage's digest hashes its own configuration together with the
//! digests of the stages it reads, so a stage is skipped when its manifest
//! already exists and any change upstream moves every dependent artifact.

pub mod config;
pub mod report;
pub mod stages;
pub mod store;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cav::{random_pairs, Activations, CavFamily, CavStore};
use crate::elements::{
    ClassTable, Concept, Dataset, DatasetConfig, DatasetManifest, Region, Split,
};
use crate::error::{Error, Result};
use crate::nn::{load_model, LayerId, ModelConfig, Network};
use crate::tcav::eligible_layers;

pub use config::LabConfig;
pub use stages::StageOutcome;
pub use store::{StageManifest, Store};

/// One probe set: a concept, optionally confined to a region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub label: String,
    pub concept: Concept,
    pub region: Option<Region>,
}

impl ProbeSpec {
    pub fn parse(label: &str) -> Result<Self> {
        let label = label.trim();
        let (concept, region) = match label.split_once('@') {
            Some((c, r)) => (c.parse::<Concept>()?, Some(r.parse::<Region>()?)),
            None => (label.parse::<Concept>()?, None),
        };
        Ok(ProbeSpec {
            label: crate::elements::probe::probe_label(concept, region),
            concept,
            region,
        })
    }
}

/// File-system name of a probe or random set label.
pub fn file_label(label: &str) -> String {
    label.replace('/', "_")
}

pub fn random_label(r: usize) -> String {
    format!("random/{r}")
}

pub const STAGES: [&str; 9] = [
    "gen",
    "train",
    "capture",
    "cav",
    "tcav",
    "consistency",
    "entangle",
    "spatial",
    "report",
];

/// A configured experiment bound to an artifact store.
#[derive(Debug, Clone)]
pub struct Lab {
    pub config: LabConfig,
    pub store: Store,
    /// Print per-step progress to stderr.
    pub progress: bool,
}

impl Lab {
    pub fn new(config: LabConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Lab {
            config,
            store: Store::open(out)?,
            progress: false,
        })
    }

    pub(crate) fn note(&self, msg: impl AsRef<str>) {
        if self.progress {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        self.config.dataset_config()
    }

    pub fn class_table(&self) -> ClassTable {
        ClassTable::build(&self.dataset_config())
    }

    pub fn model_config(&self) -> ModelConfig {
        self.config.model_config(self.class_table().len())
    }

    /// Probe sets to capture: the configured labels, or every concept.
    pub fn probe_specs(&self) -> Result<Vec<ProbeSpec>> {
        let dc = self.dataset_config();
        let specs: Vec<ProbeSpec> = if self.config.probes.concepts.is_empty() {
            Concept::all(&dc)
                .into_iter()
                .map(|c| ProbeSpec {
                    label: c.to_string(),
                    concept: c,
                    region: None,
                })
                .collect()
        } else {
            self.config
                .probes
                .concepts
                .iter()
                .map(|l| ProbeSpec::parse(l))
                .collect::<Result<_>>()?
        };
        for s in &specs {
            if !s.concept.in_config(&dc) {
                return Err(Error::Config(format!(
                    "concept `{}` is not in the dataset",
                    s.concept
                )));
            }
        }
        let mut labels: Vec<&str> = specs.iter().map(|s| s.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("probe concepts must be distinct".into()));
        }
        Ok(specs)
    }

    /// Layers captured and probed: the configured list, or every layer.
    pub fn capture_layers(&self) -> Result<Vec<LayerId>> {
        let mc = self.model_config();
        if self.config.probes.layers.is_empty() {
            return Ok(mc.layers());
        }
        let mut layers = self.config.probes.layers.clone();
        layers.sort_unstable();
        layers.dedup();
        for &l in &layers {
            mc.check_layer(l)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(layers)
    }

    /// Captured layers that are eligible for TCAV.
    pub fn tcav_layers(&self) -> Result<Vec<LayerId>> {
        let eligible = eligible_layers(&self.model_config(), &self.config.tcav.omit_layers);
        Ok(self
            .capture_layers()?
            .into_iter()
            .filter(|l| eligible.contains(l))
            .collect())
    }

    /// Class names selected for scoring (`default` when none are configured).
    pub fn class_selection(
        &self,
        default: impl Fn(&ClassTable) -> Vec<String>,
    ) -> Result<Vec<(usize, String)>> {
        let table = self.class_table();
        let names = if self.config.tcav.classes.is_empty() {
            default(&table)
        } else {
            self.config.tcav.classes.clone()
        };
        names
            .into_iter()
            .map(|n| {
                let n = n.trim().to_string();
                table
                    .index_of(&n)
                    .map(|i| (i, n.clone()))
                    .map_err(|_| Error::Config(format!("unknown class `{n}`")))
            })
            .collect()
    }

    // Digests. Each hashes the stage's own inputs plus upstream digests.

    pub fn gen_inputs(&self) -> serde_json::Value {
        json!({
            "dataset": self.dataset_config(),
            "train_images": self.config.dataset.train_images,
            "validation_images": self.config.dataset.validation_images,
        })
    }

    pub fn gen_digest(&self) -> Result<String> {
        store::digest_of(&("gen", self.gen_inputs()))
    }

    pub fn train_inputs(&self) -> Result<serde_json::Value> {
        Ok(json!({
            "gen": self.gen_digest()?,
            "model": self.model_config(),
            "training": self.config.training,
        }))
    }

    pub fn train_digest(&self) -> Result<String> {
        store::digest_of(&("train", self.train_inputs()?))
    }

    pub fn capture_inputs(&self) -> Result<serde_json::Value> {
        Ok(json!({
            "train": self.train_digest()?,
            "probe_sizes": self.config.probe_sizes(),
            "random_sets": self.config.probes.r,
            "probes": self.probe_specs()?.iter().map(|s| s.label.clone()).collect::<Vec<_>>(),
            "layers": self.capture_layers()?,
            "standardization": "none (raw activations)",
        }))
    }

    pub fn capture_digest(&self) -> Result<String> {
        store::digest_of(&("capture", self.capture_inputs()?))
    }

    pub fn cav_inputs(&self) -> Result<serde_json::Value> {
        Ok(json!({
            "capture": self.capture_digest()?,
            "hyper": self.config.cav_hyper(),
            "random_cavs": self.config.probes.random_cavs,
            "classifier": "L2-regularised logistic regression, full-batch gradient descent",
        }))
    }

    pub fn cav_digest(&self) -> Result<String> {
        store::digest_of(&("cav", self.cav_inputs()?))
    }

    pub fn tcav_inputs(&self) -> Result<serde_json::Value> {
        Ok(json!({
            "cav": self.cav_digest()?,
            "tcav": self.config.tcav,
            "layers": self.tcav_layers()?,
        }))
    }

    pub fn tcav_digest(&self) -> Result<String> {
        store::digest_of(&("tcav", self.tcav_inputs()?))
    }

    pub fn consistency_inputs(&self) -> Result<serde_json::Value> {
        Ok(json!({
            "cav": self.cav_digest()?,
            "consistency": self.config.consistency,
        }))
    }

    pub fn consistency_digest(&self) -> Result<String> {
        store::digest_of(&("consistency", self.consistency_inputs()?))
    }

    pub fn entangle_inputs(&self) -> Result<serde_json::Value> {
        Ok(json!({
            "cav": self.cav_digest()?,
            "entanglement": self.config.entanglement,
        }))
    }

    pub fn entangle_digest(&self) -> Result<String> {
        store::digest_of(&("entangle", self.entangle_inputs()?))
    }

    pub fn spatial_inputs(&self) -> Result<serde_json::Value> {
        Ok(json!({
            "cav": self.cav_digest()?,
            "tcav": self.config.tcav,
            "layers": self.tcav_layers()?,
            "spatial": self.config.spatial,
        }))
    }

    pub fn spatial_digest(&self) -> Result<String> {
        store::digest_of(&("spatial", self.spatial_inputs()?))
    }

    pub fn stage_digest(&self, stage: &str) -> Result<String> {
        match stage {
            "gen" => self.gen_digest(),
            "train" => self.train_digest(),
            "capture" => self.capture_digest(),
            "cav" => self.cav_digest(),
            "tcav" => self.tcav_digest(),
            "consistency" => self.consistency_digest(),
            "entangle" => self.entangle_digest(),
            "spatial" => self.spatial_digest(),
            "report" => self.report_digest(),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }

    /// Hashes the digests of the analyses present in the store, so the
    /// report moves whenever another analysis is added.
    pub fn report_digest(&self) -> Result<String> {
        let mut present = Vec::new();
        for s in [
            "gen",
            "train",
            "capture",
            "cav",
            "tcav",
            "consistency",
            "entangle",
            "spatial",
        ] {
            let d = self.stage_digest(s)?;
            if self.store.has(s, &d) {
                present.push((s.to_string(), d));
            }
        }
        store::digest_of(&("report", present))
    }

    // Artifact access.

    pub fn manifest(&self, stage: &str) -> Result<StageManifest> {
        self.store.read_manifest(stage, &self.stage_digest(stage)?)
    }

    pub fn manifest_ref(&self, stage: &str) -> Result<String> {
        let d = self.stage_digest(stage)?;
        Ok(self.store.relative(&self.store.manifest_path(stage, &d)))
    }

    pub fn dataset(&self, split: Split) -> Result<Dataset> {
        let d = self.gen_digest()?;
        self.store.read_manifest("gen", &d)?;
        let name = match split {
            Split::Train => "train.json",
            Split::Validation => "validation.json",
        };
        Dataset::from_manifest(DatasetManifest::read(
            &self.store.dir_path("datasets", &d).join(name),
        )?)
    }

    pub fn model_stem(&self) -> Result<PathBuf> {
        Ok(self
            .store
            .dir_path("models", &self.train_digest()?)
            .join("model"))
    }

    pub fn network(&self) -> Result<Network<f32>> {
        self.store.read_manifest("train", &self.train_digest()?)?;
        Ok(load_model(&self.model_stem()?)?.network)
    }

    pub fn activation_path(&self, label: &str, layer: LayerId) -> Result<PathBuf> {
        Ok(self
            .store
            .dir_path("activations", &self.capture_digest()?)
            .join(format!("{}__{layer}.cava", file_label(label))))
    }

    pub fn activations(&self, label: &str, layer: LayerId) -> Result<Activations> {
        store::read_activations(&self.activation_path(label, layer)?)
    }

    /// Held-out rows of a captured set.
    pub fn test_activations(&self, label: &str, layer: LayerId) -> Result<Activations> {
        let a = self.activations(label, layer)?;
        let from = self.config.probes.train.min(a.rows());
        Ok(a.slice(from, a.rows()))
    }

    pub fn cav_store(&self) -> Result<CavStore> {
        let d = self.cav_digest()?;
        self.store.read_manifest("cav", &d)?;
        CavStore::open(self.store.dir_path("cavs", &d))
    }

    pub fn family(&self, cavs: &CavStore, label: &str, layer: LayerId) -> Result<CavFamily> {
        Ok(CavFamily {
            concept: label.to_string(),
            layer,
            cavs: (0..self.config.probes.r)
                .map(|r| cavs.get(label, layer, r))
                .collect::<Result<_>>()?,
        })
    }

    pub fn random_family(&self, cavs: &CavStore, layer: LayerId) -> Result<CavFamily> {
        let pairs = random_pairs(self.config.probes.r, self.config.probes.random_cavs)?;
        Ok(CavFamily {
            concept: "random".into(),
            layer,
            cavs: pairs
                .iter()
                .map(|&(i, j)| cavs.get(&random_label(i), layer, j))
                .collect::<Result<_>>()?,
        })
    }
}
