//! Stage implementations. Every stage returns early when its manifest
//! already exists, which is what makes reruns cheap and byte-identical.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::report::{self, Envelope, Heatmap, HEATMAP_SCHEMA, HEATMAP_SCHEMA_FILE};
use super::store::{self, write_json, StageManifest, MANIFEST_SCHEMA_VERSION, TOOL_VERSION};
use super::{file_label, random_label, Lab, ProbeSpec};
use crate::cav::{random_cavs, train_family, write_accuracy_csv, Activations, CavFamily, CavStore};
use crate::consistency::{
    consistency_experiment, gamma_sweep, linear_fit, verify_theory_cases, ConsistencyContext,
    ConsistencyReport, ExperimentConfig, TheoryCase, TheoryVerdict, Variant,
};
use crate::elements::probe::{positive_set, random_set, render_all};
use crate::elements::{class_inputs, Dataset, Split};
use crate::entanglement::{
    cosine_matrix, family_dots, family_entanglement, ProbeActivations, SimilarityMatrix,
};
use crate::error::{Error, Result};
use crate::nn::{evaluate, save_model, train_with, LayerId, Network};
use crate::spatial::{
    family_mean_grid, spatial_dependence_test, spatial_tcav_suite, Reduction, SpatialGrid,
    SuiteEntry,
};
use crate::tcav::{
    layer_consistency_score, tcav_report, ClassGradients, ConsistencyScoreReport, TcavReport,
};
use crate::tensor::ImageTensor;

/// Gradient batch size for TCAV.
const GRADIENT_BATCH: usize = 50;

/// Perturbation scales of the consistency sweep.
pub const GAMMA_SWEEP: [f64; 5] = [0.0, 0.005, 0.01, 0.015, 0.02];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: String,
    pub digest: String,
    pub cached: bool,
    pub manifest: PathBuf,
    /// One-line summary for the terminal.
    pub line: String,
}

fn flatten(images: &[ImageTensor]) -> Vec<f32> {
    let mut x = Vec::with_capacity(images.iter().map(ImageTensor::len).sum());
    for i in images {
        x.extend_from_slice(&i.data);
    }
    x
}

impl Lab {
    fn cached(&self, stage: &str, digest: &str) -> Result<Option<StageOutcome>> {
        if !self.store.has(stage, digest) {
            return Ok(None);
        }
        let m = self.store.read_manifest(stage, digest)?;
        Ok(Some(StageOutcome {
            stage: stage.to_string(),
            digest: digest.to_string(),
            cached: true,
            manifest: self.store.manifest_path(stage, digest),
            line: format!("{stage} {digest} cached: {}", summary_line(&m.summary)),
        }))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        stage: &str,
        digest: &str,
        upstream: &[&str],
        inputs: serde_json::Value,
        artifacts: &[PathBuf],
        summary: serde_json::Value,
    ) -> Result<StageOutcome> {
        let up = upstream
            .iter()
            .map(|s| Ok((s.to_string(), self.stage_digest(s)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let manifest = StageManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            stage: stage.to_string(),
            digest: digest.to_string(),
            upstream: up,
            inputs,
            artifacts: self.store.hash_artifacts(artifacts)?,
            summary: summary.clone(),
        };
        let path = self.store.write_manifest(&manifest)?;
        Ok(StageOutcome {
            stage: stage.to_string(),
            digest: digest.to_string(),
            cached: false,
            manifest: path,
            line: format!("{stage} {digest}: {}", summary_line(&summary)),
        })
    }

    pub fn run_stage(&self, stage: &str) -> Result<StageOutcome> {
        match stage {
            "gen" => self.gen(),
            "train" => self.train(),
            "capture" => self.capture(),
            "cav" => self.cav(),
            "tcav" => self.tcav(),
            "consistency" => self.consistency(),
            "entangle" => self.entangle(),
            "spatial" => self.spatial(),
            "report" => self.report(),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }

    pub fn gen(&self) -> Result<StageOutcome> {
        let digest = self.gen_digest()?;
        if let Some(c) = self.cached("gen", &digest)? {
            return Ok(c);
        }
        let dc = self.dataset_config();
        let dir = self.store.dir("datasets", &digest)?;
        let mut paths = Vec::new();
        let mut sizes = Vec::new();
        for (split, count, name) in [
            (Split::Train, self.config.dataset.train_images, "train.json"),
            (
                Split::Validation,
                self.config.dataset.validation_images,
                "validation.json",
            ),
        ] {
            let data = Dataset::generate(&dc, split, count)?;
            let path = dir.join(name);
            write_json(&path, &data.manifest())?;
            sizes.push(data.len());
            paths.push(path);
        }
        let classes = self.class_table().len();
        self.finish(
            "gen",
            &digest,
            &[],
            self.gen_inputs(),
            &paths,
            json!({"classes": classes, "train_images": sizes[0], "validation_images": sizes[1]}),
        )
    }

    pub fn train(&self) -> Result<StageOutcome> {
        let digest = self.train_digest()?;
        if let Some(c) = self.cached("train", &digest)? {
            return Ok(c);
        }
        let train = self.dataset(Split::Train)?;
        let validation = self.dataset(Split::Validation)?;
        let mc = self.model_config();
        let mut model = train_with(&mc, &train, &self.config.training, |r| {
            self.note(format!(
                "  epoch {} loss {:.5} batch accuracy {:.5} train accuracy {} ({:.0}s)",
                r.epoch,
                r.loss,
                r.batch_accuracy,
                r.train_accuracy.map_or("-".into(), |a| format!("{a:.5}")),
                r.seconds
            ))
        })?;
        if model.log.final_train_accuracy.is_none() {
            model.log.final_train_accuracy = Some(evaluate(&model.network, &train, 64)?.accuracy);
        }
        let val = if validation.is_empty() {
            None
        } else {
            Some(evaluate(&model.network, &validation, 64)?.accuracy)
        };
        model.log.validation_accuracy = val;
        let stem = self.model_stem()?;
        std::fs::create_dir_all(stem.parent().expect("model dir"))?;
        save_model(&model, &stem)?;
        // Timings are excluded from the log digest so it is reproducible.
        let mut timeless = model.log.clone();
        timeless.total_seconds = 0.0;
        timeless.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        let summary = json!({
            "epochs": model.log.epochs.len(),
            "converged": model.log.converged,
            "train_accuracy": model.log.final_train_accuracy,
            "validation_accuracy": val,
            "warning": model.log.warning,
            "training_log_digest": store::digest_of(&timeless)?,
        });
        let inputs = self.train_inputs()?;
        self.finish(
            "train",
            &digest,
            &["gen"],
            inputs,
            &[stem.with_extension("cavm")],
            summary,
        )
    }

    pub fn capture(&self) -> Result<StageOutcome> {
        let digest = self.capture_digest()?;
        if let Some(c) = self.cached("capture", &digest)? {
            return Ok(c);
        }
        let net = self.network()?;
        let dc = self.dataset_config();
        let layers = self.capture_layers()?;
        let total = self.config.probe_sizes().total();
        self.store.dir("activations", &digest)?;
        let mut sets: Vec<(String, Vec<crate::elements::SceneSpec>)> = Vec::new();
        for spec in self.probe_specs()? {
            sets.push((
                spec.label.clone(),
                positive_set(&dc, spec.concept, spec.region, total)?,
            ));
        }
        for r in 0..self.config.probes.r {
            sets.push((random_label(r), random_set(&dc, r, total)?));
        }
        let mut paths = Vec::new();
        for (label, scenes) in &sets {
            self.note(format!("  capture {label}"));
            let x = flatten(&render_all(scenes, &dc));
            let acts = net.capture(&x, scenes.len(), &layers)?;
            for (&layer, a) in layers.iter().zip(acts) {
                let path = self.activation_path(label, layer)?;
                store::write_activations(&path, &Activations::new(net.layer_dim(layer), a)?)?;
                paths.push(path);
            }
        }
        let summary = json!({"sets": sets.len(), "layers": layers.len(), "images_per_set": total});
        let inputs = self.capture_inputs()?;
        self.finish("capture", &digest, &["train"], inputs, &paths, summary)
    }

    pub fn cav(&self) -> Result<StageOutcome> {
        let digest = self.cav_digest()?;
        if let Some(c) = self.cached("cav", &digest)? {
            return Ok(c);
        }
        self.store
            .read_manifest("capture", &self.capture_digest()?)?;
        let dir = self.store.dir("cavs", &digest)?;
        let cavs = CavStore::open(&dir)?;
        let hyper = self.config.cav_hyper();
        let r = self.config.probes.r;
        let specs = self.probe_specs()?;
        let mut all = Vec::new();
        let mut families = Vec::new();
        for layer in self.capture_layers()? {
            self.note(format!("  cav {layer}"));
            let randoms: Vec<Activations> = (0..r)
                .map(|i| self.activations(&random_label(i), layer))
                .collect::<Result<_>>()?;
            let refs: Vec<&Activations> = randoms.iter().collect();
            let random = random_cavs(layer, &refs, self.config.probes.random_cavs, &hyper)?;
            let negatives: Vec<(usize, &Activations)> = randoms.iter().enumerate().collect();
            let mut layer_families = vec![random];
            for spec in &specs {
                let pos = self.activations(&spec.label, layer)?;
                layer_families.push(train_family(&spec.label, layer, &pos, &negatives, &hyper)?);
            }
            for f in &layer_families {
                cavs.put_family(f)?;
                families.push(FamilySummary::of(f));
                all.extend(f.cavs.iter().cloned());
            }
        }
        let csv = dir.join("accuracy.csv");
        write_accuracy_csv(&csv, &all)?;
        let fam_path = dir.join("families.json");
        write_json(&fam_path, &families)?;
        let mut artifacts = vec![csv, fam_path];
        artifacts.extend(all.iter().map(|c| cavs.path_for(&c.concept, c.layer, c.r)));
        let summary = json!({"cavs": all.len(), "families": families.len()});
        let inputs = self.cav_inputs()?;
        self.finish("cav", &digest, &["capture"], inputs, &artifacts, summary)
    }

    /// Per-family accuracy summaries written by the cav stage.
    pub fn family_summaries(&self) -> Result<Vec<FamilySummary>> {
        let d = self.cav_digest()?;
        self.store.read_manifest("cav", &d)?;
        store::read_json(&self.store.dir_path("cavs", &d).join("families.json"))
    }

    fn class_gradients(
        &self,
        net: &Network<f32>,
        class: usize,
        layers: &[LayerId],
    ) -> Result<ClassGradients> {
        let dc = self.dataset_config();
        let table = self.class_table();
        let n = self.config.tcav.class_inputs;
        let scenes = class_inputs(&dc, &table, class, n)?;
        let x = flatten(&render_all(&scenes, &dc));
        ClassGradients::compute(net, &x, n, class, layers, GRADIENT_BATCH)
    }

    pub fn tcav(&self) -> Result<StageOutcome> {
        let digest = self.tcav_digest()?;
        if let Some(c) = self.cached("tcav", &digest)? {
            return Ok(c);
        }
        let cavs = self.cav_store()?;
        let net = self.network()?;
        let layers = self.tcav_layers()?;
        if layers.is_empty() {
            return Err(Error::Config(
                "no captured layer is eligible for TCAV".into(),
            ));
        }
        let classes = self.class_selection(|t| t.names())?;
        let specs = self.probe_specs()?;
        let mut families: Vec<(LayerId, CavFamily, Vec<CavFamily>)> = Vec::new();
        for &layer in &layers {
            let random = self.random_family(&cavs, layer)?;
            let fams = specs
                .iter()
                .map(|s| self.family(&cavs, &s.label, layer))
                .collect::<Result<Vec<_>>>()?;
            families.push((layer, random, fams));
        }
        let p = self.config.tcav.p_threshold;
        let mut reports = Vec::new();
        let mut scores = Vec::new();
        for (k, name) in &classes {
            self.note(format!("  tcav {name}"));
            let grads = self.class_gradients(&net, *k, &layers)?;
            let mut per_concept: Vec<Vec<TcavReport>> = vec![Vec::new(); specs.len()];
            for (_, random, fams) in &families {
                for (c, fam) in fams.iter().enumerate() {
                    let rep = tcav_report(name, &grads, fam, random, p)?;
                    per_concept[c].push(rep.clone());
                    reports.push(rep);
                }
            }
            for reps in &per_concept {
                scores.push(layer_consistency_score(reps)?);
            }
        }
        let dir = self.store.dir("reports", &format!("tcav-{digest}"))?;
        let mref = self
            .store
            .relative(&self.store.manifest_path("tcav", &digest));
        let csv = dir.join("tcav.csv");
        report::write_tcav_csv(&csv, &mref, &reports)?;
        let score_csv = dir.join("consistency_scores.csv");
        report::write_consistency_score_csv(&score_csv, &mref, &scores)?;
        let body = TcavBody {
            layers: layers.clone(),
            concepts: specs.iter().map(|s| s.label.clone()).collect(),
            classes: classes.iter().map(|(_, n)| n.clone()).collect(),
            reports,
            consistency_scores: scores,
        };
        let json_path = dir.join("tcav.json");
        report::write_envelope(&json_path, "tcav", &mref, &body)?;
        let s: Vec<f64> = body.consistency_scores.iter().map(|c| c.score).collect();
        let summary = json!({
            "rows": body.reports.len(),
            "layers": layers.len(),
            "concepts": body.concepts.len(),
            "classes": body.classes.len(),
            "significant": body.reports.iter().filter(|r| r.significant).count(),
            "mean_consistency_score": crate::stats::mean(&s),
            "fraction_scores_at_most_half": s.iter().filter(|&&x| x <= 0.5).count() as f64 / s.len().max(1) as f64,
        });
        let inputs = self.tcav_inputs()?;
        self.finish(
            "tcav",
            &digest,
            &["cav", "train"],
            inputs,
            &[csv, score_csv, json_path],
            summary,
        )
    }

    pub fn tcav_body(&self) -> Result<TcavBody> {
        let d = self.tcav_digest()?;
        self.store.read_manifest("tcav", &d)?;
        let path = self
            .store
            .dir_path("reports", &format!("tcav-{d}"))
            .join("tcav.json");
        Ok(report::read_envelope::<TcavBody>(&path, "tcav")?.body)
    }

    pub fn consistency(&self) -> Result<StageOutcome> {
        let digest = self.consistency_digest()?;
        if let Some(c) = self.cached("consistency", &digest)? {
            return Ok(c);
        }
        let cfg = &self.config.consistency;
        let cavs = self.cav_store()?;
        let net = self.network()?;
        let captured = self.capture_layers()?;
        for l in [cfg.l1, cfg.l2] {
            if !captured.contains(&l) {
                return Err(Error::Config(format!(
                    "consistency layer {l} was not captured"
                )));
            }
        }
        let label = ProbeSpec::parse(&cfg.concept)?.label;
        let validation = self.dataset(Split::Validation)?;
        let n = cfg.inputs;
        if n > validation.len() {
            return Err(Error::Config(format!(
                "consistency.inputs = {n} exceeds the {} validation images",
                validation.len()
            )));
        }
        let x = flatten(&validation.images(&(0..n).collect::<Vec<_>>()));
        let ctx = ConsistencyContext::new(&net, &x, n, cfg.l1, cfg.l2)?;
        let f1 = self.family(&cavs, &label, cfg.l1)?;
        let f2 = self.family(&cavs, &label, cfg.l2)?;
        let random2 = self.random_family(&cavs, cfg.l2)?;
        let exp = ExperimentConfig {
            gamma: cfg.gamma,
            recentre: cfg.recentre,
            seed: cfg.seed,
            optimise: self.config.optimise_config(),
        };
        self.note(format!("  consistency {label} {} -> {}", cfg.l1, cfg.l2));
        let rep = consistency_experiment(&ctx, &f1, &f2, &random2, &exp)?;
        let sweep = gamma_sweep(&ctx, &f1.cavs[0], &f2.cavs[1 % f2.cavs.len()], &GAMMA_SWEEP)?;
        let (slope, intercept, r2) = linear_fit(&sweep);
        let dir = self
            .store
            .dir("reports", &format!("consistency-{digest}"))?;
        let mref = self
            .store
            .relative(&self.store.manifest_path("consistency", &digest));
        let csv = dir.join("consistency.csv");
        report::write_consistency_csv(&csv, &mref, &rep)?;
        let means: BTreeMap<String, f64> = Variant::ALL
            .iter()
            .map(|&v| (v.name().to_string(), rep.variant(v).mean()))
            .collect();
        let body = ConsistencyBody {
            report: rep,
            variant_means: means.clone(),
            gamma_sweep: sweep,
            sweep_fit: [slope, intercept, r2],
        };
        let json_path = dir.join("consistency.json");
        report::write_envelope(&json_path, "consistency", &mref, &body)?;
        let summary = json!({
            "concept": label,
            "sources": body.report.variant(Variant::Optimised).cav_means.len(),
            "means": means,
            "aborted": body.report.aborted,
            "gamma_r2": r2,
        });
        let inputs = self.consistency_inputs()?;
        self.finish(
            "consistency",
            &digest,
            &["cav", "train", "gen"],
            inputs,
            &[csv, json_path],
            summary,
        )
    }

    pub fn consistency_body(&self) -> Result<ConsistencyBody> {
        let d = self.consistency_digest()?;
        self.store.read_manifest("consistency", &d)?;
        let path = self
            .store
            .dir_path("reports", &format!("consistency-{d}"))
            .join("consistency.json");
        Ok(report::read_envelope::<ConsistencyBody>(&path, "consistency")?.body)
    }

    pub fn entangle(&self) -> Result<StageOutcome> {
        let digest = self.entangle_digest()?;
        if let Some(c) = self.cached("entangle", &digest)? {
            return Ok(c);
        }
        let cavs = self.cav_store()?;
        let specs = self.probe_specs()?;
        let threshold = self.config.entanglement.pair_threshold;
        let dir = self.store.dir("reports", &format!("entangle-{digest}"))?;
        let mref = self
            .store
            .relative(&self.store.manifest_path("entangle", &digest));
        let mut matrices = Vec::new();
        let mut rows = Vec::new();
        let mut dot_rows = Vec::new();
        let mut artifacts = Vec::new();
        for layer in self.capture_layers()? {
            self.note(format!("  entangle {layer}"));
            let fams = specs
                .iter()
                .map(|s| self.family(&cavs, &s.label, layer))
                .collect::<Result<Vec<_>>>()?;
            let m = cosine_matrix(&fams.iter().collect::<Vec<_>>())?;
            let path = dir.join(format!("similarity__{layer}.csv"));
            report::write_similarity_csv(&path, &m)?;
            artifacts.push(path);
            matrices.push(m);

            let negative = ProbeActivations {
                label: random_label(0),
                layer,
                acts: self.test_activations(&random_label(0), layer)?,
            };
            let probes = specs
                .iter()
                .map(|s| {
                    Ok(ProbeActivations {
                        label: s.label.clone(),
                        layer,
                        acts: self.test_activations(&s.label, layer)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let per_family = fams
                .par_iter()
                .map(|fam| {
                    probes
                        .iter()
                        .map(|probe| {
                            let flags = family_entanglement(fam, probe, &negative, threshold)?;
                            report::entanglement_row(&mref, &flags, threshold)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            rows.extend(per_family.into_iter().flatten());
            for fam in &fams {
                let first = CavFamily {
                    cavs: fam.cavs[..1].to_vec(),
                    ..fam.clone()
                };
                for probe in probes.iter().chain(std::iter::once(&negative)) {
                    let d = family_dots(&first, probe)?;
                    dot_rows.extend(d[0].iter().enumerate().map(|(i, &dot)| report::DotRow {
                        concept: fam.concept.clone(),
                        r: first.cavs[0].r,
                        layer: layer.to_string(),
                        probe: probe.label.clone(),
                        index: i,
                        dot,
                    }));
                }
            }
        }
        let flags = dir.join("entanglement.csv");
        report::write_entanglement_csv(&flags, &rows)?;
        let dots = dir.join("dots.csv");
        report::write_dots_csv(&dots, &dot_rows)?;
        let json_path = dir.join("similarity.json");
        report::write_envelope(&json_path, "similarity", &mref, &matrices)?;
        artifacts.extend([flags, dots, json_path]);
        let summary = json!({
            "layers": matrices.len(),
            "concepts": specs.len(),
            "flagged_pairs": rows.iter().filter(|r| r.flagged && r.concept != r.probe).count(),
        });
        let inputs = self.entangle_inputs()?;
        self.finish(
            "entangle",
            &digest,
            &["cav", "capture"],
            inputs,
            &artifacts,
            summary,
        )
    }

    pub fn similarity_matrices(&self) -> Result<Vec<SimilarityMatrix>> {
        let d = self.entangle_digest()?;
        self.store.read_manifest("entangle", &d)?;
        let path = self
            .store
            .dir_path("reports", &format!("entangle-{d}"))
            .join("similarity.json");
        Ok(report::read_envelope::<Vec<SimilarityMatrix>>(&path, "similarity")?.body)
    }

    pub fn entanglement_rows(&self) -> Result<Vec<report::EntanglementRow>> {
        let d = self.entangle_digest()?;
        self.store.read_manifest("entangle", &d)?;
        report::read_rows(
            &self
                .store
                .dir_path("reports", &format!("entangle-{d}"))
                .join("entanglement.csv"),
        )
    }

    pub fn spatial(&self) -> Result<StageOutcome> {
        let digest = self.spatial_digest()?;
        if let Some(c) = self.cached("spatial", &digest)? {
            return Ok(c);
        }
        let cavs = self.cav_store()?;
        let net = self.network()?;
        let specs = self.probe_specs()?;
        let mc = self.model_config();
        let dir = self.store.dir("reports", &format!("spatial-{digest}"))?;
        let heat_dir = dir.join("heatmaps");
        std::fs::create_dir_all(&heat_dir)?;
        let mref = self
            .store
            .relative(&self.store.manifest_path("spatial", &digest));
        let threshold = self.config.spatial.dependence_threshold;
        let mut artifacts = Vec::new();
        let mut grids = Vec::new();
        let mut dependence = Vec::new();
        let layers = self.capture_layers()?;
        for &layer in &layers {
            let shape = mc.layer_shape(layer);
            for spec in &specs {
                let fam = self.family(&cavs, &spec.label, layer)?;
                for reduction in [Reduction::Norm, Reduction::Mean] {
                    let g = family_mean_grid(&fam, shape, reduction)?;
                    let name = match reduction {
                        Reduction::Norm => "norm",
                        Reduction::Mean => "mean",
                    };
                    let path =
                        heat_dir.join(format!("{}__{layer}__{name}.json", file_label(&spec.label)));
                    write_json(&path, &Heatmap::from_grid(&mref, &g))?;
                    artifacts.push(path);
                    grids.push(g);
                }
            }
            // Dependence tests for every concept probed at two opposite regions.
            for spec in specs.iter().filter(|s| s.region.is_some()) {
                let region = spec.region.expect("filtered");
                let Some(other) = specs
                    .iter()
                    .find(|s| s.concept == spec.concept && s.region == Some(region.opposite()))
                else {
                    continue;
                };
                if region.name() > other.region.expect("located").name() {
                    continue;
                }
                let first = ProbeActivations {
                    label: spec.label.clone(),
                    layer,
                    acts: self.test_activations(&spec.label, layer)?,
                };
                let second = ProbeActivations {
                    label: other.label.clone(),
                    layer,
                    acts: self.test_activations(&other.label, layer)?,
                };
                let plain = specs
                    .iter()
                    .find(|s| s.concept == spec.concept && s.region.is_none());
                for fam_spec in [Some(spec), Some(other), plain].into_iter().flatten() {
                    let fam = self.family(&cavs, &fam_spec.label, layer)?;
                    let tests = fam
                        .cavs
                        .iter()
                        .map(|c| spatial_dependence_test(c, &first, &second, threshold))
                        .collect::<Result<Vec<_>>>()?;
                    dependence.push(report::dependence_row(&mref, &tests)?);
                }
            }
        }
        let schema = dir.join(HEATMAP_SCHEMA_FILE);
        store::write_atomic(&schema, HEATMAP_SCHEMA.as_bytes())?;
        let grid_csv = dir.join("grids.csv");
        report::write_grids_csv(&grid_csv, &mref, &grids)?;
        let dep_csv = dir.join("dependence.csv");
        report::write_dependence_csv(&dep_csv, &dependence)?;

        // TCAV suite by region variant.
        let tcav_layers = self.tcav_layers()?;
        let classes = self.class_selection(|t| {
            t.classes
                .iter()
                .filter(|c| c.region.is_some())
                .map(|c| c.name())
                .collect()
        })?;
        let mut variants: BTreeMap<String, Vec<CavFamily>> = BTreeMap::new();
        for &layer in &tcav_layers {
            for spec in &specs {
                let key = spec
                    .region
                    .map_or("plain".to_string(), |r| r.name().to_string());
                variants
                    .entry(key)
                    .or_default()
                    .push(self.family(&cavs, &spec.label, layer)?);
            }
        }
        let variants: Vec<(String, Vec<CavFamily>)> = variants.into_iter().collect();
        let random = tcav_layers
            .iter()
            .map(|&l| self.random_family(&cavs, l))
            .collect::<Result<Vec<_>>>()?;
        let mut suite = Vec::new();
        for (k, name) in &classes {
            self.note(format!("  spatial tcav {name}"));
            let grads = self.class_gradients(&net, *k, &tcav_layers)?;
            suite.extend(spatial_tcav_suite(
                name,
                &grads,
                &variants,
                &random,
                self.config.tcav.p_threshold,
            )?);
        }
        let suite_csv = dir.join("spatial_tcav.csv");
        report::write_suite_csv(&suite_csv, &mref, &suite)?;
        let body = SpatialBody {
            grids,
            dependence,
            suite,
        };
        let json_path = dir.join("spatial.json");
        report::write_envelope(&json_path, "spatial", &mref, &body)?;
        artifacts.extend([schema, grid_csv, dep_csv, suite_csv, json_path]);
        let summary = json!({
            "grids": body.grids.len(),
            "dependence_rows": body.dependence.len(),
            "suite_rows": body.suite.len(),
            "classes": classes.len(),
        });
        let inputs = self.spatial_inputs()?;
        self.finish(
            "spatial",
            &digest,
            &["cav", "capture", "train"],
            inputs,
            &artifacts,
            summary,
        )
    }

    pub fn spatial_body(&self) -> Result<SpatialBody> {
        let d = self.spatial_digest()?;
        self.store.read_manifest("spatial", &d)?;
        let path = self
            .store
            .dir_path("reports", &format!("spatial-{d}"))
            .join("spatial.json");
        Ok(report::read_envelope::<SpatialBody>(&path, "spatial")?.body)
    }

    pub fn spatial_report_dir(&self) -> Result<PathBuf> {
        Ok(self
            .store
            .dir_path("reports", &format!("spatial-{}", self.spatial_digest()?)))
    }

    /// Collects every analysis that exists for this configuration and checks
    /// the emitted files: row counts, matrix round trips, heatmap shapes.
    pub fn report(&self) -> Result<StageOutcome> {
        let digest = self.report_digest()?;
        if let Some(c) = self.cached("report", &digest)? {
            return Ok(c);
        }
        let mut present = Vec::new();
        let mut manifests = BTreeMap::new();
        for stage in [
            "gen",
            "train",
            "capture",
            "cav",
            "tcav",
            "consistency",
            "entangle",
            "spatial",
        ] {
            let d = self.stage_digest(stage)?;
            if self.store.has(stage, &d) {
                present.push(stage);
                manifests.insert(
                    stage.to_string(),
                    self.store.relative(&self.store.manifest_path(stage, &d)),
                );
            }
        }
        let analyses: Vec<&str> = present
            .iter()
            .copied()
            .filter(|s| ["tcav", "consistency", "entangle", "spatial"].contains(s))
            .collect();
        if analyses.is_empty() {
            return Err(Error::MissingArtifact(format!(
                "no analysis artifacts for this configuration in store {} (run tcav, consistency, entangle or spatial first)",
                self.store.root().display()
            )));
        }
        let mut checks = BTreeMap::new();
        if present.contains(&"tcav") {
            let d = self.tcav_digest()?;
            let body = self.tcav_body()?;
            let rows: Vec<report::TcavRow> = report::read_rows(
                &self
                    .store
                    .dir_path("reports", &format!("tcav-{d}"))
                    .join("tcav.csv"),
            )?;
            let expected = body.layers.len() * body.concepts.len() * body.classes.len();
            checks.insert(
                "tcav_rows".to_string(),
                json!({"rows": rows.len(), "expected": expected, "ok": rows.len() == expected}),
            );
        }
        if present.contains(&"entangle") {
            let d = self.entangle_digest()?;
            let dir = self.store.dir_path("reports", &format!("entangle-{d}"));
            let mut ok = true;
            for m in self.similarity_matrices()? {
                let parsed = report::read_similarity_csv(
                    &dir.join(format!("similarity__{}.csv", m.layer)),
                    m.layer,
                )?;
                ok &= parsed == m;
            }
            checks.insert("similarity_round_trip".to_string(), json!({"ok": ok}));
        }
        if present.contains(&"spatial") {
            let dir = self.spatial_report_dir()?.join("heatmaps");
            let mut count = 0;
            let mut ok = true;
            for entry in std::fs::read_dir(&dir)? {
                let h: Heatmap = store::read_json(&entry?.path())?;
                ok &= h.values.len() == h.height && h.values.iter().all(|r| r.len() == h.width);
                count += 1;
            }
            checks.insert(
                "heatmap_shapes".to_string(),
                json!({"files": count, "ok": ok}),
            );
        }
        let all_ok = checks.values().all(|c| c["ok"] == json!(true));
        let dir = self.store.dir("reports", &format!("report-{digest}"))?;
        let index = dir.join("index.json");
        let body = json!({"manifests": manifests, "checks": checks});
        write_json(
            &index,
            &Envelope {
                schema_version: report::REPORT_SCHEMA_VERSION,
                kind: "index".to_string(),
                manifest: self
                    .store
                    .relative(&self.store.manifest_path("report", &digest)),
                body: &body,
            },
        )?;
        if !all_ok {
            return Err(Error::Numeric(format!(
                "report checks failed: {}",
                serde_json::to_string(&checks)?
            )));
        }
        let summary = json!({"analyses": analyses, "checks": checks.len(), "ok": all_ok});
        let inputs = json!({"stages": manifests});
        let upstream: Vec<&str> = present.clone();
        self.finish("report", &digest, &upstream, inputs, &[index], summary)
    }

    /// Runs the theory cases; needs no trained model.
    pub fn verify_theory(&self, dim: usize, trials: usize) -> Result<StageOutcome> {
        let seed = self.config.consistency.seed;
        let inputs = json!({"dim": dim, "trials": trials, "seed": seed});
        let digest = store::digest_of(&("verify-theory", &inputs))?;
        if let Some(c) = self.cached("verify-theory", &digest)? {
            return Ok(c);
        }
        let verdicts = [TheoryCase::Linear, TheoryCase::Relu, TheoryCase::Sigmoid]
            .iter()
            .map(|&c| verify_theory_cases(c, dim, trials, seed))
            .collect::<Result<Vec<TheoryVerdict>>>()?;
        let dir = self.store.dir("reports", &format!("theory-{digest}"))?;
        let path = dir.join("theory.json");
        let mref = self
            .store
            .relative(&self.store.manifest_path("verify-theory", &digest));
        report::write_envelope(&path, "theory", &mref, &verdicts)?;
        let summary = json!({
            "linear_consistent": verdicts[0].consistent,
            "relu_consistent": verdicts[1].consistent,
            "sigmoid_consistent": verdicts[2].consistent,
            "linear_max_error": verdicts[0].max_error,
        });
        self.finish("verify-theory", &digest, &[], inputs, &[path], summary)
    }
}

fn summary_line(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Object(map) => map
            .iter()
            .filter(|(_, v)| !v.is_object() && !v.is_array() && !v.is_null())
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" "),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub concept: String,
    pub layer: LayerId,
    pub members: usize,
    pub mean_test_accuracy: f64,
    pub min_test_accuracy: f64,
    pub max_test_accuracy: f64,
}

impl FamilySummary {
    fn of(f: &CavFamily) -> Self {
        let acc = f.cavs.iter().map(|c| c.test_accuracy);
        FamilySummary {
            concept: f.concept.clone(),
            layer: f.layer,
            members: f.cavs.len(),
            mean_test_accuracy: f.mean_test_accuracy(),
            min_test_accuracy: acc.clone().fold(f64::INFINITY, f64::min),
            max_test_accuracy: acc.fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcavBody {
    pub layers: Vec<LayerId>,
    pub concepts: Vec<String>,
    pub classes: Vec<String>,
    pub reports: Vec<TcavReport>,
    pub consistency_scores: Vec<ConsistencyScoreReport>,
}

impl TcavBody {
    pub fn report(&self, class: &str, concept: &str, layer: LayerId) -> Option<&TcavReport> {
        self.reports
            .iter()
            .find(|r| r.class == class && r.concept == concept && r.layer == layer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyBody {
    pub report: ConsistencyReport,
    pub variant_means: BTreeMap<String, f64>,
    pub gamma_sweep: Vec<(f64, f64)>,
    /// Slope, intercept and R² of the sweep.
    pub sweep_fit: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialBody {
    pub grids: Vec<SpatialGrid>,
    pub dependence: Vec<report::DependenceRow>,
    pub suite: Vec<SuiteEntry>,
}
