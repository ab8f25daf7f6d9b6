//! CSV and JSON emitters for analysis reports. Every file carries the
//! report schema version and the manifest that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyReport;
use crate::entanglement::{EntanglementFlag, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::nn::LayerId;
use crate::spatial::{DependenceTest, SpatialGrid, SuiteEntry};
use crate::tcav::{ConsistencyScoreReport, TcavReport};

use super::store::{write_atomic, write_json};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// JSON Schema for spatial heatmap files.
pub const HEATMAP_SCHEMA: &str = include_str!("heatmap.schema.json");
pub const HEATMAP_SCHEMA_FILE: &str = "heatmap.schema.json";

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path, e.to_string())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(csv_err(path)))
        .collect()
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

/// Wrapper placed around every JSON report body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub kind: String,
    pub manifest: String,
    pub body: T,
}

pub fn write_envelope<T: Serialize>(
    path: &Path,
    kind: &str,
    manifest: &str,
    body: &T,
) -> Result<()> {
    write_json(
        path,
        &Envelope {
            schema_version: REPORT_SCHEMA_VERSION,
            kind: kind.to_string(),
            manifest: manifest.to_string(),
            body,
        },
    )
}

pub fn read_envelope<T: for<'de> Deserialize<'de>>(path: &Path, kind: &str) -> Result<Envelope<T>> {
    let env: Envelope<T> = super::store::read_json(path)?;
    if env.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::SchemaMismatch {
            expected: REPORT_SCHEMA_VERSION,
            found: env.schema_version,
        });
    }
    if env.kind != kind {
        return Err(Error::format(
            path,
            format!("expected a `{kind}` report, found `{}`", env.kind),
        ));
    }
    Ok(env)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcavRow {
    pub schema_version: u32,
    pub manifest: String,
    pub class: String,
    pub concept: String,
    pub layer: String,
    pub mean: f64,
    pub std: f64,
    pub null_mean: f64,
    pub p_value: f64,
    pub significant: bool,
    pub above_null: bool,
    pub flag: String,
    pub mean_cav_accuracy: f64,
    pub scores: String,
}

pub fn write_tcav_csv(path: &Path, manifest: &str, reports: &[TcavReport]) -> Result<()> {
    let rows: Vec<TcavRow> = reports
        .iter()
        .map(|r| TcavRow {
            schema_version: REPORT_SCHEMA_VERSION,
            manifest: manifest.to_string(),
            class: r.class.clone(),
            concept: r.concept.clone(),
            layer: r.layer.to_string(),
            mean: r.mean,
            std: r.std,
            null_mean: r.null_mean,
            p_value: r.p_value,
            significant: r.significant,
            above_null: r.above_null(),
            flag: r.flag().to_string(),
            mean_cav_accuracy: r.mean_cav_accuracy,
            scores: join(&r.scores),
        })
        .collect();
    write_rows(path, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScoreRow {
    pub schema_version: u32,
    pub manifest: String,
    pub class: String,
    pub concept: String,
    pub layers: String,
    pub fraction_above_null: f64,
    pub score: f64,
}

pub fn write_consistency_score_csv(
    path: &Path,
    manifest: &str,
    reports: &[ConsistencyScoreReport],
) -> Result<()> {
    let rows: Vec<ConsistencyScoreRow> = reports
        .iter()
        .map(|r| ConsistencyScoreRow {
            schema_version: REPORT_SCHEMA_VERSION,
            manifest: manifest.to_string(),
            class: r.class.clone(),
            concept: r.concept.clone(),
            layers: r
                .layers
                .iter()
                .map(LayerId::to_string)
                .collect::<Vec<_>>()
                .join(";"),
            fraction_above_null: r.fraction_above_null,
            score: r.score,
        })
        .collect();
    write_rows(path, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConsistencyErrorRow<'a> {
    schema_version: u32,
    manifest: &'a str,
    concept: &'a str,
    variant: &'a str,
    l1: String,
    l2: String,
    gamma: f64,
    source: usize,
    error: f64,
}

/// One row per (variant, source CAV, input) error sample.
pub fn write_consistency_csv(
    path: &Path,
    manifest: &str,
    report: &ConsistencyReport,
) -> Result<()> {
    let mut rows = Vec::new();
    for v in &report.variants {
        let per_source = v.samples.len() / v.cav_means.len().max(1);
        for (i, &error) in v.samples.iter().enumerate() {
            rows.push(ConsistencyErrorRow {
                schema_version: REPORT_SCHEMA_VERSION,
                manifest,
                concept: &report.concept,
                variant: v.variant.name(),
                l1: report.l1.to_string(),
                l2: report.l2.to_string(),
                gamma: report.gamma,
                source: i / per_source.max(1),
                error,
            });
        }
    }
    write_rows(path, &rows)
}

/// Square CSV grid: a `concept` header column then one column per concept.
/// Values use the shortest round-trip decimal form, so parsing is exact.
pub fn write_similarity_csv(path: &Path, m: &SimilarityMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["concept".to_string()];
    header.extend(m.concepts.iter().cloned());
    w.write_record(&header).map_err(csv_err(path))?;
    for (i, c) in m.concepts.iter().enumerate() {
        let mut row = vec![c.clone()];
        row.extend((0..m.concepts.len()).map(|j| m.get(i, j).to_string()));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_similarity_csv(path: &Path, layer: LayerId) -> Result<SimilarityMatrix> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    let concepts: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = concepts.len();
    let mut values = Vec::with_capacity(n * n);
    for (i, record) in r.records().enumerate() {
        let record = record.map_err(csv_err(path))?;
        if record.len() != n + 1 || record.get(0) != concepts.get(i).map(String::as_str) {
            return Err(Error::format(
                path,
                format!("row {i} does not match the header"),
            ));
        }
        for cell in record.iter().skip(1) {
            values.push(
                cell.parse::<f64>()
                    .map_err(|e| Error::format(path, e.to_string()))?,
            );
        }
    }
    if values.len() != n * n {
        return Err(Error::format(path, "matrix is not square"));
    }
    Ok(SimilarityMatrix {
        layer,
        concepts,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntanglementRow {
    pub schema_version: u32,
    pub manifest: String,
    pub concept: String,
    pub probe: String,
    pub layer: String,
    /// Mean pair fraction over the family's members.
    pub fraction: f64,
    pub members_flagged: usize,
    pub members: usize,
    pub threshold: f64,
    pub flagged: bool,
    pub mean_positive: f64,
    pub mean_negative: f64,
    pub median_p_value: f64,
}

/// Aggregates member flags of one family against one probe.
pub fn entanglement_row(
    manifest: &str,
    flags: &[EntanglementFlag],
    threshold: f64,
) -> Result<EntanglementRow> {
    let first = flags.first().ok_or(Error::Empty("entanglement flags"))?;
    let n = flags.len() as f64;
    let fraction = flags.iter().map(|f| f.fraction).sum::<f64>() / n;
    let mut ps: Vec<f64> = flags.iter().map(|f| f.p_value).collect();
    ps.sort_by(f64::total_cmp);
    Ok(EntanglementRow {
        schema_version: REPORT_SCHEMA_VERSION,
        manifest: manifest.to_string(),
        concept: first.concept.clone(),
        probe: first.probe.clone(),
        layer: first.layer.to_string(),
        fraction,
        members_flagged: flags.iter().filter(|f| f.flagged).count(),
        members: flags.len(),
        threshold,
        flagged: fraction > threshold,
        mean_positive: flags.iter().map(|f| f.mean_positive).sum::<f64>() / n,
        mean_negative: flags.iter().map(|f| f.mean_negative).sum::<f64>() / n,
        median_p_value: ps[ps.len() / 2],
    })
}

pub fn write_entanglement_csv(path: &Path, rows: &[EntanglementRow]) -> Result<()> {
    write_rows(path, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DotRow {
    pub concept: String,
    pub r: usize,
    pub layer: String,
    pub probe: String,
    pub index: usize,
    pub dot: f64,
}

pub fn write_dots_csv(path: &Path, rows: &[DotRow]) -> Result<()> {
    write_rows(path, rows)
}

/// Heatmap file for one spatial grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub schema_version: u32,
    pub manifest: String,
    pub concept: String,
    pub layer: String,
    pub reduction: String,
    pub aggregated_over: usize,
    pub height: usize,
    pub width: usize,
    /// `height` rows of `width` values.
    pub values: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn from_grid(manifest: &str, g: &SpatialGrid) -> Self {
        Heatmap {
            schema_version: REPORT_SCHEMA_VERSION,
            manifest: manifest.to_string(),
            concept: g.concept.clone(),
            layer: g.layer.to_string(),
            reduction: match g.reduction {
                crate::spatial::Reduction::Norm => "norm".into(),
                crate::spatial::Reduction::Mean => "mean".into(),
            },
            aggregated_over: g.aggregated_over,
            height: g.height,
            width: g.width,
            values: g.values.chunks(g.width).map(<[f64]>::to_vec).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GridRow<'a> {
    schema_version: u32,
    manifest: &'a str,
    concept: &'a str,
    layer: String,
    reduction: &'a str,
    row: usize,
    values: String,
}

/// Row-major grid CSV: one line per grid row.
pub fn write_grids_csv(path: &Path, manifest: &str, grids: &[SpatialGrid]) -> Result<()> {
    let mut rows = Vec::new();
    for g in grids {
        let reduction = match g.reduction {
            crate::spatial::Reduction::Norm => "norm",
            crate::spatial::Reduction::Mean => "mean",
        };
        for (h, line) in g.values.chunks(g.width).enumerate() {
            rows.push(GridRow {
                schema_version: REPORT_SCHEMA_VERSION,
                manifest,
                concept: &g.concept,
                layer: g.layer.to_string(),
                reduction,
                row: h,
                values: join(line),
            });
        }
    }
    write_rows(path, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceRow {
    pub schema_version: u32,
    pub manifest: String,
    pub concept: String,
    pub layer: String,
    pub first: String,
    pub second: String,
    /// Mean pair fraction over the family.
    pub fraction: f64,
    pub members_dependent: usize,
    pub members: usize,
    pub threshold: f64,
}

pub fn dependence_row(manifest: &str, tests: &[DependenceTest]) -> Result<DependenceRow> {
    let first = tests.first().ok_or(Error::Empty("dependence tests"))?;
    Ok(DependenceRow {
        schema_version: REPORT_SCHEMA_VERSION,
        manifest: manifest.to_string(),
        concept: first.concept.clone(),
        layer: first.layer.to_string(),
        first: first.first.clone(),
        second: first.second.clone(),
        fraction: tests.iter().map(|t| t.fraction).sum::<f64>() / tests.len() as f64,
        members_dependent: tests.iter().filter(|t| t.dependent).count(),
        members: tests.len(),
        threshold: first.threshold,
    })
}

pub fn write_dependence_csv(path: &Path, rows: &[DependenceRow]) -> Result<()> {
    write_rows(path, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SuiteRow<'a> {
    schema_version: u32,
    manifest: &'a str,
    variant: &'a str,
    class: &'a str,
    concept: &'a str,
    layer: String,
    mean: f64,
    null_mean: f64,
    p_value: f64,
    significant: bool,
    above_null: bool,
    flag: &'a str,
}

pub fn write_suite_csv(path: &Path, manifest: &str, entries: &[SuiteEntry]) -> Result<()> {
    let rows: Vec<SuiteRow> = entries
        .iter()
        .map(|e| SuiteRow {
            schema_version: REPORT_SCHEMA_VERSION,
            manifest,
            variant: &e.variant,
            class: &e.report.class,
            concept: &e.report.concept,
            layer: e.report.layer.to_string(),
            mean: e.report.mean,
            null_mean: e.report.null_mean,
            p_value: e.report.p_value,
            significant: e.report.significant,
            above_null: e.report.above_null(),
            flag: e.report.flag(),
        })
        .collect();
    write_rows(path, &rows)
}
