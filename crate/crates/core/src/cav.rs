//! Concept activation vectors: logistic-regression probes on captured
//! activations, families over random negative sets, and random CAVs.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::scalar::gemm;
use crate::nn::LayerId;

pub const CAV_MAGIC: [u8; 4] = *b"CAVV";
pub const CAV_VERSION: u32 = 1;

/// Row-major activation matrix, one flattened `g_l(x)` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Activations {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: data.len(),
            });
        }
        Ok(Activations { dim, data })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `range` as a new matrix.
    pub fn slice(&self, from: usize, to: usize) -> Activations {
        Activations {
            dim: self.dim,
            data: self.data[from * self.dim..to * self.dim].to_vec(),
        }
    }

    /// Mean Euclidean row norm.
    pub fn mean_norm(&self) -> f64 {
        let n = self.rows().max(1) as f64;
        (0..self.rows())
            .map(|i| crate::stats::norm(self.row(i)))
            .sum::<f64>()
            / n
    }
}

/// Probe training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavHyper {
    pub l2: f64,
    pub iterations: usize,
    /// Leading fraction of each set used for training; the rest is held out.
    pub train_fraction: f64,
}

impl Default for CavHyper {
    fn default() -> Self {
        CavHyper {
            l2: 1e-4,
            iterations: 500,
            train_fraction: 2.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    /// Probe label such as `red`, `striped@left` or `random/3`.
    pub concept: String,
    pub layer: LayerId,
    /// Index of the negative random set.
    pub r: usize,
    /// Unit-norm direction.
    pub direction: Vec<f32>,
    /// Intercept for the unit direction: the decision rule is `a.v + b > 0`.
    pub intercept: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

impl Cav {
    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    pub fn decision(&self, a: &[f32]) -> f64 {
        crate::stats::dot(a, &self.direction) + self.intercept
    }

    pub fn is_random(&self) -> bool {
        self.concept.starts_with("random/")
    }
}

/// `R` CAVs sharing a positive set and differing in negative set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavFamily {
    pub concept: String,
    pub layer: LayerId,
    pub cavs: Vec<Cav>,
}

impl CavFamily {
    pub fn mean_test_accuracy(&self) -> f64 {
        self.cavs.iter().map(|c| c.test_accuracy).sum::<f64>() / self.cavs.len().max(1) as f64
    }

    /// Mean of the member directions (not renormalized).
    pub fn mean_direction(&self) -> Vec<f64> {
        let m = self.cavs.first().map_or(0, Cav::dim);
        let mut out = vec![0.0; m];
        for c in &self.cavs {
            for (o, &v) in out.iter_mut().zip(&c.direction) {
                *o += v as f64;
            }
        }
        let n = self.cavs.len().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

fn split_point(rows: usize, fraction: f64) -> usize {
    let k = (rows as f64 * fraction).round() as usize;
    if rows >= 2 {
        k.clamp(1, rows - 1)
    } else {
        rows
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
fn max_eigenvalue(k: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut w = vec![0.0; n];
        gemm(n, n, 1, k, false, &v, false, &mut w, false);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        w.iter_mut().for_each(|x| *x /= norm);
        v = w;
        if (next - lambda).abs() <= 1e-9 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda
}

fn accuracy(cav_dir: &[f32], intercept: f64, pos: &Activations, neg: &Activations) -> f64 {
    let total = pos.rows() + neg.rows();
    if total == 0 {
        return f64::NAN;
    }
    let correct = (0..pos.rows())
        .filter(|&i| crate::stats::dot(pos.row(i), cav_dir) + intercept > 0.0)
        .count()
        + (0..neg.rows())
            .filter(|&i| crate::stats::dot(neg.row(i), cav_dir) + intercept <= 0.0)
            .count();
    correct as f64 / total as f64
}

/// Trains one CAV separating `positive` from `negative` activations.
///
/// L2-regularized logistic regression by full-batch gradient descent. With
/// zero initialization the weight stays in the span of the training rows,
/// so descent runs exactly in the dual (`w = A^T alpha`) on the Gram
/// matrix, with step `1/L` from the loss smoothness constant.
pub fn train_cav(
    positive: &Activations,
    negative: &Activations,
    hyper: &CavHyper,
    concept: &str,
    layer: LayerId,
    r: usize,
) -> Result<Cav> {
    if positive.rows() == 0 {
        return Err(Error::Empty("positive activation set"));
    }
    if negative.rows() == 0 {
        return Err(Error::Empty("negative activation set"));
    }
    if positive.dim != negative.dim {
        return Err(Error::DimensionMismatch {
            expected: positive.dim,
            found: negative.dim,
        });
    }
    let m = positive.dim;
    let (sp, sn) = (
        split_point(positive.rows(), hyper.train_fraction),
        split_point(negative.rows(), hyper.train_fraction),
    );
    let (pos_train, neg_train) = (positive.slice(0, sp), negative.slice(0, sn));
    let (pos_test, neg_test) = if sp < positive.rows() || sn < negative.rows() {
        (
            positive.slice(sp, positive.rows()),
            negative.slice(sn, negative.rows()),
        )
    } else {
        (pos_train.clone(), neg_train.clone())
    };

    let n = sp + sn;
    let a: Vec<f64> = pos_train
        .data
        .iter()
        .chain(&neg_train.data)
        .map(|&v| v as f64)
        .collect();
    let y: Vec<f64> = (0..n).map(|i| if i < sp { 1.0 } else { -1.0 }).collect();
    let mut gram = vec![0.0; n * n];
    gemm(n, m, n, &a, false, &a, true, &mut gram, false);

    let lambda = hyper.l2;
    let smooth = max_eigenvalue(&gram, n) / (4.0 * n as f64) + lambda;
    let step = 1.0 / smooth;
    let mut alpha = vec![0.0; n];
    let mut bias = 0.0;
    let mut z = vec![0.0; n];
    for _ in 0..hyper.iterations {
        gemm(n, n, 1, &gram, false, &alpha, false, &mut z, false);
        let mut gsum = 0.0;
        for i in 0..n {
            let g = -y[i] * sigmoid(-y[i] * (z[i] + bias)) / n as f64;
            alpha[i] -= step * (g + lambda * alpha[i]);
            gsum += g;
        }
        bias -= step * gsum;
    }
    if alpha.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
        return Err(Error::Numeric(format!(
            "{concept} probe at {layer} diverged"
        )));
    }
    let mut w = vec![0.0; m];
    gemm(1, n, m, &alpha, false, &a, false, &mut w, false);
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Numeric(format!(
            "{concept} probe at {layer} has zero weight"
        )));
    }
    let direction: Vec<f32> = w.iter().map(|&x| (x / norm) as f32).collect();
    let intercept = bias / norm;
    Ok(Cav {
        concept: concept.to_string(),
        layer,
        r,
        train_accuracy: accuracy(&direction, intercept, &pos_train, &neg_train),
        test_accuracy: accuracy(&direction, intercept, &pos_test, &neg_test),
        direction,
        intercept,
    })
}

/// One CAV per negative set, trained in parallel.
pub fn train_family(
    concept: &str,
    layer: LayerId,
    positive: &Activations,
    negatives: &[(usize, &Activations)],
    hyper: &CavHyper,
) -> Result<CavFamily> {
    if negatives.len() < 2 {
        return Err(Error::InvalidArgument(
            "a CAV family needs at least 2 negative sets".into(),
        ));
    }
    let mut seen: Vec<usize> = negatives.iter().map(|(r, _)| *r).collect();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument(
            "negative set indices must be distinct".into(),
        ));
    }
    let cavs = negatives
        .par_iter()
        .map(|(r, neg)| train_cav(positive, neg, hyper, concept, layer, *r))
        .collect::<Result<Vec<_>>>()?;
    Ok(CavFamily {
        concept: concept.to_string(),
        layer,
        cavs,
    })
}

/// The first `count` unordered pairs of distinct indices in `0..sets`,
/// enumerated by cyclic offset so consecutive pairs spread over all sets.
pub fn random_pairs(sets: usize, count: usize) -> Result<Vec<(usize, usize)>> {
    if sets < 2 {
        return Err(Error::InvalidArgument(
            "random CAVs need at least 2 random sets".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(count);
    'outer: for d in 1..=sets / 2 {
        for i in 0..sets {
            if 2 * d == sets && i >= d {
                continue;
            }
            if pairs.len() == count {
                break 'outer;
            }
            pairs.push((i, (i + d) % sets));
        }
    }
    if pairs.len() < count {
        return Err(Error::InvalidArgument(format!(
            "only {} distinct pairs exist among {sets} random sets",
            pairs.len()
        )));
    }
    Ok(pairs)
}

/// A random CAV: one random set as positives, a different one as negatives.
pub fn train_random_cav(
    positive: (usize, &Activations),
    negative: (usize, &Activations),
    hyper: &CavHyper,
    layer: LayerId,
) -> Result<Cav> {
    if positive.0 == negative.0 {
        return Err(Error::InvalidArgument(format!(
            "random CAV uses set {} as both positive and negative",
            positive.0
        )));
    }
    train_cav(
        positive.1,
        negative.1,
        hyper,
        &format!("random/{}", positive.0),
        layer,
        negative.0,
    )
}

/// `count` random CAVs over distinct pairs of `random_sets` (indexed by position).
pub fn random_cavs(
    layer: LayerId,
    random_sets: &[&Activations],
    count: usize,
    hyper: &CavHyper,
) -> Result<CavFamily> {
    let pairs = random_pairs(random_sets.len(), count)?;
    let cavs = pairs
        .par_iter()
        .map(|&(i, j)| train_random_cav((i, random_sets[i]), (j, random_sets[j]), hyper, layer))
        .collect::<Result<Vec<_>>>()?;
    Ok(CavFamily {
        concept: "random".into(),
        layer,
        cavs,
    })
}

/// Binary record: magic, version, metadata JSON, direction.
pub fn encode_cav(cav: &Cav) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Meta<'a> {
        concept: &'a str,
        layer: LayerId,
        r: usize,
        intercept: f64,
        train_accuracy: f64,
        test_accuracy: f64,
    }
    let meta = serde_json::to_vec(&Meta {
        concept: &cav.concept,
        layer: cav.layer,
        r: cav.r,
        intercept: cav.intercept,
        train_accuracy: cav.train_accuracy,
        test_accuracy: cav.test_accuracy,
    })?;
    let mut buf = Vec::with_capacity(16 + meta.len() + 4 * cav.dim());
    buf.extend_from_slice(&CAV_MAGIC);
    buf.extend_from_slice(&CAV_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(cav.dim() as u32).to_le_bytes());
    for v in &cav.direction {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_cav(bytes: &[u8], path: &Path) -> Result<Cav> {
    #[derive(Deserialize)]
    struct Meta {
        concept: String,
        layer: LayerId,
        r: usize,
        intercept: f64,
        train_accuracy: f64,
        test_accuracy: f64,
    }
    let fail = |reason: &str| Error::format(path, reason.to_string());
    let u32_at = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| fail("truncated record"))
    };
    if bytes.get(..4) != Some(&CAV_MAGIC[..]) {
        return Err(fail("missing CAVV header"));
    }
    let version = u32_at(4)? as u32;
    if version != CAV_VERSION {
        return Err(Error::SchemaMismatch {
            expected: CAV_VERSION,
            found: version,
        });
    }
    let meta_len = u32_at(8)?;
    let meta: Meta = serde_json::from_slice(
        bytes
            .get(12..12 + meta_len)
            .ok_or_else(|| fail("truncated metadata"))?,
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    let dim = u32_at(12 + meta_len)?;
    let start = 16 + meta_len;
    let payload = bytes
        .get(start..start + 4 * dim)
        .filter(|_| bytes.len() == start + 4 * dim)
        .ok_or_else(|| fail("direction length does not match header"))?;
    Ok(Cav {
        concept: meta.concept,
        layer: meta.layer,
        r: meta.r,
        direction: payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        intercept: meta.intercept,
        train_accuracy: meta.train_accuracy,
        test_accuracy: meta.test_accuracy,
    })
}

/// Directory of CAV records, one file per `(concept, layer, r)`.
#[derive(Debug, Clone)]
pub struct CavStore {
    root: PathBuf,
}

impl CavStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(CavStore { root })
    }

    pub fn path_for(&self, concept: &str, layer: LayerId, r: usize) -> PathBuf {
        let safe: String = concept
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '@' || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        self.root.join(format!("{safe}__{layer}__r{r}.cav"))
    }

    pub fn put(&self, cav: &Cav) -> Result<PathBuf> {
        let path = self.path_for(&cav.concept, cav.layer, cav.r);
        std::fs::write(&path, encode_cav(cav)?)?;
        Ok(path)
    }

    pub fn get(&self, concept: &str, layer: LayerId, r: usize) -> Result<Cav> {
        let path = self.path_for(concept, layer, r);
        let bytes =
            std::fs::read(&path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        decode_cav(&bytes, &path)
    }

    pub fn put_family(&self, family: &CavFamily) -> Result<()> {
        family.cavs.iter().try_for_each(|c| self.put(c).map(|_| ()))
    }

    /// Every record in the store, sorted by file name.
    pub fn all(&self) -> Result<Vec<Cav>> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&self.root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "cav"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| decode_cav(&std::fs::read(p)?, p))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
struct AccuracyRow<'a> {
    concept: &'a str,
    layer: String,
    r: usize,
    train_accuracy: f64,
    test_accuracy: f64,
}

/// CSV of per-CAV accuracies.
pub fn write_accuracy_csv(path: &Path, cavs: &[Cav]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for c in cavs {
        w.serialize(AccuracyRow {
            concept: &c.concept,
            layer: c.layer.to_string(),
            r: c.r,
            train_accuracy: c.train_accuracy,
            test_accuracy: c.test_accuracy,
        })
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
