//! Cosine-similarity matrices over CAV families and dot-product distributions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cav::{Activations, Cav, CavFamily};
use crate::error::{Error, Result};
use crate::nn::scalar::gemm;
use crate::nn::LayerId;
use crate::stats::{cosine, dot, mean, pairwise_win_fraction, welch_t_test, WelchTest};

pub const DEFAULT_PAIR_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub layer: LayerId,
    pub concepts: Vec<String>,
    /// Row-major `concepts.len()` squared entries.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.concepts.len() + j]
    }

    pub fn index(&self, concept: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c == concept)
    }

    pub fn between(&self, a: &str, b: &str) -> Result<f64> {
        let i = self
            .index(a)
            .ok_or_else(|| Error::UnknownConcept(a.into()))?;
        let j = self
            .index(b)
            .ok_or_else(|| Error::UnknownConcept(b.into()))?;
        Ok(self.get(i, j))
    }
}

/// Mean cosine over member pairs trained against different random sets.
pub fn family_similarity(a: &CavFamily, b: &CavFamily) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for x in &a.cavs {
        for y in &b.cavs {
            if x.r != y.r {
                sum += cosine(&x.direction, &y.direction);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("CAV pairs with distinct random sets"));
    }
    Ok(sum / count as f64)
}

pub fn cosine_matrix(families: &[&CavFamily]) -> Result<SimilarityMatrix> {
    let first = families.first().ok_or(Error::Empty("families"))?;
    if let Some(f) = families.iter().find(|f| f.layer != first.layer) {
        return Err(Error::InvalidLayer(format!(
            "{} is at {} but {} is at {}",
            f.concept, f.layer, first.concept, first.layer
        )));
    }
    let k = families.len();
    let upper: Vec<((usize, usize), f64)> = (0..k)
        .flat_map(|i| (i..k).map(move |j| (i, j)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(i, j)| Ok(((i, j), family_similarity(families[i], families[j])?)))
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; k * k];
    for ((i, j), v) in upper {
        values[i * k + j] = v;
        values[j * k + i] = v;
    }
    Ok(SimilarityMatrix {
        layer: first.layer,
        concepts: families.iter().map(|f| f.concept.clone()).collect(),
        values,
    })
}

/// Activations of one probe set at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeActivations {
    pub label: String,
    pub layer: LayerId,
    pub acts: Activations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DotDistribution {
    pub concept: String,
    pub r: usize,
    pub layer: LayerId,
    pub probe: String,
    pub dots: Vec<f64>,
}

fn check_layer(cav: &Cav, probe: &ProbeActivations) -> Result<()> {
    if cav.layer != probe.layer {
        return Err(Error::InvalidLayer(format!(
            "CAV at {} but probe `{}` at {}",
            cav.layer, probe.label, probe.layer
        )));
    }
    if cav.dim() != probe.acts.dim {
        return Err(Error::DimensionMismatch {
            expected: cav.dim(),
            found: probe.acts.dim,
        });
    }
    Ok(())
}

/// `a . v` for every activation of the probe.
pub fn dots(cav: &Cav, probe: &ProbeActivations) -> Result<Vec<f64>> {
    check_layer(cav, probe)?;
    Ok((0..probe.acts.rows())
        .map(|i| dot(probe.acts.row(i), &cav.direction))
        .collect())
}

pub fn dot_distributions(cav: &Cav, probes: &[&ProbeActivations]) -> Result<Vec<DotDistribution>> {
    probes
        .iter()
        .map(|p| {
            Ok(DotDistribution {
                concept: cav.concept.clone(),
                r: cav.r,
                layer: cav.layer,
                probe: p.label.clone(),
                dots: dots(cav, p)?,
            })
        })
        .collect()
}

/// Welch test between two dot distributions.
pub fn compare_distributions(a: &DotDistribution, b: &DotDistribution) -> Result<WelchTest> {
    welch_t_test(&a.dots, &b.dots)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntanglementFlag {
    pub concept: String,
    pub probe: String,
    pub layer: LayerId,
    /// Fraction of (positive, negative) pairs with `a+ . v > a- . v`, ties half.
    pub fraction: f64,
    pub threshold: f64,
    pub flagged: bool,
    pub mean_positive: f64,
    pub mean_negative: f64,
    pub p_value: f64,
}

/// Whether `cav` orders the probe's positives above its negatives.
pub fn entanglement_flag(
    cav: &Cav,
    positive: &ProbeActivations,
    negative: &ProbeActivations,
    threshold: f64,
) -> Result<EntanglementFlag> {
    let pos = dots(cav, positive)?;
    let neg = dots(cav, negative)?;
    flag_from_dots(cav, &positive.label, &pos, &neg, threshold)
}

fn flag_from_dots(
    cav: &Cav,
    probe: &str,
    pos: &[f64],
    neg: &[f64],
    threshold: f64,
) -> Result<EntanglementFlag> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Empty("probe activations"));
    }
    let fraction = pairwise_win_fraction(pos, neg);
    let p_value = if pos.len() >= 2 && neg.len() >= 2 {
        welch_t_test(pos, neg)?.p_value
    } else {
        f64::NAN
    };
    Ok(EntanglementFlag {
        concept: cav.concept.clone(),
        probe: probe.to_string(),
        layer: cav.layer,
        fraction,
        threshold,
        flagged: fraction > threshold,
        mean_positive: mean(pos),
        mean_negative: mean(neg),
        p_value,
    })
}

/// Dot products of every probe row with every family member, one GEMM:
/// `out[r][i] = a_i . v_r`.
pub fn family_dots(family: &CavFamily, probe: &ProbeActivations) -> Result<Vec<Vec<f64>>> {
    for cav in &family.cavs {
        check_layer(cav, probe)?;
    }
    let (n, m, k) = (family.cavs.len(), probe.acts.dim, probe.acts.rows());
    let v: Vec<f32> = family
        .cavs
        .iter()
        .flat_map(|c| c.direction.iter().copied())
        .collect();
    let mut out = vec![0.0f32; n * k];
    gemm(n, m, k, &v, false, &probe.acts.data, true, &mut out, false);
    Ok(out
        .chunks(k.max(1))
        .take(n)
        .map(|row| row.iter().map(|&x| x as f64).collect())
        .collect())
}

/// [`entanglement_flag`] for every member of a family, with batched dots.
pub fn family_entanglement(
    family: &CavFamily,
    positive: &ProbeActivations,
    negative: &ProbeActivations,
    threshold: f64,
) -> Result<Vec<EntanglementFlag>> {
    let pos = family_dots(family, positive)?;
    let neg = family_dots(family, negative)?;
    family
        .cavs
        .iter()
        .zip(pos.iter().zip(&neg))
        .map(|(cav, (p, n))| flag_from_dots(cav, &positive.label, p, n, threshold))
        .collect()
}
