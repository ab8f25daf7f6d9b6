//! Spatial norms and means of CAVs, and spatial-dependence tests.

use serde::{Deserialize, Serialize};

use crate::cav::{Cav, CavFamily};
use crate::entanglement::{dots, ProbeActivations};
use crate::error::{Error, Result};
use crate::nn::LayerId;
use crate::stats::{pairwise_win_fraction, welch_t_test, WelchTest};
use crate::tcav::{tcav_report, ClassGradients, TcavReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Norm,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub concept: String,
    pub layer: LayerId,
    pub height: usize,
    pub width: usize,
    pub reduction: Reduction,
    pub aggregated_over: usize,
    /// Row-major `height x width`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Half {
    Left,
    Right,
    Top,
    Bottom,
}

impl SpatialGrid {
    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.width + w]
    }

    pub fn max_min_ratio(&self) -> f64 {
        let max = self
            .values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        max / min
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Share of the grid mass in one half. A middle row or column of an odd
    /// grid belongs to neither half and is left out of both sums.
    pub fn mass_fraction(&self, half: Half) -> f64 {
        let (mut inside, mut total) = (0.0, 0.0);
        for h in 0..self.height {
            for w in 0..self.width {
                let (idx, len) = match half {
                    Half::Left | Half::Right => (w, self.width),
                    Half::Top | Half::Bottom => (h, self.height),
                };
                let first = 2 * idx + 1 < len;
                let second = 2 * idx + 1 > len;
                if !first && !second {
                    continue;
                }
                let v = self.get(h, w);
                total += v;
                if (first && matches!(half, Half::Left | Half::Top))
                    || (second && matches!(half, Half::Right | Half::Bottom))
                {
                    inside += v;
                }
            }
        }
        inside / total
    }
}

fn reduce(cav: &Cav, shape: [usize; 3], reduction: Reduction) -> Result<Vec<f64>> {
    let [h, w, d] = shape;
    if cav.dim() != h * w * d {
        return Err(Error::DimensionMismatch {
            expected: h * w * d,
            found: cav.dim(),
        });
    }
    Ok(cav
        .direction
        .chunks_exact(d)
        .map(|cell| match reduction {
            Reduction::Norm => cell.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt(),
            Reduction::Mean => cell.iter().map(|&x| x as f64).sum::<f64>() / d as f64,
        })
        .collect())
}

fn grid(cav: &Cav, shape: [usize; 3], reduction: Reduction) -> Result<SpatialGrid> {
    Ok(SpatialGrid {
        concept: cav.concept.clone(),
        layer: cav.layer,
        height: shape[0],
        width: shape[1],
        reduction,
        aggregated_over: 1,
        values: reduce(cav, shape, reduction)?,
    })
}

/// L2 norm over channels at every spatial cell of an NHWC layer.
pub fn spatial_norms(cav: &Cav, shape: [usize; 3]) -> Result<SpatialGrid> {
    grid(cav, shape, Reduction::Norm)
}

/// Channel mean at every spatial cell.
pub fn spatial_means(cav: &Cav, shape: [usize; 3]) -> Result<SpatialGrid> {
    grid(cav, shape, Reduction::Mean)
}

/// Cellwise mean of the members' grids.
pub fn family_mean_grid(
    family: &CavFamily,
    shape: [usize; 3],
    reduction: Reduction,
) -> Result<SpatialGrid> {
    if family.cavs.is_empty() {
        return Err(Error::Empty("CAV family"));
    }
    let mut values = vec![0.0; shape[0] * shape[1]];
    for cav in &family.cavs {
        for (acc, v) in values.iter_mut().zip(reduce(cav, shape, reduction)?) {
            *acc += v;
        }
    }
    let r = family.cavs.len() as f64;
    values.iter_mut().for_each(|v| *v /= r);
    Ok(SpatialGrid {
        concept: family.concept.clone(),
        layer: family.layer,
        height: shape[0],
        width: shape[1],
        reduction,
        aggregated_over: family.cavs.len(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceTest {
    pub concept: String,
    pub layer: LayerId,
    pub first: String,
    pub second: String,
    /// Fraction of pairs with `a1 . v > a2 . v`, ties half.
    pub fraction: f64,
    pub threshold: f64,
    pub dependent: bool,
}

/// Whether `cav` scores positives at one location above positives at another.
pub fn spatial_dependence_test(
    cav: &Cav,
    first: &ProbeActivations,
    second: &ProbeActivations,
    threshold: f64,
) -> Result<DependenceTest> {
    let a = dots(cav, first)?;
    let b = dots(cav, second)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("probe activations"));
    }
    let fraction = pairwise_win_fraction(&a, &b);
    Ok(DependenceTest {
        concept: cav.concept.clone(),
        layer: cav.layer,
        first: first.label.clone(),
        second: second.label.clone(),
        fraction,
        threshold,
        dependent: fraction > threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    /// Region variant such as `plain`, `left` or `right`.
    pub variant: String,
    pub report: TcavReport,
}

/// TCAV reports for every variant family, each scored against the random
/// family of its layer.
pub fn spatial_tcav_suite(
    class_name: &str,
    grads: &ClassGradients,
    variants: &[(String, Vec<CavFamily>)],
    random: &[CavFamily],
    p_threshold: f64,
) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (variant, families) in variants {
        for family in families {
            let null = random
                .iter()
                .find(|r| r.layer == family.layer)
                .ok_or_else(|| {
                    Error::InvalidLayer(format!("no random family at {}", family.layer))
                })?;
            out.push(SuiteEntry {
                variant: variant.clone(),
                report: tcav_report(class_name, grads, family, null, p_threshold)?,
            });
        }
    }
    Ok(out)
}

/// Welch test between the scores of two variant reports.
pub fn variant_symmetry(a: &TcavReport, b: &TcavReport) -> Result<WelchTest> {
    welch_t_test(&a.scores, &b.scores)
}
