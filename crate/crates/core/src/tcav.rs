//! Directional derivatives, TCAV scores and their significance.

use serde::{Deserialize, Serialize};

use crate::cav::{Cav, CavFamily};
use crate::error::{Error, Result};
use crate::nn::scalar::gemm;
use crate::nn::{LayerId, ModelConfig, Network};
use crate::stats::{mean, std_dev, welch_t_test};

pub const DEFAULT_P_THRESHOLD: f64 = 0.01;

/// `grad h_{l,k}(g_l(x)) . v` for one input.
pub fn directional_derivative(
    net: &Network<f32>,
    x: &[f32],
    cav: &Cav,
    class: usize,
) -> Result<f64> {
    let grad = net.grad_logit_wrt_activation(x, cav.layer, class)?;
    dot_checked(&grad, &cav.direction)
}

fn dot_checked(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(crate::stats::dot(a, b))
}

/// Logit gradients of one class over a set of inputs, at several layers.
#[derive(Debug, Clone)]
pub struct ClassGradients {
    pub class: usize,
    pub count: usize,
    pub layers: Vec<LayerId>,
    /// Per layer, `count x m_l` row-major.
    pub grads: Vec<Vec<f32>>,
}

impl ClassGradients {
    /// Gradients for `count` images in `inputs`, computed `batch` images at a time.
    pub fn compute(
        net: &Network<f32>,
        inputs: &[f32],
        count: usize,
        class: usize,
        layers: &[LayerId],
        batch: usize,
    ) -> Result<Self> {
        let dim = net.input_dim();
        if inputs.len() != count * dim {
            return Err(Error::DimensionMismatch {
                expected: count * dim,
                found: inputs.len(),
            });
        }
        let mut grads: Vec<Vec<f32>> = layers
            .iter()
            .map(|&l| Vec::with_capacity(count * net.layer_dim(l)))
            .collect();
        for chunk in inputs.chunks(batch.max(1) * dim) {
            let n = chunk.len() / dim;
            for (acc, g) in grads
                .iter_mut()
                .zip(net.logit_gradients(chunk, n, class, layers)?)
            {
                acc.extend_from_slice(&g);
            }
        }
        Ok(ClassGradients {
            class,
            count,
            layers: layers.to_vec(),
            grads,
        })
    }

    pub fn layer(&self, layer: LayerId) -> Result<&[f32]> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.grads[i].as_slice())
            .ok_or_else(|| Error::InvalidLayer(layer.to_string()))
    }

    /// `S_{c,k,l}(x)` for every input.
    pub fn derivatives(&self, cav: &Cav) -> Result<Vec<f64>> {
        let g = self.layer(cav.layer)?;
        let m = cav.dim();
        if g.len() != self.count * m {
            return Err(Error::DimensionMismatch {
                expected: g.len() / self.count.max(1),
                found: m,
            });
        }
        Ok(g.chunks_exact(m)
            .map(|row| crate::stats::dot(row, &cav.direction))
            .collect())
    }

    pub fn score(&self, cav: &Cav) -> Result<f64> {
        Ok(self.scores(&[cav])?[0])
    }

    /// Scores of several CAVs of one layer from a single f32 matrix product.
    pub fn scores(&self, cavs: &[&Cav]) -> Result<Vec<f64>> {
        let Some(first) = cavs.first() else {
            return Ok(Vec::new());
        };
        if self.count == 0 {
            return Err(Error::Empty("class inputs"));
        }
        let g = self.layer(first.layer)?;
        let m = g.len() / self.count;
        let mut v = Vec::with_capacity(cavs.len() * m);
        for c in cavs {
            if c.layer != first.layer {
                return Err(Error::InvalidLayer(format!(
                    "{} mixed with {}",
                    c.layer, first.layer
                )));
            }
            if c.dim() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    found: c.dim(),
                });
            }
            v.extend_from_slice(&c.direction);
        }
        let k = cavs.len();
        let mut d = vec![0.0f32; self.count * k];
        gemm(self.count, m, k, g, false, &v, true, &mut d, false);
        Ok((0..k)
            .map(|j| {
                (0..self.count).filter(|&i| d[i * k + j] > 0.0).count() as f64 / self.count as f64
            })
            .collect())
    }
}

/// Fraction of strictly positive derivatives.
pub fn tcav_score_from_derivatives(derivatives: &[f64]) -> Result<f64> {
    if derivatives.is_empty() {
        return Err(Error::Empty("class inputs"));
    }
    Ok(derivatives.iter().filter(|&&d| d > 0.0).count() as f64 / derivatives.len() as f64)
}

/// TCAV score of one CAV over `count` class inputs.
pub fn tcav_score(
    net: &Network<f32>,
    inputs: &[f32],
    count: usize,
    cav: &Cav,
    class: usize,
) -> Result<f64> {
    if count == 0 {
        return Err(Error::Empty("class inputs"));
    }
    ClassGradients::compute(net, inputs, count, class, &[cav.layer], 32)?.score(cav)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub p_value: f64,
    pub null_mean: f64,
    pub t: f64,
    pub df: f64,
}

/// Two-sided Welch test of concept scores against random-CAV scores.
pub fn significance(concept_scores: &[f64], random_scores: &[f64]) -> Result<Significance> {
    let w = welch_t_test(concept_scores, random_scores)?;
    Ok(Significance {
        p_value: w.p_value,
        null_mean: mean(random_scores),
        t: w.t,
        df: w.df,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcavReport {
    pub concept: String,
    pub class: String,
    pub layer: LayerId,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub random_scores: Vec<f64>,
    pub null_mean: f64,
    pub p_value: f64,
    pub significant: bool,
    pub mean_cav_accuracy: f64,
}

impl TcavReport {
    pub fn above_null(&self) -> bool {
        self.mean > self.null_mean
    }

    pub fn significant_above_null(&self) -> bool {
        self.significant && self.above_null()
    }

    /// Red marks insignificant results, black significant ones.
    pub fn flag(&self) -> &'static str {
        if self.significant {
            "black"
        } else {
            "red"
        }
    }
}

/// Scores a concept family and the random family at one layer.
pub fn tcav_report(
    class_name: &str,
    grads: &ClassGradients,
    family: &CavFamily,
    random: &CavFamily,
    p_threshold: f64,
) -> Result<TcavReport> {
    if family.layer != random.layer {
        return Err(Error::InvalidLayer(format!(
            "concept family at {} but random family at {}",
            family.layer, random.layer
        )));
    }
    let scores = grads.scores(&family.cavs.iter().collect::<Vec<_>>())?;
    let random_scores = grads.scores(&random.cavs.iter().collect::<Vec<_>>())?;
    let sig = significance(&scores, &random_scores)?;
    Ok(TcavReport {
        concept: family.concept.clone(),
        class: class_name.to_string(),
        layer: family.layer,
        mean: mean(&scores),
        std: std_dev(&scores),
        scores,
        random_scores,
        null_mean: sig.null_mean,
        p_value: sig.p_value,
        significant: sig.p_value < p_threshold,
        mean_cav_accuracy: family.mean_test_accuracy(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScoreReport {
    pub concept: String,
    pub class: String,
    pub layers: Vec<LayerId>,
    pub fraction_above_null: f64,
    pub score: f64,
}

/// `|2 (fraction of layers with mean above null - 1/2)|`.
pub fn consistency_score(above: &[bool]) -> f64 {
    let frac = above.iter().filter(|&&a| a).count() as f64 / above.len() as f64;
    (2.0 * (frac - 0.5)).abs()
}

pub fn layer_consistency_score(reports: &[TcavReport]) -> Result<ConsistencyScoreReport> {
    let first = reports.first().ok_or(Error::Empty("layer reports"))?;
    let above: Vec<bool> = reports.iter().map(TcavReport::above_null).collect();
    Ok(ConsistencyScoreReport {
        concept: first.concept.clone(),
        class: first.class.clone(),
        layers: reports.iter().map(|r| r.layer).collect(),
        fraction_above_null: above.iter().filter(|&&a| a).count() as f64 / above.len() as f64,
        score: consistency_score(&above),
    })
}

/// Layers followed by at least one nonlinearity, minus `omit`.
pub fn eligible_layers(config: &ModelConfig, omit: &[LayerId]) -> Vec<LayerId> {
    config
        .layers()
        .into_iter()
        .filter(|&l| config.has_nonlinear_tail(l) && !omit.contains(&l))
        .collect()
}
