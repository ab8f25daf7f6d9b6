//! Layer-consistency experiments.
//!
//! A perturbation `v1` at layer `l1` is pushed through the blocks up to
//! `l2` and compared with a perturbation `v2` applied at `l2` directly. Since
//! `v2` only enters additively at `l2`, the residual `f(a1 + s1 v1) - a2` is
//! computed once per `v1` and every candidate `v2` is scored against it.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cav::{Cav, CavFamily};
use crate::error::{Error, Result};
use crate::nn::{LayerId, Network, Target};
use crate::stats::{mean, norm};

pub const DEFAULT_GAMMA: f64 = 0.01;

/// How a direction is scaled before being added to an activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub layer: LayerId,
    pub gamma: f64,
    /// Mean activation norm over the reference inputs.
    pub mean_norm: f64,
    /// False adds the direction as given, ignoring `gamma` and `mean_norm`.
    pub scaled: bool,
}

impl PerturbationSpec {
    pub fn scaled(layer: LayerId, gamma: f64, mean_norm: f64) -> Self {
        PerturbationSpec {
            layer,
            gamma,
            mean_norm,
            scaled: true,
        }
    }

    pub fn raw(layer: LayerId) -> Self {
        PerturbationSpec {
            layer,
            gamma: 1.0,
            mean_norm: 1.0,
            scaled: false,
        }
    }

    /// Multiplier `s` with `a_hat = a + s v`.
    pub fn factor(&self, v: &[f32]) -> f64 {
        if !self.scaled {
            return 1.0;
        }
        let n = norm(v);
        if n == 0.0 {
            0.0
        } else {
            self.gamma * self.mean_norm / n
        }
    }

    /// Adds the scaled direction to every row of `a`.
    pub fn apply(&self, a: &mut [f32], v: &[f32]) {
        let s = self.factor(v) as f32;
        for row in a.chunks_exact_mut(v.len()) {
            for (x, &d) in row.iter_mut().zip(v) {
                *x += s * d;
            }
        }
    }
}

/// Activations of a fixed input set at two layers.
pub struct ConsistencyContext<'a> {
    pub net: &'a Network<f32>,
    pub l1: LayerId,
    pub l2: LayerId,
    pub count: usize,
    a1: Vec<f32>,
    a2: Vec<f32>,
    pub mean_norm1: f64,
    pub mean_norm2: f64,
}

/// `f(a1 + s1 v1) - a2` for every input, in f64.
#[derive(Debug, Clone)]
pub struct Residuals {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Residuals {
    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    /// Per-input `||r_i - w||`.
    pub fn errors_against(&self, w: &[f64]) -> Vec<f64> {
        self.data
            .par_chunks_exact(self.dim)
            .map(|r| {
                r.iter()
                    .zip(w)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

impl<'a> ConsistencyContext<'a> {
    pub fn new(
        net: &'a Network<f32>,
        inputs: &[f32],
        count: usize,
        l1: LayerId,
        l2: LayerId,
    ) -> Result<Self> {
        if l1 >= l2 {
            return Err(Error::InvalidLayer(format!("{l1} must precede {l2}")));
        }
        if count == 0 {
            return Err(Error::Empty("consistency inputs"));
        }
        let mut acts = net.capture(inputs, count, &[l1, l2])?;
        let a2 = acts.pop().expect("two layers");
        let a1 = acts.pop().expect("two layers");
        let mean_norm =
            |a: &[f32], m: usize| a.chunks_exact(m).map(norm).sum::<f64>() / count as f64;
        let (m1, m2) = (net.layer_dim(l1), net.layer_dim(l2));
        Ok(ConsistencyContext {
            net,
            l1,
            l2,
            count,
            mean_norm1: mean_norm(&a1, m1),
            mean_norm2: mean_norm(&a2, m2),
            a1,
            a2,
        })
    }

    pub fn dim1(&self) -> usize {
        self.net.layer_dim(self.l1)
    }

    pub fn dim2(&self) -> usize {
        self.net.layer_dim(self.l2)
    }

    pub fn spec1(&self, gamma: f64) -> PerturbationSpec {
        PerturbationSpec::scaled(self.l1, gamma, self.mean_norm1)
    }

    pub fn spec2(&self, gamma: f64) -> PerturbationSpec {
        PerturbationSpec::scaled(self.l2, gamma, self.mean_norm2)
    }

    fn check(&self, v: &[f32], layer: LayerId) -> Result<()> {
        let m = self.net.layer_dim(layer);
        if v.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: v.len(),
            });
        }
        Ok(())
    }

    pub fn residuals(&self, v1: &[f32], spec1: &PerturbationSpec) -> Result<Residuals> {
        self.check(v1, self.l1)?;
        let mut moved = self.a1.clone();
        spec1.apply(&mut moved, v1);
        let out = self
            .net
            .continue_forward(&moved, self.count, self.l1, Target::Layer(self.l2))?;
        Ok(Residuals {
            dim: self.dim2(),
            data: out
                .iter()
                .zip(&self.a2)
                .map(|(&f, &a)| f as f64 - a as f64)
                .collect(),
        })
    }

    /// Per-input consistency error `||f(a1_hat) - a2_hat||`.
    pub fn consistency_error(
        &self,
        v1: &[f32],
        spec1: &PerturbationSpec,
        v2: &[f32],
        spec2: &PerturbationSpec,
    ) -> Result<Vec<f64>> {
        self.check(v2, self.l2)?;
        let res = self.residuals(v1, spec1)?;
        Ok(res.errors_against(&offset(v2, spec2)))
    }
}

fn offset(v: &[f32], spec: &PerturbationSpec) -> Vec<f64> {
    let s = spec.factor(v);
    v.iter().map(|&x| s * x as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimiseConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub inputs: usize,
    /// Consecutive error increases that abort the run.
    pub patience: usize,
}

impl Default for OptimiseConfig {
    fn default() -> Self {
        OptimiseConfig {
            learning_rate: 1e-2,
            steps: 300,
            inputs: 256,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimisedCav {
    /// Best direction seen.
    pub direction: Vec<f32>,
    /// Mean error before each step, then after the last one.
    pub trace: Vec<f64>,
    pub best_error: f64,
    /// Stopped after `patience` consecutive increases.
    pub aborted: bool,
}

/// Adam on `v2` minimising the mean consistency error against fixed residuals.
pub fn optimise_cav(
    res: &Residuals,
    init: &[f32],
    spec2: &PerturbationSpec,
    cfg: &OptimiseConfig,
) -> Result<OptimisedCav> {
    if init.len() != res.dim {
        return Err(Error::DimensionMismatch {
            expected: res.dim,
            found: init.len(),
        });
    }
    let m = res.dim;
    let rows = res.rows() as f64;
    let mut v: Vec<f64> = init.iter().map(|&x| x as f64).collect();
    let (mut mom, mut vel) = (vec![0.0; m], vec![0.0; m]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut best = (f64::INFINITY, v.clone());
    let mut rises = 0;
    let mut aborted = false;
    for step in 0..=cfg.steps {
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !vn.is_finite() || vn == 0.0 {
            return Err(Error::Numeric("optimised direction collapsed".into()));
        }
        let s = if spec2.scaled {
            spec2.gamma * spec2.mean_norm / vn
        } else {
            1.0
        };
        let w: Vec<f64> = v.iter().map(|x| s * x).collect();
        // d mean_i ||r_i - w|| / dw = -mean_i (r_i - w) / e_i
        let (err, gw) = res
            .data
            .par_chunks_exact(m)
            .fold(
                || (0.0, vec![0.0; m]),
                |(mut e_acc, mut g), r| {
                    let e = r
                        .iter()
                        .zip(&w)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    e_acc += e;
                    if e > 0.0 {
                        for ((gi, ri), wi) in g.iter_mut().zip(r).zip(&w) {
                            *gi -= (ri - wi) / e;
                        }
                    }
                    (e_acc, g)
                },
            )
            .reduce(
                || (0.0, vec![0.0; m]),
                |(e1, mut g1), (e2, g2)| {
                    g1.iter_mut().zip(&g2).for_each(|(a, b)| *a += b);
                    (e1 + e2, g1)
                },
            );
        let err = err / rows;
        if !err.is_finite() {
            return Err(Error::Numeric("consistency error is not finite".into()));
        }
        if let Some(&prev) = trace.last() {
            rises = if err > prev { rises + 1 } else { 0 };
        }
        trace.push(err);
        if err < best.0 {
            best = (err, v.clone());
        }
        if rises >= cfg.patience {
            aborted = true;
            break;
        }
        if step == cfg.steps {
            break;
        }
        let mut grad: Vec<f64> = gw.iter().map(|g| g / rows).collect();
        if spec2.scaled {
            // w = s(v) v with s = c / ||v||: project out the radial part.
            let u: Vec<f64> = v.iter().map(|x| x / vn).collect();
            let radial: f64 = grad.iter().zip(&u).map(|(g, u)| g * u).sum();
            for (g, ui) in grad.iter_mut().zip(&u) {
                *g = s * (*g - radial * ui);
            }
        }
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for i in 0..m {
            mom[i] = b1 * mom[i] + (1.0 - b1) * grad[i];
            vel[i] = b2 * vel[i] + (1.0 - b2) * grad[i] * grad[i];
            v[i] -= cfg.learning_rate * (mom[i] / c1) / ((vel[i] / c2).sqrt() + eps);
        }
    }
    Ok(OptimisedCav {
        direction: best.1.iter().map(|&x| x as f32).collect(),
        trace,
        best_error: best.0,
        aborted,
    })
}

pub fn normalize(v: &[f32]) -> Vec<f32> {
    let n = norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|&x| (x as f64 / n) as f32).collect()
    }
}

/// `f(v1) - f(0)` (or `f(v1)` without recentring), treating `v1` as an `l1` activation.
pub fn projected_direction(
    net: &Network<f32>,
    v1: &[f32],
    l1: LayerId,
    l2: LayerId,
    recentre: bool,
) -> Result<Vec<f32>> {
    let fv = net.continue_forward(v1, 1, l1, Target::Layer(l2))?;
    if !recentre {
        return Ok(fv);
    }
    let f0 = net.continue_forward(&vec![0.0; v1.len()], 1, l1, Target::Layer(l2))?;
    Ok(fv.iter().zip(&f0).map(|(a, b)| a - b).collect())
}

/// Elementwise `Uniform(-0.5, 0.5)`, unit-normalised.
pub fn random_direction(dim: usize, seed: u64, index: u64) -> Vec<f32> {
    let mut rng = crate::rng::stream(seed, "random-direction", index);
    let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
    normalize(&v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Optimised,
    Concept,
    Projected,
    RandomCav,
    RandomDirection,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Optimised,
        Variant::Concept,
        Variant::Projected,
        Variant::RandomCav,
        Variant::RandomDirection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Optimised => "optimised",
            Variant::Concept => "concept",
            Variant::Projected => "projected",
            Variant::RandomCav => "random_cav",
            Variant::RandomDirection => "random_direction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantErrors {
    pub variant: Variant,
    /// Per-input errors pooled over all source CAVs.
    pub samples: Vec<f64>,
    /// Mean error for each source CAV.
    pub cav_means: Vec<f64>,
    /// `cav_means` divided by the mean optimised error.
    pub normalized: Vec<f64>,
}

impl VariantErrors {
    pub fn mean(&self) -> f64 {
        mean(&self.cav_means)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub concept: String,
    pub l1: LayerId,
    pub l2: LayerId,
    pub gamma: f64,
    pub projected_recentred: bool,
    pub variants: Vec<VariantErrors>,
    /// Final optimised errors, one per source CAV.
    pub optimised_final: Vec<f64>,
    pub aborted: usize,
}

impl ConsistencyReport {
    pub fn variant(&self, v: Variant) -> &VariantErrors {
        self.variants
            .iter()
            .find(|e| e.variant == v)
            .expect("every variant present")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub gamma: f64,
    pub recentre: bool,
    pub seed: u64,
    pub optimise: OptimiseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            gamma: DEFAULT_GAMMA,
            recentre: true,
            seed: 0,
            optimise: OptimiseConfig::default(),
        }
    }
}

/// Scores every variant for each concept CAV at `l1`.
///
/// The r-th source is `family1.cavs[r]`. Its concept target is the next
/// member of `family2`, trained against a different random set, and the
/// optimised CAV starts from that same target.
pub fn consistency_experiment(
    ctx: &ConsistencyContext,
    family1: &CavFamily,
    family2: &CavFamily,
    random2: &CavFamily,
    cfg: &ExperimentConfig,
) -> Result<ConsistencyReport> {
    if family1.layer != ctx.l1 || family2.layer != ctx.l2 || random2.layer != ctx.l2 {
        return Err(Error::InvalidLayer(format!(
            "families must sit at {} and {}",
            ctx.l1, ctx.l2
        )));
    }
    let count = family1.cavs.len().min(family2.cavs.len());
    if count < 2 || random2.cavs.is_empty() {
        return Err(Error::Empty("consistency CAVs"));
    }
    let (spec1, spec2) = (ctx.spec1(cfg.gamma), ctx.spec2(cfg.gamma));
    let mut per: Vec<Vec<Vec<f64>>> = vec![Vec::new(); Variant::ALL.len()];
    let mut optimised_final = Vec::new();
    let mut aborted = 0;
    for r in 0..count {
        let v1 = &family1.cavs[r].direction;
        let res = ctx.residuals(v1, &spec1)?;
        let target = &family2.cavs[(r + 1) % count].direction;
        let opt = optimise_cav(&res, target, &spec2, &cfg.optimise)?;
        optimised_final.push(*opt.trace.last().expect("non-empty trace"));
        aborted += opt.aborted as usize;
        let projected = normalize(&projected_direction(
            ctx.net,
            v1,
            ctx.l1,
            ctx.l2,
            cfg.recentre,
        )?);
        let candidates: [Vec<f32>; 5] = [
            opt.direction,
            target.clone(),
            projected,
            random2.cavs[r % random2.cavs.len()].direction.clone(),
            random_direction(ctx.dim2(), cfg.seed, r as u64),
        ];
        for (slot, v2) in per.iter_mut().zip(&candidates) {
            slot.push(res.errors_against(&offset(v2, &spec2)));
        }
    }
    let opt_mean = mean(&per[0].iter().map(|e| mean(e)).collect::<Vec<_>>());
    let variants = Variant::ALL
        .iter()
        .zip(per)
        .map(|(&variant, errs)| {
            let cav_means: Vec<f64> = errs.iter().map(|e| mean(e)).collect();
            VariantErrors {
                variant,
                normalized: cav_means.iter().map(|m| m / opt_mean).collect(),
                samples: errs.into_iter().flatten().collect(),
                cav_means,
            }
        })
        .collect();
    Ok(ConsistencyReport {
        concept: family1.concept.clone(),
        l1: ctx.l1,
        l2: ctx.l2,
        gamma: cfg.gamma,
        projected_recentred: cfg.recentre,
        variants,
        optimised_final,
        aborted,
    })
}

/// Mean error of the concept pair `(v1, v2)` for each `gamma`.
pub fn gamma_sweep(
    ctx: &ConsistencyContext,
    v1: &Cav,
    v2: &Cav,
    gammas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    gammas
        .iter()
        .map(|&g| {
            let e =
                ctx.consistency_error(&v1.direction, &ctx.spec1(g), &v2.direction, &ctx.spec2(g))?;
            Ok((g, mean(&e)))
        })
        .collect()
}

/// Least-squares line `y = slope x + intercept` and its R².
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    (slope, my - slope * mx, r2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoryCase {
    Linear,
    Relu,
    Sigmoid,
}

impl std::str::FromStr for TheoryCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(TheoryCase::Linear),
            "relu" => Ok(TheoryCase::Relu),
            "sigmoid" => Ok(TheoryCase::Sigmoid),
            other => Err(Error::InvalidArgument(format!(
                "unknown theory case `{other}`"
            ))),
        }
    }
}

/// Two inputs that demand different `v` for the same `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub u: Vec<f64>,
    pub a1: Vec<f64>,
    pub v1: Vec<f64>,
    pub a2: Vec<f64>,
    pub v2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryVerdict {
    pub case: TheoryCase,
    /// Whether one `v` works for every tested input.
    pub consistent: bool,
    /// Largest `||f(a + u) - f(a) - v||` over tested inputs, for the best `v`.
    pub max_error: f64,
    pub trials: usize,
    pub witnesses: Vec<Witness>,
}

/// Smallest gap between demanded shifts that counts as a contradiction.
pub const WITNESS_TOLERANCE: f64 = 1e-6;

/// Shift in `f(a + u) - f(a)` for scalar `a` (identity for the linear case).
pub fn required_shift(case: TheoryCase, a: f64, u: f64) -> f64 {
    match case {
        TheoryCase::Linear => u,
        TheoryCase::Relu => (a + u).max(0.0) - a.max(0.0),
        TheoryCase::Sigmoid => sigmoid(a + u) - sigmoid(a),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The `v` a single input demands: `f(a + u) - f(a)`, elementwise.
fn demanded(f: impl Fn(f64) -> f64, a: &[f64], u: &[f64]) -> Vec<f64> {
    a.iter().zip(u).map(|(&x, &d)| f(x + d) - f(x)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Numeric check of the linear, ReLU and sigmoid cases on random `u`.
pub fn verify_theory_cases(
    case: TheoryCase,
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<TheoryVerdict> {
    if dim == 0 || trials == 0 {
        return Err(Error::InvalidArgument(
            "dim and trials must be positive".into(),
        ));
    }
    let mut rng = crate::rng::stream(seed, "theory", case as u64);
    let mut witnesses = Vec::new();
    let mut max_error: f64 = 0.0;
    for _ in 0..trials {
        let u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        match case {
            TheoryCase::Linear => {
                let out = dim + 1;
                let m: Vec<f64> = (0..out * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..out).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let f = |a: &[f64]| -> Vec<f64> {
                    (0..out)
                        .map(|i| b[i] + (0..dim).map(|j| m[i * dim + j] * a[j]).sum::<f64>())
                        .collect()
                };
                let v: Vec<f64> = (0..out)
                    .map(|i| (0..dim).map(|j| m[i * dim + j] * u[j]).sum())
                    .collect();
                for _ in 0..8 {
                    let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    let moved: Vec<f64> = a.iter().zip(&u).map(|(x, d)| x + d).collect();
                    let need: Vec<f64> = f(&moved).iter().zip(f(&a)).map(|(p, q)| p - q).collect();
                    max_error = max_error.max(max_abs_diff(&need, &v));
                }
            }
            TheoryCase::Relu => {
                // Coordinate j with u_j != 0: a_j > max(0, -u_j) passes u_j through,
                // a_j < min(0, -u_j) blocks it.
                let j = (0..dim)
                    .max_by(|&p, &q| u[p].abs().total_cmp(&u[q].abs()))
                    .expect("dim > 0");
                let mut a1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let mut a2 = a1.clone();
                a1[j] = u[j].abs() + 1.0;
                a2[j] = -u[j].abs() - 1.0;
                let relu = |x: f64| x.max(0.0);
                let v1 = demanded(relu, &a1, &u);
                let v2 = demanded(relu, &a2, &u);
                let gap = max_abs_diff(&v1, &v2);
                max_error = max_error.max(gap / 2.0);
                if gap > WITNESS_TOLERANCE {
                    witnesses.push(Witness { u, a1, v1, a2, v2 });
                }
            }
            TheoryCase::Sigmoid => {
                let a1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..0.0)).collect();
                let a2: Vec<f64> = a1.iter().map(|x| x + 2.0).collect();
                let v1 = demanded(sigmoid, &a1, &u);
                let v2 = demanded(sigmoid, &a2, &u);
                let gap = max_abs_diff(&v1, &v2);
                max_error = max_error.max(gap / 2.0);
                if gap > WITNESS_TOLERANCE {
                    witnesses.push(Witness { u, a1, v1, a2, v2 });
                }
            }
        }
    }
    let consistent = match case {
        TheoryCase::Linear => max_error <= 1e-9,
        _ => witnesses.len() < trials,
    };
    Ok(TheoryVerdict {
        case,
        consistent,
        max_error,
        trials,
        witnesses,
    })
}
