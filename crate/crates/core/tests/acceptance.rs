//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Model-backed criteria train four desk-scale networks (E1, E2, E3 and the
//! spatial model) in a persistent content-addressed store, so only the first
//! run pays for training. Environment:
//!
//! - `CAVLAB_ACCEPTANCE_STORE`: store directory (default under the cargo
//!   target tmp dir).
//! - `CAVLAB_ACCEPTANCE=quick`: skip criteria that need trained models.
//! - `CAVLAB_ACCEPTANCE_ONLY=3,5`: run only the listed criteria.
//! - `CAVLAB_ACCEPTANCE_STRICT=1`: exit nonzero when any criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cavlab::cav::CavFamily;
use cavlab::consistency::{verify_theory_cases, TheoryCase, Variant};
use cavlab::elements::{render_image, sample_scene, ClassTable, DatasetConfig, Split};
use cavlab::lab::{Lab, LabConfig};
use cavlab::nn::{LayerId, Network, Target};
use cavlab::spatial::{spatial_norms, Half, Reduction, SpatialGrid};
use cavlab::tcav::consistency_score;
use rand::Rng;

const SIMPLE: &str = include_str!("../../../configs/simple.toml");
const E2: &str = include_str!("../../../configs/e2.toml");
const E3: &str = include_str!("../../../configs/e3.toml");
const SPATIAL: &str = include_str!("../../../configs/spatial.toml");

const COLOURS: [&str; 3] = ["red", "green", "blue"];
const REFERENCE_MEAN_CONSISTENCY: f64 = 0.841;

struct Check {
    pass: bool,
    detail: String,
    warning: Option<String>,
}

impl Check {
    fn new(pass: bool, detail: String) -> Self {
        Check {
            pass,
            detail,
            warning: None,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Model {
    E1,
    E2,
    E3,
    Spatial,
}

impl Model {
    fn name(self) -> &'static str {
        match self {
            Model::E1 => "E1",
            Model::E2 => "E2",
            Model::E3 => "E3",
            Model::Spatial => "spatial",
        }
    }

    fn config(self) -> Result<LabConfig> {
        let mut c = LabConfig::from_toml(match self {
            Model::E1 => SIMPLE,
            Model::E2 => E2,
            Model::E3 => E3,
            Model::Spatial => SPATIAL,
        })?;
        if self == Model::E2 {
            c.tcav.classes = vec!["striped_triangle".into()];
        }
        Ok(c)
    }

    fn stages(self) -> &'static [&'static str] {
        match self {
            Model::E1 => &[
                "gen",
                "train",
                "capture",
                "cav",
                "tcav",
                "consistency",
                "entangle",
                "report",
            ],
            Model::E2 => &["gen", "train", "capture", "cav", "tcav", "entangle"],
            Model::E3 => &["gen", "train", "capture", "cav", "entangle"],
            Model::Spatial => &["gen", "train", "capture", "cav", "spatial", "report"],
        }
    }
}

struct Suite {
    store: PathBuf,
}

impl Suite {
    /// The model's lab with every stage it needs completed (cached after
    /// the first run).
    fn lab(&self, model: Model) -> Result<Lab> {
        let mut lab = Lab::new(model.config()?, &self.store)?;
        lab.progress = true;
        for stage in model.stages() {
            let started = Instant::now();
            let out = lab
                .run_stage(stage)
                .with_context(|| format!("{} stage `{stage}`", model.name()))?;
            if !out.cached {
                eprintln!(
                    "  [{}] {} ({:.0}s)",
                    model.name(),
                    out.line,
                    started.elapsed().as_secs_f64()
                );
            }
        }
        lab.progress = false;
        Ok(lab)
    }
}

fn fmt_layers(layers: &[LayerId]) -> String {
    layers
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

// 1. Generator throughput at 256x256 on one core.
fn generator_throughput() -> Result<Check> {
    let config = DatasetConfig::simple(0).full_scale();
    let count = 400u64;
    let started = Instant::now();
    let mut checksum = 0.0f64;
    for i in 0..count {
        let mut rng = cavlab::rng::stream(0, "acceptance-throughput", i);
        let scene = sample_scene(&config, &mut rng, i)?;
        let image = render_image(&scene, &config);
        checksum += image.data.iter().map(|&v| v as f64).sum::<f64>() / image.data.len() as f64;
    }
    let rate = count as f64 / started.elapsed().as_secs_f64();
    let mut check = Check::new(
        rate >= 125.0,
        format!(
            "{rate:.0} images/s single-threaded at 256x256 (target 250, floor 125; mean intensity {:.3})",
            checksum / count as f64
        ),
    );
    if check.pass && rate < 250.0 {
        check.warning = Some(format!(
            "{rate:.0} images/s is below 250 but above the constrained-hardware floor"
        ));
    }
    Ok(check)
}

// 2. Ground-truth class counts.
fn class_counts() -> Result<Check> {
    let simple = ClassTable::build(&DatasetConfig::simple(0)).len();
    let standard = ClassTable::build(&DatasetConfig::standard(0)).len();
    Ok(Check::new(
        simple == 69 && standard == 153,
        format!("simple = {simple} (want 69), standard = {standard} (want 153)"),
    ))
}

// 3. Training accuracy and time on desk-scale simple Elements.
fn training(suite: &Suite) -> Result<Check> {
    let lab = suite.lab(Model::E1)?;
    let model = cavlab::nn::load_model(&lab.model_stem()?)?;
    let log = &model.log;
    let train = log
        .final_train_accuracy
        .context("training accuracy missing")?;
    let val = log
        .validation_accuracy
        .context("validation accuracy missing")?;
    let minutes = log.total_seconds / 60.0;
    Ok(Check::new(
        train >= 0.995 && val >= 0.99 && minutes <= 30.0,
        format!(
            "train {:.4}% (>= 99.5), validation {:.4}% (>= 99), {minutes:.1} min over {} epochs (<= 30)",
            100.0 * train,
            100.0 * val,
            log.epochs.len()
        ),
    ))
}

// 4. Reverse-mode logit gradients against central differences.
fn gradients(suite: &Suite) -> Result<Check> {
    let lab = suite.lab(Model::E1)?;
    let net: Network<f64> = lab.network()?.cast();
    let validation = lab.dataset(Split::Validation)?;
    let class = lab.class_table().index_of("striped_triangle")?;
    let image = &validation.images(&[0])[0];
    // Uniform background makes max-pool windows tie exactly, where the logit has
    // a kink. Jitter moves the check to a generic, differentiable point.
    let mut jitter = cavlab::rng::stream(0, "acceptance-fd-input", 0);
    let x: Vec<f64> = image
        .data
        .iter()
        .map(|&v| v as f64 + jitter.gen_range(-0.01..0.01))
        .collect();
    let layers = lab.model_config().layers();
    let grads = net.logit_gradients(&x, 1, class, &layers)?;
    let acts = net.capture(&x, 1, &layers)?;
    let mut rng = cavlab::rng::stream(0, "acceptance-fd", 0);
    let (h, floor, per_layer) = (1e-6, 1e-6, 100);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for (li, &layer) in layers.iter().enumerate() {
        let logit = |a: &[f64]| -> Result<f64> {
            Ok(net.continue_forward(a, 1, layer, Target::Logits)?[class])
        };
        for _ in 0..per_layer {
            let i = rng.gen_range(0..acts[li].len());
            let mut up = acts[li].clone();
            up[i] += h;
            let mut down = acts[li].clone();
            down[i] -= h;
            let fd = (logit(&up)? - logit(&down)?) / (2.0 * h);
            let g = grads[li][i];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
            worst = worst.max(rel);
            if rel > 1e-3 {
                failures += 1;
            }
        }
    }
    Ok(Check::new(
        failures == 0,
        format!(
            "{} coordinates ({per_layer} per layer, trained E1 weights in f64): worst relative error {worst:.2e}, {failures} above 1e-3",
            per_layer * layers.len()
        ),
    ))
}

// 5. Colour CAVs separate; random CAVs do not.
fn cav_quality(suite: &Suite) -> Result<Check> {
    let lab = suite.lab(Model::E1)?;
    let summaries = lab.family_summaries()?;
    let mut colour_min = f64::INFINITY;
    for layer in [2, 3, 4].map(LayerId) {
        for c in COLOURS {
            let s = summaries
                .iter()
                .find(|s| s.concept == c && s.layer == layer)
                .with_context(|| format!("no {c} family at {layer}"))?;
            colour_min = colour_min.min(s.mean_test_accuracy);
        }
    }
    let random: Vec<_> = summaries.iter().filter(|s| s.concept == "random").collect();
    if random.is_empty() {
        bail!("no random families");
    }
    let r_lo = random
        .iter()
        .map(|s| s.mean_test_accuracy)
        .fold(f64::INFINITY, f64::min);
    let r_hi = random
        .iter()
        .map(|s| s.mean_test_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let m_lo = random
        .iter()
        .map(|s| s.min_test_accuracy)
        .fold(f64::INFINITY, f64::min);
    let m_hi = random
        .iter()
        .map(|s| s.max_test_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Check::new(
        colour_min > 0.9 && r_lo >= 0.35 && r_hi <= 0.65,
        format!(
            "lowest colour family accuracy in layers.2-4 {colour_min:.3} (> 0.9); random family means [{r_lo:.3}, {r_hi:.3}] across {} layers (within [0.35, 0.65]); single random CAVs span [{m_lo:.3}, {m_hi:.3}]",
            random.len()
        ),
    ))
}

// 6. Consistency error ordering on the trained nonlinear model.
fn consistency_ordering(suite: &Suite) -> Result<Check> {
    let lab = suite.lab(Model::E1)?;
    let body = lab.consistency_body()?;
    let r = &body.report;
    let opt = r.variant(Variant::Optimised);
    let (o, c, d) = (
        opt.mean(),
        r.variant(Variant::Concept).mean(),
        r.variant(Variant::RandomDirection).mean(),
    );
    let n = opt.cav_means.len();
    Ok(Check::new(
        n >= 10 && o <= c && c < d && o > 0.0,
        format!(
            "{} {}->{} over {n} CAVs: optimised {o:.4e} <= concept {c:.4e} < random direction {d:.4e}; optimised > 0",
            r.concept, r.l1, r.l2
        ),
    ))
}

// 7. Linear, ReLU and sigmoid theory cases.
fn theory() -> Result<Check> {
    let (dim, trials) = (8, 200);
    let lin = verify_theory_cases(TheoryCase::Linear, dim, trials, 0)?;
    let relu = verify_theory_cases(TheoryCase::Relu, dim, trials, 0)?;
    let sig = verify_theory_cases(TheoryCase::Sigmoid, dim, trials, 0)?;
    Ok(Check::new(
        lin.consistent && lin.max_error <= 1e-5 && relu.witnesses.len() == trials && !sig.consistent,
        format!(
            "linear error {:.1e} (<= 1e-5); ReLU witnesses {}/{trials}; sigmoid input-dependent v in {}/{trials} trials",
            lin.max_error,
            relu.witnesses.len(),
            sig.witnesses.len()
        ),
    ))
}

// 8. Red/triangle entanglement grows from E1 to E3; colours anti-align.
fn entanglement_trend(suite: &Suite) -> Result<Check> {
    let mats: Vec<_> = [Model::E1, Model::E2, Model::E3]
        .iter()
        .map(|&m| {
            suite
                .lab(m)?
                .similarity_matrices()
                .map_err(anyhow::Error::from)
        })
        .collect::<Result<_>>()?;
    let lab = suite.lab(Model::E1)?;
    let layers = lab.tcav_layers()?;
    let mut trend_layers = Vec::new();
    let mut colour_layers = Vec::new();
    let mut lines = Vec::new();
    for &layer in &layers {
        let at = |i: usize| {
            mats[i]
                .iter()
                .find(|m| m.layer == layer)
                .context("missing layer")
        };
        let (m1, m2, m3) = (at(0)?, at(1)?, at(2)?);
        let cos = [m1, m2, m3].map(|m| m.between("red", "triangle").unwrap_or(f64::NAN));
        let diagonal = m3.between("red", "red")?;
        if cos[0] < cos[1] && cos[1] < cos[2] && cos[2] >= 0.8 * diagonal {
            trend_layers.push(layer);
        }
        let mut colours_negative = true;
        for m in [m1, m2, m3] {
            for (i, a) in COLOURS.iter().enumerate() {
                for b in &COLOURS[i + 1..] {
                    colours_negative &= m.between(a, b)? < 0.0;
                }
            }
        }
        if colours_negative {
            colour_layers.push(layer);
        }
        lines.push(format!(
            "{layer}: {:.3} < {:.3} < {:.3} vs 0.8 x {:.3}",
            cos[0], cos[1], cos[2], diagonal
        ));
    }
    let majority = layers.len() / 2 + 1;
    Ok(Check::new(
        trend_layers.len() >= majority && colour_layers.len() >= majority,
        format!(
            "cos(red, triangle) E1 < E2 < E3 with E3 >= 0.8 x red diagonal in {}/{} layers [{}]; colour pairs negative in all three models in {}/{} layers (need {majority}); {}",
            trend_layers.len(),
            layers.len(),
            fmt_layers(&trend_layers),
            colour_layers.len(),
            layers.len(),
            lines.join("; ")
        ),
    ))
}

// 9. E1 striped-triangle ground truth.
fn tcav_ground_truth(suite: &Suite) -> Result<Check> {
    let lab = suite.lab(Model::E1)?;
    let body = lab.tcav_body()?;
    let class = "striped_triangle";
    let mut defining = Vec::new();
    for concept in ["striped", "triangle"] {
        let hits = body
            .layers
            .iter()
            .filter(|&&l| {
                body.report(class, concept, l)
                    .is_some_and(|r| r.significant_above_null())
            })
            .count();
        defining.push((concept, hits));
    }
    let mut violations = Vec::new();
    let mut tested = 0;
    for concept in body
        .concepts
        .iter()
        .filter(|c| *c != "striped" && *c != "triangle")
    {
        for &l in &body.layers {
            let r = body.report(class, concept, l).context("missing report")?;
            if r.mean_cav_accuracy > 0.9 {
                tested += 1;
                if r.significant_above_null() {
                    violations.push(format!("{concept}@{l}"));
                }
            }
        }
    }
    let n = body.layers.len();
    Ok(Check::new(
        defining.iter().all(|&(_, hits)| hits >= 3) && violations.is_empty(),
        format!(
            "striped significant above null in {}/{n} layers, triangle in {}/{n} (need 3); unrelated concept/layer pairs with accuracy > 0.9: {tested}, significant above null: {}",
            defining[0].1,
            defining[1].1,
            if violations.is_empty() { "none".to_string() } else { violations.join(",") }
        ),
    ))
}

// 10. E2's misleading red score.
fn misleading_red(suite: &Suite) -> Result<Check> {
    let lab = suite.lab(Model::E2)?;
    let body = lab.tcav_body()?;
    let hits: Vec<LayerId> = body
        .layers
        .iter()
        .copied()
        .filter(|&l| {
            body.report("striped_triangle", "red", l)
                .is_some_and(|r| r.significant_above_null())
        })
        .collect();
    let means: Vec<String> = body
        .layers
        .iter()
        .filter_map(|&l| body.report("striped_triangle", "red", l))
        .map(|r| {
            format!(
                "{}: {:.3} vs null {:.3} p={:.1e}",
                r.layer, r.mean, r.null_mean, r.p_value
            )
        })
        .collect();
    Ok(Check::new(
        hits.len() >= 2,
        format!(
            "red significant above null for striped_triangle in {} layers [{}] (need 2); {}",
            hits.len(),
            fmt_layers(&hits),
            means.join("; ")
        ),
    ))
}

// 11. Spatial norm grids.
fn spatial_norm_grids(suite: &Suite) -> Result<Check> {
    let lab = suite.lab(Model::Spatial)?;
    let body = lab.spatial_body()?;
    let layers = lab.tcav_layers()?;
    let grid = |concept: &str, layer: LayerId| -> Result<&SpatialGrid> {
        body.grids
            .iter()
            .find(|g| g.concept == concept && g.layer == layer && g.reduction == Reduction::Norm)
            .with_context(|| format!("no norm grid for {concept} at {layer}"))
    };
    let mut uniform = Vec::new();
    let mut left = Vec::new();
    let mut lines = Vec::new();
    for &l in &layers {
        let ratio = grid("red", l)?.max_min_ratio();
        let mass = grid("red@left", l)?.mass_fraction(Half::Left);
        let mirror = grid("red@right", l)?.mass_fraction(Half::Right);
        if ratio < 2.0 {
            uniform.push(l);
        }
        if mass > 0.7 {
            left.push(l);
        }
        lines.push(format!(
            "{l}: max/min {ratio:.2}, left mass {mass:.2} (red@right right mass {mirror:.2})"
        ));
    }
    // ||v||^2 equals the sum of squared spatial norms for every member.
    let cavs = lab.cav_store()?;
    let mc = lab.model_config();
    let mut worst: f64 = 0.0;
    let mut members = 0;
    for &l in &layers {
        for label in ["red", "red@left", "red@right"] {
            let fam: CavFamily = lab.family(&cavs, label, l)?;
            for cav in &fam.cavs {
                let total: f64 = cav.direction.iter().map(|&x| (x as f64).powi(2)).sum();
                let grid = spatial_norms(cav, mc.layer_shape(l))?;
                worst = worst.max((grid.sum_of_squares() - total).abs());
                members += 1;
            }
        }
    }
    let majority = layers.len() / 2 + 1;
    Ok(Check::new(
        uniform.len() >= majority && left.len() >= majority && worst <= 1e-10,
        format!(
            "red grid max/min < 2 in {}/{} layers, red@left left mass > 0.7 in {}/{} (need {majority}); norm identity worst error {worst:.1e} over {members} CAVs (<= 1e-10); {}",
            uniform.len(),
            layers.len(),
            left.len(),
            layers.len(),
            lines.join("; ")
        ),
    ))
}

// 12. Spatial TCAV contrast for the left and right striped-triangle classes.
fn spatial_contrast(suite: &Suite) -> Result<Check> {
    let lab = suite.lab(Model::Spatial)?;
    let body = lab.spatial_body()?;
    let layers = lab.tcav_layers()?;
    let majority = layers.len() / 2 + 1;
    let mut pass = true;
    let mut parts = Vec::new();
    for (side, other) in [("left", "right"), ("right", "left")] {
        let class = format!("striped_triangle@{side}");
        let sig = |concept: &str, l: LayerId| -> Result<bool> {
            body.suite
                .iter()
                .find(|e| {
                    e.report.class == class && e.report.concept == concept && e.report.layer == l
                })
                .map(|e| e.report.significant_above_null())
                .with_context(|| format!("no suite entry for {class} {concept} {l}"))
        };
        let mut good = Vec::new();
        for &l in &layers {
            let same = sig(&format!("striped@{side}"), l)? && sig(&format!("triangle@{side}"), l)?;
            let opposite =
                sig(&format!("striped@{other}"), l)? || sig(&format!("triangle@{other}"), l)?;
            if same && !opposite {
                good.push(l);
            }
        }
        pass &= good.len() >= majority;
        parts.push(format!(
            "{class}: contrast holds in {}/{} layers [{}]",
            good.len(),
            layers.len(),
            fmt_layers(&good)
        ));
    }
    Ok(Check::new(
        pass,
        format!("{} (need {majority})", parts.join("; ")),
    ))
}

// 13. Layer consistency score endpoints and the full-sweep distribution.
fn layer_consistency(suite: &Suite) -> Result<Check> {
    let endpoints = consistency_score(&[true; 4]) == 1.0
        && consistency_score(&[false; 4]) == 1.0
        && consistency_score(&[true, false, true, false]) == 0.0;
    let lab = suite.lab(Model::E1)?;
    let scores: Vec<f64> = lab
        .tcav_body()?
        .consistency_scores
        .iter()
        .map(|s| s.score)
        .collect();
    if scores.is_empty() {
        bail!("no consistency scores");
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let low = scores.iter().filter(|&&s| s <= 0.5).count();
    let zero = scores.iter().filter(|&&s| s == 0.0).count();
    Ok(Check::new(
        endpoints && low > 0,
        format!(
            "endpoints {}; mean S over {} class/concept pairs {mean:.3} (reference {REFERENCE_MEAN_CONSISTENCY}); {:.1}% <= 0.5, {:.1}% = 0",
            if endpoints { "exact" } else { "wrong" },
            scores.len(),
            100.0 * low as f64 / scores.len() as f64,
            100.0 * zero as f64 / scores.len() as f64
        ),
    ))
}

fn main() -> ExitCode {
    cavlab::sys::tune_allocator();
    if let Err(e) = cavlab::sys::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    let quick = std::env::var("CAVLAB_ACCEPTANCE").is_ok_and(|v| v == "quick");
    let strict = std::env::var("CAVLAB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let only: Option<Vec<usize>> = std::env::var("CAVLAB_ACCEPTANCE_ONLY").ok().map(|v| {
        v.split(',')
            .filter_map(|id| id.trim().parse().ok())
            .collect()
    });
    let store = std::env::var_os("CAVLAB_ACCEPTANCE_STORE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-store"));
    let suite = Suite { store };
    println!("acceptance store: {}", suite.store.display());

    type Criterion<'a> = (
        usize,
        &'static str,
        bool,
        Box<dyn Fn() -> Result<Check> + 'a>,
    );
    let s = &suite;
    let criteria: Vec<Criterion> = vec![
        (
            1,
            "generator throughput",
            false,
            Box::new(generator_throughput),
        ),
        (2, "class counts", false, Box::new(class_counts)),
        (3, "model training", true, Box::new(|| training(s))),
        (4, "gradient correctness", true, Box::new(|| gradients(s))),
        (5, "CAV quality", true, Box::new(|| cav_quality(s))),
        (
            6,
            "consistency ordering",
            true,
            Box::new(|| consistency_ordering(s)),
        ),
        (7, "theory verification", false, Box::new(theory)),
        (
            8,
            "entanglement trend",
            true,
            Box::new(|| entanglement_trend(s)),
        ),
        (
            9,
            "TCAV ground truth",
            true,
            Box::new(|| tcav_ground_truth(s)),
        ),
        (
            10,
            "misleading red score",
            true,
            Box::new(|| misleading_red(s)),
        ),
        (
            11,
            "spatial norms",
            true,
            Box::new(|| spatial_norm_grids(s)),
        ),
        (
            12,
            "spatial TCAV contrast",
            true,
            Box::new(|| spatial_contrast(s)),
        ),
        (
            13,
            "layer consistency score",
            true,
            Box::new(|| layer_consistency(s)),
        ),
    ];
    let (mut passed, mut failed, mut skipped) = (0, 0, 0);
    for (id, name, needs_models, run) in &criteria {
        if only.as_ref().is_some_and(|ids| !ids.contains(id)) {
            continue;
        }
        if quick && *needs_models {
            println!("SKIP {id:>2} {name}: needs trained models (CAVLAB_ACCEPTANCE=quick)");
            skipped += 1;
            continue;
        }
        let started = Instant::now();
        match run() {
            Ok(check) => {
                let tag = if check.pass { "PASS" } else { "FAIL" };
                println!(
                    "{tag} {id:>2} {name}: {} [{:.1}s]",
                    check.detail,
                    started.elapsed().as_secs_f64()
                );
                if let Some(w) = check.warning {
                    println!("     warning: {w}");
                }
                if check.pass {
                    passed += 1;
                } else {
                    failed += 1;
                }
            }
            Err(e) => {
                println!("FAIL {id:>2} {name}: error: {e:#}");
                failed += 1;
            }
        }
    }
    println!("acceptance: {passed} passed, {failed} failed, {skipped} skipped");
    if strict && failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
