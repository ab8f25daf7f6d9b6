use anyhow::Result;
use cavlab::cav::{Cav, CavFamily};
use cavlab::nn::{Activation, LayerId, ModelConfig, Network, Preset, Target};
use cavlab::tcav::{
    directional_derivative, eligible_layers, layer_consistency_score, significance, tcav_report,
    tcav_score, ClassGradients,
};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        channels_per_layer: vec![4, 5, 4, 6, 3, 4],
        num_classes: 3,
        input_side: 8,
        pool_after: vec![0, 1, 2],
        activations: Vec::new(),
        batch_norm: true,
        hidden_units: None,
    }
}

fn net(seed: u64) -> Network<f32> {
    let mut net = Network::<f32>::init(&tiny_config(), seed).unwrap();
    let mut rng = cavlab::rng::stream(seed, "tcav-test", 0);
    for b in &mut net.blocks {
        for v in &mut b.bias {
            *v = rng.gen_range(-0.2..0.3);
        }
    }
    net
}

fn inputs(n: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = cavlab::rng::stream(seed, "tcav-input", 0);
    (0..n * dim).map(|_| rng.gen_range(0.0..1.0)).collect()
}

fn unit_cav(layer: LayerId, dim: usize, seed: u64, concept: &str) -> Cav {
    let mut rng = cavlab::rng::stream(seed, "tcav-cav", 0);
    let mut v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = cavlab::stats::norm(&v) as f32;
    v.iter_mut().for_each(|x| *x /= n);
    Cav {
        concept: concept.into(),
        layer,
        r: seed as usize,
        direction: v,
        intercept: 0.0,
        train_accuracy: 1.0,
        test_accuracy: 1.0,
    }
}

#[test]
fn derivative_matches_finite_difference_along_cav() -> Result<()> {
    let net = net(3);
    let wide = net.cast::<f64>();
    let x = inputs(1, net.input_dim(), 4);
    let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    for layer in [LayerId(1), LayerId(3)] {
        let cav = unit_cav(layer, net.layer_dim(layer), 9, "c");
        let a = wide.capture(&xd, 1, &[layer])?.remove(0);
        let h = 1e-4;
        let shifted = |s: f64| -> Result<f64> {
            let moved: Vec<f64> = a
                .iter()
                .zip(&cav.direction)
                .map(|(&ai, &vi)| ai + s * vi as f64)
                .collect();
            Ok(wide.continue_forward(&moved, 1, layer, Target::Logits)?[2])
        };
        let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        let d = directional_derivative(&net, &x, &cav, 2)?;
        assert!(
            (d - fd).abs() <= 1e-3 * fd.abs().max(1e-2),
            "{layer}: {d} vs {fd}"
        );
    }
    Ok(())
}

#[test]
fn batched_gradients_match_single_image() -> Result<()> {
    let net = net(5);
    let n = 7;
    let x = inputs(n, net.input_dim(), 6);
    let layers = [LayerId(0), LayerId(2), LayerId(4)];
    let g = ClassGradients::compute(&net, &x, n, 1, &layers, 3)?;
    for &layer in &layers {
        let cav = unit_cav(layer, net.layer_dim(layer), 2, "c");
        let batched = g.derivatives(&cav)?;
        for (i, &bd) in batched.iter().enumerate() {
            let xi = &x[i * net.input_dim()..(i + 1) * net.input_dim()];
            let single = directional_derivative(&net, xi, &cav, 1)?;
            assert!((bd - single).abs() <= 1e-5 * single.abs().max(1e-3));
        }
        let s = tcav_score(&net, &x, n, &cav, 1)?;
        assert_eq!(s, g.score(&cav)?);
    }
    assert!(g.layer(LayerId(1)).is_err());
    Ok(())
}

#[test]
fn score_is_scale_invariant_and_flips_with_sign() -> Result<()> {
    let net = net(8);
    let n = 40;
    let x = inputs(n, net.input_dim(), 9);
    let layer = LayerId(2);
    let g = ClassGradients::compute(&net, &x, n, 0, &[layer], 16)?;
    for seed in 0..5 {
        let cav = unit_cav(layer, net.layer_dim(layer), seed, "c");
        let mut scaled = cav.clone();
        scaled.direction.iter_mut().for_each(|v| *v *= 4.0);
        let mut neg = cav.clone();
        neg.direction.iter_mut().for_each(|v| *v = -*v);
        let s = g.score(&cav)?;
        assert_eq!(s, g.score(&scaled)?);
        let zeros = g.derivatives(&cav)?.iter().filter(|&&d| d == 0.0).count();
        if zeros == 0 {
            assert!((s + g.score(&neg)? - 1.0).abs() < 1e-12);
        }
    }
    Ok(())
}

#[test]
fn report_and_consistency_score() -> Result<()> {
    let net = net(10);
    let n = 30;
    let x = inputs(n, net.input_dim(), 11);
    let layers = [LayerId(1), LayerId(3)];
    let g = ClassGradients::compute(&net, &x, n, 2, &layers, 32)?;
    let mut reports = Vec::new();
    for &layer in &layers {
        let dim = net.layer_dim(layer);
        // The concept family is nearly one direction; the random family is spread out.
        let base = unit_cav(layer, dim, 100, "concept");
        let family = CavFamily {
            concept: "concept".into(),
            layer,
            cavs: (0..6).map(|_| base.clone()).collect(),
        };
        let random = CavFamily {
            concept: "random".into(),
            layer,
            cavs: (0..6)
                .map(|s| unit_cav(layer, dim, s, "random/0"))
                .collect(),
        };
        let r = tcav_report("k", &g, &family, &random, 0.01)?;
        assert_eq!(r.scores.len(), 6);
        assert!(r.std < 1e-12);
        assert_eq!(r.flag(), if r.significant { "black" } else { "red" });
        reports.push(r);
        let wrong = CavFamily {
            layer: LayerId(0),
            ..random.clone()
        };
        assert!(tcav_report("k", &g, &family, &wrong, 0.01).is_err());
    }
    let c = layer_consistency_score(&reports)?;
    let above = reports.iter().filter(|r| r.above_null()).count() as f64 / 2.0;
    assert_eq!(c.score, (2.0 * (above - 0.5)).abs());
    assert!(layer_consistency_score(&[]).is_err());
    Ok(())
}

#[test]
fn eligible_layers_exclude_linear_tails() {
    let mut config = ModelConfig::preset(Preset::Simple, 10, 64);
    let all = config.layers();
    assert_eq!(eligible_layers(&config, &[]), all[..5].to_vec());
    assert_eq!(
        eligible_layers(&config, &[LayerId(1)]),
        vec![LayerId(0), LayerId(2), LayerId(3), LayerId(4)]
    );
    config.hidden_units = Some(16);
    assert_eq!(eligible_layers(&config, &[]), all);
    config.hidden_units = None;
    config.activations = vec![Activation::Relu; 6];
    config.activations[5] = Activation::Identity;
    config.activations[4] = Activation::Identity;
    assert_eq!(eligible_layers(&config, &[]), all[..3].to_vec());
}

#[test]
fn null_p_values_are_calibrated() -> Result<()> {
    // Two samples of one distribution: p < 0.05 about 5% of the time.
    let mut rng = cavlab::rng::stream(1, "calibration", 0);
    let trials = 2000;
    let mut hits = 0;
    for _ in 0..trials {
        let a: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
        if significance(&a, &b)?.p_value < 0.05 {
            hits += 1;
        }
    }
    let rate = hits as f64 / trials as f64;
    assert!((0.03..=0.07).contains(&rate), "{rate}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn significance_is_symmetric(
        a in proptest::collection::vec(0.0f64..1.0, 2..12),
        b in proptest::collection::vec(0.0f64..1.0, 2..12),
    ) {
        let ab = significance(&a, &b).unwrap();
        let ba = significance(&b, &a).unwrap();
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
        prop_assert!((ab.null_mean - cavlab::stats::mean(&b)).abs() < 1e-12);
    }
}
