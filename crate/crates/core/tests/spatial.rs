use anyhow::Result;
use cavlab::cav::{Activations, Cav, CavFamily};
use cavlab::entanglement::ProbeActivations;
use cavlab::nn::LayerId;
use cavlab::spatial::{
    family_mean_grid, spatial_dependence_test, spatial_means, spatial_norms, Half, Reduction,
};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn cav(direction: Vec<f32>) -> Cav {
    Cav {
        concept: "c".into(),
        layer: LayerId(3),
        r: 0,
        direction,
        intercept: 0.0,
        train_accuracy: 1.0,
        test_accuracy: 1.0,
    }
}

fn gaussian(dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = cavlab::rng::stream(seed, "spatial-test", 0);
    let v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = cavlab::stats::norm(&v) as f32;
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn single_cell_and_uniform_grids() -> Result<()> {
    let shape = [3, 4, 5];
    let mut v = vec![0.0f32; 60];
    // Cell (1, 2) holds (3, 4, 0, 0, 0).
    let base = (4 + 2) * 5;
    v[base] = 3.0;
    v[base + 1] = 4.0;
    let g = spatial_norms(&cav(v), shape)?;
    for h in 0..3 {
        for w in 0..4 {
            assert_eq!(g.get(h, w), if (h, w) == (1, 2) { 5.0 } else { 0.0 });
        }
    }
    let ones = cav(vec![1.0; 60]);
    assert!(spatial_norms(&ones, shape)?
        .values
        .iter()
        .all(|&x| (x - 5f64.sqrt()).abs() < 1e-12));
    assert!(spatial_means(&ones, shape)?
        .values
        .iter()
        .all(|&x| (x - 1.0).abs() < 1e-12));
    assert!(spatial_norms(&ones, [3, 4, 4]).is_err());
    Ok(())
}

#[test]
fn mean_cancels_where_norm_does_not() -> Result<()> {
    let c = cav(vec![1.0, -1.0]);
    assert_eq!(spatial_means(&c, [1, 1, 2])?.values, vec![0.0]);
    assert!((spatial_norms(&c, [1, 1, 2])?.values[0] - 2f64.sqrt()).abs() < 1e-12);
    Ok(())
}

#[test]
fn family_grid_and_mass_fraction() -> Result<()> {
    let shape = [2, 4, 3];
    let one = cav(gaussian(24, 5));
    let fam = CavFamily {
        concept: "c".into(),
        layer: LayerId(3),
        cavs: vec![one.clone()],
    };
    assert_eq!(
        family_mean_grid(&fam, shape, Reduction::Norm)?.values,
        spatial_norms(&one, shape)?.values
    );
    let empty = CavFamily {
        cavs: vec![],
        ..fam.clone()
    };
    assert!(family_mean_grid(&empty, shape, Reduction::Norm).is_err());

    // Mass only in the two left columns.
    let mut v = vec![0.0f32; 24];
    for h in 0..2 {
        for w in 0..2 {
            v[(h * 4 + w) * 3] = 1.0;
        }
    }
    let g = spatial_norms(&cav(v), shape)?;
    assert_eq!(g.mass_fraction(Half::Left), 1.0);
    assert_eq!(g.mass_fraction(Half::Right), 0.0);
    assert_eq!(g.mass_fraction(Half::Top), 0.5);

    // Odd width: the middle column counts for neither side.
    let mut v = vec![0.0f32; 5];
    v[0] = 1.0;
    v[2] = 100.0;
    v[4] = 3.0;
    let g = spatial_norms(&cav(v), [1, 5, 1])?;
    assert!((g.mass_fraction(Half::Left) - 0.25).abs() < 1e-12);
    assert!((g.mass_fraction(Half::Right) - 0.75).abs() < 1e-12);
    Ok(())
}

#[test]
fn dependence_test_on_identical_sets_is_half() -> Result<()> {
    let dim = 12;
    let mut rng = cavlab::rng::stream(3, "acts", 0);
    let acts = Activations::new(
        dim,
        (0..dim * 40).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )?;
    let p = |label: &str| ProbeActivations {
        label: label.into(),
        layer: LayerId(3),
        acts: acts.clone(),
    };
    let c = cav(gaussian(dim, 4));
    let t = spatial_dependence_test(&c, &p("left"), &p("right"), 0.95)?;
    assert!((t.fraction - 0.5).abs() < 1e-12);
    assert!(!t.dependent);

    // Shifting one copy along the CAV separates them completely.
    let shifted: Vec<f32> = acts
        .data
        .chunks(dim)
        .flat_map(|row| {
            row.iter()
                .zip(&c.direction)
                .map(|(a, v)| a + 10.0 * v)
                .collect::<Vec<_>>()
        })
        .collect();
    let moved = ProbeActivations {
        label: "left".into(),
        layer: LayerId(3),
        acts: Activations::new(dim, shifted)?,
    };
    let t = spatial_dependence_test(&c, &moved, &p("right"), 0.95)?;
    assert_eq!(t.fraction, 1.0);
    assert!(t.dependent);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn norm_decomposition_and_linearity(seed in 0u64..10_000, h in 1usize..6, w in 1usize..6, d in 1usize..9) {
        let c = cav(gaussian(h * w * d, seed));
        let g = spatial_norms(&c, [h, w, d]).unwrap();
        prop_assert!(g.values.iter().all(|&x| x >= 0.0));
        let vn = cavlab::stats::norm(&c.direction);
        prop_assert!((g.sum_of_squares() - vn * vn).abs() < 1e-10);
        let mut neg = c.clone();
        neg.direction.iter_mut().for_each(|x| *x = -*x);
        let m = spatial_means(&c, [h, w, d]).unwrap();
        let mn = spatial_means(&neg, [h, w, d]).unwrap();
        for (a, b) in m.values.iter().zip(&mn.values) {
            prop_assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn dependence_fraction_is_scale_invariant(seed in 0u64..1000, scale in 0.01f32..100.0) {
        let dim = 6;
        let mut rng = cavlab::rng::stream(seed, "acts", 1);
        let mk = |rng: &mut cavlab::rng::StreamRng, label: &str| ProbeActivations {
            label: label.into(),
            layer: LayerId(3),
            acts: Activations::new(dim, (0..dim * 15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        };
        let (a, b) = (mk(&mut rng, "a"), mk(&mut rng, "b"));
        let c = cav(gaussian(dim, seed));
        let mut big = c.clone();
        big.direction.iter_mut().for_each(|x| *x *= scale);
        let f1 = spatial_dependence_test(&c, &a, &b, 0.95).unwrap().fraction;
        let f2 = spatial_dependence_test(&big, &a, &b, 0.95).unwrap().fraction;
        prop_assert_eq!(f1, f2);
    }
}
