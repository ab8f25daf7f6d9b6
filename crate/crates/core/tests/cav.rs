use anyhow::Result;
use cavlab::cav::{
    decode_cav, encode_cav, random_cavs, random_pairs, train_cav, train_family, train_random_cav,
    write_accuracy_csv, Activations, CavHyper, CavStore,
};
use cavlab::nn::LayerId;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn cluster(center: &[f32], rows: usize, spread: f32, seed: u64) -> Activations {
    let mut rng = cavlab::rng::stream(seed, "cluster", 0);
    let mut data = Vec::with_capacity(rows * center.len());
    for _ in 0..rows {
        for &c in center {
            let noise: f32 = rng.sample(StandardNormal);
            data.push(c + spread * noise);
        }
    }
    Activations::new(center.len(), data).unwrap()
}

fn angle_degrees(a: &[f32], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

#[test]
fn separable_clusters_recover_analytic_normal() -> Result<()> {
    // Two tight clusters: the max-margin normal is the difference of centres.
    let p = [2.0f32, 1.0, 0.5, -1.0, 0.0];
    let q = [-1.0f32, 0.5, 1.5, 1.0, 0.5];
    let pos = cluster(&p, 30, 0.01, 1);
    let neg = cluster(&q, 30, 0.01, 2);
    let cav = train_cav(&pos, &neg, &CavHyper::default(), "toy", LayerId(0), 0)?;
    assert_eq!(cav.test_accuracy, 1.0);
    assert_eq!(cav.train_accuracy, 1.0);
    let normal: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (a - b) as f64).collect();
    assert!(angle_degrees(&cav.direction, &normal) < 5.0);
    Ok(())
}

#[test]
fn swapping_sets_negates_direction() -> Result<()> {
    let pos = cluster(&[1.0, 0.0, 0.3, 0.2], 40, 0.8, 3);
    let neg = cluster(&[0.0, 1.0, 0.1, 0.2], 40, 0.8, 4);
    let h = CavHyper::default();
    let a = train_cav(&pos, &neg, &h, "a", LayerId(1), 0)?;
    let b = train_cav(&neg, &pos, &h, "b", LayerId(1), 0)?;
    let cos = cavlab::stats::cosine(&a.direction, &b.direction);
    assert!((cos + 1.0).abs() < 1e-6, "{cos}");
    assert!((a.intercept + b.intercept).abs() < 1e-6);
    Ok(())
}

#[test]
fn training_is_reproducible_to_the_byte() -> Result<()> {
    let pos = cluster(&[1.0, 0.0, 0.5], 30, 1.0, 5);
    let neg = cluster(&[0.0, 1.0, 0.5], 30, 1.0, 6);
    let h = CavHyper::default();
    let a = encode_cav(&train_cav(&pos, &neg, &h, "c", LayerId(2), 1)?)?;
    let b = encode_cav(&train_cav(&pos, &neg, &h, "c", LayerId(2), 1)?)?;
    assert_eq!(a, b);
    Ok(())
}

#[test]
fn rejects_bad_inputs() {
    let h = CavHyper::default();
    let a = cluster(&[1.0, 0.0], 5, 0.1, 1);
    let b = cluster(&[1.0, 0.0, 1.0], 5, 0.1, 1);
    assert!(train_cav(&a, &b, &h, "x", LayerId(0), 0).is_err());
    let empty = Activations::new(2, Vec::new()).unwrap();
    assert!(train_cav(&a, &empty, &h, "x", LayerId(0), 0).is_err());
    assert!(train_cav(&empty, &a, &h, "x", LayerId(0), 0).is_err());
    assert!(Activations::new(3, vec![0.0; 4]).is_err());
}

#[test]
fn minimal_family_and_random_cavs() -> Result<()> {
    let h = CavHyper::default();
    let pos = cluster(&[1.0, 0.0, 0.0], 30, 0.5, 7);
    let sets: Vec<Activations> = (0..6)
        .map(|r| cluster(&[0.3, 0.3, 0.3], 30, 0.5, 100 + r))
        .collect();
    let negatives: Vec<(usize, &Activations)> = sets.iter().enumerate().take(2).collect();
    let family = train_family("toy", LayerId(0), &pos, &negatives, &h)?;
    assert_eq!(family.cavs.len(), 2);
    assert_eq!(family.cavs[1].r, 1);
    assert!(train_family("toy", LayerId(0), &pos, &negatives[..1], &h).is_err());
    let dup = [negatives[0], negatives[0]];
    assert!(train_family("toy", LayerId(0), &pos, &dup, &h).is_err());

    let refs: Vec<&Activations> = sets.iter().collect();
    let random = random_cavs(LayerId(0), &refs, 6, &h)?;
    assert_eq!(random.cavs.len(), 6);
    assert!(random.cavs.iter().all(|c| c.is_random()));
    assert!(train_random_cav((2, &sets[2]), (2, &sets[2]), &h, LayerId(0)).is_err());
    assert!(random_cavs(LayerId(0), &refs[..1], 1, &h).is_err());
    Ok(())
}

#[test]
fn random_pairs_are_distinct() -> Result<()> {
    let pairs = random_pairs(6, 15)?;
    let mut seen: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    assert!(pairs.iter().all(|(a, b)| a != b));
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 15);
    assert!(random_pairs(6, 16).is_err());
    assert!(random_pairs(1, 1).is_err());
    Ok(())
}

#[test]
fn chance_level_random_cav_accuracy() -> Result<()> {
    // Two samples of one distribution: held-out accuracy should be near 1/2.
    let a = cluster(&[0.5; 40], 150, 1.0, 11);
    let b = cluster(&[0.5; 40], 150, 1.0, 12);
    let cav = train_random_cav((0, &a), (1, &b), &CavHyper::default(), LayerId(3))?;
    assert!(
        (0.35..=0.65).contains(&cav.test_accuracy),
        "{}",
        cav.test_accuracy
    );
    Ok(())
}

#[test]
fn store_round_trip_and_csv() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let store = CavStore::open(dir.path().join("cavs"))?;
    let pos = cluster(&[1.0, 0.0], 12, 0.3, 1);
    let neg = cluster(&[0.0, 1.0], 12, 0.3, 2);
    let cav = train_cav(
        &pos,
        &neg,
        &CavHyper::default(),
        "striped@left",
        LayerId(4),
        3,
    )?;
    let path = store.put(&cav)?;
    assert_eq!(store.get("striped@left", LayerId(4), 3)?, cav);
    assert!(store.get("striped@left", LayerId(4), 4).is_err());
    assert_eq!(store.all()?, vec![cav.clone()]);
    let bytes = std::fs::read(&path)?;
    assert!(decode_cav(&bytes[..bytes.len() - 1], &path).is_err());
    let csv = dir.path().join("acc.csv");
    write_accuracy_csv(&csv, &[cav])?;
    let text = std::fs::read_to_string(csv)?;
    assert!(text.starts_with("concept,layer,r,train_accuracy,test_accuracy"));
    assert!(text.contains("striped@left,layers.4,3"));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unit_norm_and_consistent_training_accuracy(
        seed in 0u64..1000,
        dim in 2usize..12,
        rows in 3usize..20,
        shift in 0.0f32..2.0,
    ) {
        let centre: Vec<f32> = (0..dim).map(|i| if i == 0 { shift } else { 0.0 }).collect();
        let pos = cluster(&centre, rows, 1.0, seed);
        let neg = cluster(&vec![0.0; dim], rows + 1, 1.0, seed + 5000);
        let hyper = CavHyper { iterations: 100, ..CavHyper::default() };
        let cav = train_cav(&pos, &neg, &hyper, "p", LayerId(0), 0).unwrap();
        let norm = cavlab::stats::norm(&cav.direction);
        prop_assert!((norm - 1.0).abs() <= 1e-6);
        // Recount the training split with the stored decision rule.
        let sp = ((rows as f64) * hyper.train_fraction).round() as usize;
        let sn = (((rows + 1) as f64) * hyper.train_fraction).round() as usize;
        let correct = (0..sp).filter(|&i| cav.decision(pos.row(i)) > 0.0).count()
            + (0..sn).filter(|&i| cav.decision(neg.row(i)) <= 0.0).count();
        let frac = correct as f64 / (sp + sn) as f64;
        prop_assert!((frac - cav.train_accuracy).abs() < 1e-12);
    }
}
