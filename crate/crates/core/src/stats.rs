//! Small statistics helpers: moments, Welch's t-test and friends.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Two-sided Welch test result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of
/// freedom; `p = I_{df/(df+t^2)}(df/2, 1/2)`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(
            "Welch's test needs at least 2 samples per group".into(),
        ));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (variance(a) / a.len() as f64, variance(b) / b.len() as f64);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            WelchTest {
                t: 0.0,
                df: f64::INFINITY,
                p_value: 1.0,
            }
        } else {
            WelchTest {
                t: (ma - mb).signum() * f64::INFINITY,
                df: f64::INFINITY,
                p_value: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    let x = df / (df + t * t);
    let p_value = if x >= 1.0 {
        1.0
    } else {
        beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
    };
    Ok(WelchTest { t, df, p_value })
}

/// Fraction of pairs `(x, y)` with `x > y`, ties counting one half.
pub fn pairwise_win_fraction(xs: &[f64], ys: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &x in xs {
        for &y in ys {
            if x > y {
                wins += 1.0;
            } else if x == y {
                wins += 0.5;
            }
        }
    }
    wins / (xs.len() * ys.len()) as f64
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

pub fn norm(a: &[f32]) -> f64 {
    a.iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welch_matches_reference_values() {
        // Reference values from an independent statistics package.
        let a = [0.62, 0.71, 0.55, 0.68, 0.74, 0.59, 0.66];
        let b = [0.51, 0.48, 0.57, 0.45, 0.53, 0.5, 0.49, 0.55];
        let w = welch_t_test(&a, &b).unwrap();
        assert!((w.t - 4.839383241330683).abs() < 1e-10);
        assert!((w.df - 9.33628248527598).abs() < 1e-10);
        assert!((w.p_value - 0.0008301075048726112).abs() < 1e-10);

        let a = [0.5, 0.52, 0.49, 0.51];
        let b = [0.5, 0.47, 0.53, 0.55, 0.46];
        let w = welch_t_test(&a, &b).unwrap();
        assert!((w.p_value - 0.8762501523886215).abs() < 1e-10);
    }

    #[test]
    fn incomplete_beta_reference_values() {
        for (x, a, b, want) in [
            (0.3, 2.5, 0.5, 0.018927124071945658),
            (0.9, 10.0, 0.5, 0.15164090963470994),
            (0.01, 1.5, 0.5, 0.0004256932865778925),
            (0.5, 50.0, 0.5, 9.90168898459413e-17),
        ] {
            assert!((beta_reg(a, b, x) - want).abs() < 1e-10, "{x} {a} {b}");
        }
    }

    #[test]
    fn degenerate_samples() {
        let same = [0.5; 5];
        assert_eq!(welch_t_test(&same, &same).unwrap().p_value, 1.0);
        assert_eq!(welch_t_test(&[1.0; 3], &[0.0; 3]).unwrap().p_value, 0.0);
        assert!(welch_t_test(&[1.0], &[0.0, 1.0]).is_err());
        let jittered: Vec<f64> = (0..10)
            .map(|i| 0.9 + 0.01 * ((i as f64) - 4.5) / 3.0)
            .collect();
        let low: Vec<f64> = (0..10)
            .map(|i| 0.5 + 0.01 * ((i as f64 * 7.0) % 3.0 - 1.0))
            .collect();
        assert!(welch_t_test(&jittered, &low).unwrap().p_value < 1e-6);
    }

    #[test]
    fn win_fraction_counts_ties_as_half() {
        assert_eq!(pairwise_win_fraction(&[1.0, 2.0], &[1.0]), 0.75);
        assert_eq!(pairwise_win_fraction(&[0.0], &[1.0]), 0.0);
    }
}
