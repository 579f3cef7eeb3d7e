//! Paired comparisons over seeds.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Pairs where the first sample is lower.
    pub lower: usize,
    pub higher: usize,
    pub ties: usize,
    /// One-sided p-value for "the first sample tends to be lower".
    pub p_value: f64,
}

/// Exact one-sided sign test on paired samples `(a_i, b_i)` for the
/// alternative that `a` is lower. Ties are dropped.
pub fn sign_test_lower(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Argument("sign test needs equal, nonempty samples".into()));
    }
    let (mut lower, mut higher, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        if x < y {
            lower += 1;
        } else if x > y {
            higher += 1;
        } else {
            ties += 1;
        }
    }
    let n = (lower + higher) as u64;
    let p_value = if n == 0 {
        1.0
    } else {
        let dist = Binomial::new(0.5, n).expect("valid binomial");
        // P(X >= lower)
        if lower == 0 {
            1.0
        } else {
            dist.sf(lower as u64 - 1)
        }
    };
    Ok(SignTest {
        lower,
        higher,
        ties,
        p_value,
    })
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with `n − 1` denominator; 0 for fewer than two values.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Standard error of `mean(a) − mean(b)` with the variance pooled over both
/// samples: `sqrt(s_p² · (1/n_a + 1/n_b))`.
pub fn pooled_standard_error(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let dof = na + nb - 2.0;
    if dof <= 0.0 {
        return 0.0;
    }
    let sp2 = ((na - 1.0) * variance(a) + (nb - 1.0) * variance(b)) / dof;
    (sp2 * (1.0 / na + 1.0 / nb)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_small_cases() {
        let t = sign_test_lower(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((t.lower, t.higher), (3, 0));
        assert!((t.p_value - 0.125).abs() < 1e-12);
        let t = sign_test_lower(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((t.p_value - 0.75).abs() < 1e-12);
        let t = sign_test_lower(&[1.0], &[1.0]).unwrap();
        assert_eq!((t.ties, t.p_value), (1, 1.0));
    }

    #[test]
    fn pooled_error_of_equal_spread() {
        let a = [1.0, 2.0, 3.0];
        let b = [2.0, 3.0, 4.0];
        assert!((pooled_standard_error(&a, &b) - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
