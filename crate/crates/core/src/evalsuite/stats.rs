//! Two-tailed equal-variance t-test, used for every comparative claim.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub mean_a: f64,
    pub mean_b: f64,
}

pub fn t_test_equal_variance(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Eval("t-test needs at least 2 samples per group".into()));
    }
    let n1 = a.len() as f64;
    let n2 = b.len() as f64;
    let m1 = a.iter().sum::<f64>() / n1;
    let m2 = b.iter().sum::<f64>() / n2;
    let s1 = a.iter().map(|v| (v - m1).powi(2)).sum::<f64>() / (n1 - 1.0);
    let s2 = b.iter().map(|v| (v - m2).powi(2)).sum::<f64>() / (n2 - 1.0);
    let df = n1 + n2 - 2.0;
    let sp2 = ((n1 - 1.0) * s1 + (n2 - 1.0) * s2) / df;
    let denom = (sp2 * (1.0 / n1 + 1.0 / n2)).sqrt();
    let t = if denom == 0.0 {
        if m1 == m2 {
            0.0
        } else {
            f64::INFINITY * (m1 - m2).signum()
        }
    } else {
        (m1 - m2) / denom
    };
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Eval(format!("t distribution: {e}")))?;
    let p_value = if t.is_infinite() {
        0.0
    } else {
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(TTestResult {
        t,
        df,
        p_value,
        mean_a: m1,
        mean_b: m2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clearly_separated_groups() {
        let a = [1.0, 1.1, 0.9, 1.05];
        let b = [3.0, 3.1, 2.9, 3.05];
        let r = t_test_equal_variance(&a, &b).unwrap();
        assert!(r.p_value < 1e-6, "p = {}", r.p_value);
        assert!(r.t < 0.0);
    }

    #[test]
    fn identical_groups_high_p() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [4.0, 3.0, 2.0, 1.0];
        let r = t_test_equal_variance(&a, &b).unwrap();
        assert!(r.p_value > 0.99);
    }

    #[test]
    fn textbook_symmetry() {
        let a = [5.0, 6.0, 7.0];
        let b = [7.0, 8.0, 9.0];
        let r1 = t_test_equal_variance(&a, &b).unwrap();
        let r2 = t_test_equal_variance(&b, &a).unwrap();
        assert!((r1.p_value - r2.p_value).abs() < 1e-12);
        assert!((r1.t + r2.t).abs() < 1e-12);
    }
}
