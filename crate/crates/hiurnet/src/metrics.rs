//! Regression metrics: RMSE, MAE, and sample Pearson correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub pcc: f64,
    pub n: usize,
    /// Set when either sequence had zero variance and `pcc` was reported as 0.
    pub degenerate_pcc: bool,
}

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Standard sample Pearson correlation. Zero variance in either argument is
/// reported as 0 with the degenerate flag rather than an error.
pub fn pcc(pred: &[f64], truth: &[f64]) -> Result<(f64, bool)> {
    check_lengths(pred, truth)?;
    if pred.len() < 2 {
        return Err(Error::EmptyInput);
    }
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = truth.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in pred.iter().zip(truth) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0), false))
}

pub fn report(pred: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    // A single pair has no defined correlation; report it as degenerate
    // rather than failing the whole evaluation.
    let (pcc_value, degenerate) = if pred.len() < 2 {
        (0.0, true)
    } else {
        pcc(pred, truth)?
    };
    Ok(MetricsReport {
        rmse: rmse(pred, truth)?,
        mae: mae(pred, truth)?,
        pcc: pcc_value,
        n: pred.len(),
        degenerate_pcc: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_cases() {
        assert_eq!(rmse(&[3.0, 1.0], &[1.0, 1.0]).unwrap(), 2.0f64.sqrt());
        assert_eq!(mae(&[3.0, 1.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(rmse(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn pcc_perfect_and_reversed() {
        let (p, d) = pcc(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((p - 1.0).abs() < 1e-12 && !d);
        let (p, _) = pcc(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((p + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pcc_hand_computed_point_eight() {
        let (p, _) = pcc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((p - 0.8).abs() < 1e-12, "pcc {p}");
    }

    #[test]
    fn pcc_zero_variance_flagged() {
        let (p, degenerate) = pcc(&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p, 0.0);
        assert!(degenerate);
    }

    #[test]
    fn length_mismatch_and_empty_rejected() {
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae(&[], &[]).is_err());
        assert!(pcc(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn rmse_scales_homogeneously(c in -5.0f64..5.0, v in proptest::collection::vec(-100.0f64..100.0, 2..20)) {
            let truth = vec![0.0; v.len()];
            let base = rmse(&v, &truth).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            let got = rmse(&scaled, &truth).unwrap();
            prop_assert!((got - c.abs() * base).abs() < 1e-9);
        }

        #[test]
        fn mae_never_exceeds_rmse(
            pred in proptest::collection::vec(-50.0f64..50.0, 1..30),
            offset in -10.0f64..10.0,
        ) {
            let truth: Vec<f64> = pred.iter().map(|x| x + offset * 0.5).collect();
            prop_assert!(mae(&pred, &truth).unwrap() <= rmse(&pred, &truth).unwrap() + 1e-12);
        }

        #[test]
        fn pcc_affine_invariance(
            v in proptest::collection::vec(-20.0f64..20.0, 3..20),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let y: Vec<f64> = v.iter().enumerate().map(|(i, x)| x * 0.5 + (i as f64).sin()).collect();
            let (base, d1) = pcc(&v, &y).unwrap();
            let transformed: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let (got, d2) = pcc(&transformed, &y).unwrap();
            prop_assert_eq!(d1, d2);
            if !d1 {
                prop_assert!((got - base).abs() < 1e-12);
            }
        }
    }
}
