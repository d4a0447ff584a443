//! Masked RMSE / NSE and their reports. All sums run in f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Float;

/// Cells whose absolute error is below this are drawn as zero in error maps.
pub const ERROR_MAP_THRESHOLD: f32 = 0.01;

fn check_lengths<T>(pred: &[T], target: &[T], mask: &[bool]) -> Result<()> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "metric inputs differ in length: pred {}, target {}, mask {}",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    Ok(())
}

fn valid_pairs<'a, T: Float>(pred: &'a [T], target: &'a [T], mask: &'a [bool]) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, t), _)| (p.to_f64(), t.to_f64()))
}

fn sum_sq_err<T: Float>(pred: &[T], target: &[T], mask: &[bool]) -> (f64, usize) {
    valid_pairs(pred, target, mask).fold((0.0, 0), |(s, n), (p, t)| (s + (p - t) * (p - t), n + 1))
}

pub fn masked_rmse<T: Float>(pred: &[T], target: &[T], mask: &[bool]) -> Result<f64> {
    check_lengths(pred, target, mask)?;
    let (sse, n) = sum_sq_err(pred, target, mask);
    if n == 0 {
        return Err(Error::Metric("no valid cells".into()));
    }
    Ok((sse / n as f64).sqrt())
}

pub fn nse<T: Float>(pred: &[T], target: &[T], mask: &[bool]) -> Result<f64> {
    check_lengths(pred, target, mask)?;
    let (sse, n) = sum_sq_err(pred, target, mask);
    if n == 0 {
        return Err(Error::Metric("no valid cells".into()));
    }
    let mean = valid_pairs(pred, target, mask).map(|(_, t)| t).sum::<f64>() / n as f64;
    let var: f64 = valid_pairs(pred, target, mask).map(|(_, t)| (t - mean) * (t - mean)).sum();
    if var == 0.0 {
        return Err(Error::Metric("NSE undefined: valid targets are constant".into()));
    }
    Ok(1.0 - sse / var)
}

/// Gradient of the masked RMSE with respect to `pred`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient<T> {
    pub loss: f64,
    pub grad: Vec<T>,
    /// Set when the loss is exactly zero; the gradient is then all zeros.
    pub stationary: bool,
}

pub fn masked_rmse_loss_backward<T: Float>(pred: &[T], target: &[T], mask: &[bool]) -> Result<LossGradient<T>> {
    let loss = masked_rmse(pred, target, mask)?;
    let n = mask.iter().filter(|&&m| m).count() as f64;
    if loss == 0.0 {
        return Ok(LossGradient {
            loss,
            grad: vec![T::from_f64(0.0); pred.len()],
            stationary: true,
        });
    }
    let scale = 1.0 / (n * loss);
    let grad = pred
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((&p, &t), &m)| {
            if m {
                T::from_f64((p.to_f64() - t.to_f64()) * scale)
            } else {
                T::from_f64(0.0)
            }
        })
        .collect();
    Ok(LossGradient {
        loss,
        grad,
        stationary: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub nse: f64,
    pub n_valid: usize,
    pub max_abs_error: f64,
}

impl MetricReport {
    /// NSE is reported as NaN when the valid targets are constant.
    pub fn compute<T: Float>(pred: &[T], target: &[T], mask: &[bool]) -> Result<Self> {
        let rmse = masked_rmse(pred, target, mask)?;
        let nse = nse(pred, target, mask).unwrap_or(f64::NAN);
        let (n_valid, max_abs_error) = valid_pairs(pred, target, mask)
            .fold((0, 0.0f64), |(n, m), (p, t)| (n + 1, m.max((p - t).abs())));
        Ok(Self {
            rmse,
            nse,
            n_valid,
            max_abs_error,
        })
    }

    /// Pools the valid cells of several images into one report.
    pub fn pooled(images: &[(&[f32], &[f32], &[bool])]) -> Result<Self> {
        let mut pred = Vec::new();
        let mut target = Vec::new();
        for (p, t, m) in images {
            check_lengths(p, t, m)?;
            for ((&pv, &tv), _) in p.iter().zip(t.iter()).zip(m.iter()).filter(|(_, &m)| m) {
                pred.push(pv);
                target.push(tv);
            }
        }
        let mask = vec![true; pred.len()];
        Self::compute(&pred, &target, &mask)
    }

    pub fn row(&self, run_id: &str, split: &str, strategy: &str) -> MetricRow {
        MetricRow {
            run_id: run_id.to_string(),
            split: split.to_string(),
            strategy: strategy.to_string(),
            rmse_m: self.rmse,
            nse: self.nse,
            n_valid: self.n_valid,
            max_abs_error_m: self.max_abs_error,
        }
    }
}

/// One line of a metrics CSV. Column order is fixed by field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub split: String,
    pub strategy: String,
    pub rmse_m: f64,
    pub nse: f64,
    pub n_valid: usize,
    pub max_abs_error_m: f64,
}

pub fn write_csv<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Signed error (prediction minus truth, over-prediction positive); cells
/// below [`ERROR_MAP_THRESHOLD`] or outside the mask are zero.
pub fn signed_error_map(pred: &[f32], target: &[f32], mask: &[bool]) -> Result<Vec<f32>> {
    check_lengths(pred, target, mask)?;
    Ok(pred
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((&p, &t), &m)| {
            let e = p - t;
            if !m || e.abs() < ERROR_MAP_THRESHOLD {
                0.0
            } else {
                e
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rmse_examples() {
        let all = [true; 4];
        assert_eq!(masked_rmse(&[1.0f64, 2.0, 3.0], &[1.0, 2.0, 3.0], &all[..3]).unwrap(), 0.0);
        let r = masked_rmse(&[1.0f64, 2.0, 3.0, 4.0], &[1.0, 1.0, 3.0, 3.0], &all).unwrap();
        assert!((r - 0.5f64.sqrt()).abs() < 1e-15);
        let hide = [true, false, true, false];
        assert_eq!(masked_rmse(&[1.0f64, 2.0, 3.0, 4.0], &[1.0, 1.0, 3.0, 3.0], &hide).unwrap(), 0.0);
        assert!(masked_rmse(&[1.0f64], &[1.0], &[false]).is_err());
        assert!(masked_rmse(&[1.0f64], &[1.0, 2.0], &[true]).is_err());
    }

    #[test]
    fn nse_examples() {
        let t = [0.0f64, 2.0];
        let m = [true, true];
        assert_eq!(nse(&t, &t, &m).unwrap(), 1.0);
        assert_eq!(nse(&[1.0, 1.0], &t, &m).unwrap(), 0.0);
        // squared errors 9 + 9 over a target spread of 1 + 1
        assert_eq!(nse(&[3.0, -1.0], &t, &m).unwrap(), -8.0);
        assert_eq!(nse(&[3.0, 2.0], &t, &m).unwrap(), -3.5);
        let err = nse(&[1.0f64, 2.0], &[5.0, 5.0], &m).unwrap_err();
        assert!(err.to_string().contains("NSE undefined"));
    }

    #[test]
    fn backward_examples() {
        let g = masked_rmse_loss_backward(&[1.0f64, -1.0, 7.0], &[0.0, 0.0, 0.0], &[true, true, false]).unwrap();
        assert_eq!(g.loss, 1.0);
        assert_eq!(g.grad, vec![0.5, -0.5, 0.0]);
        let z = masked_rmse_loss_backward(&[2.0f64, 3.0], &[2.0, 3.0], &[true, true]).unwrap();
        assert!(z.stationary);
        assert_eq!(z.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn error_map_thresholds_and_signs() {
        let m = signed_error_map(&[1.5, 1.005, 0.0, 9.0], &[1.0, 1.0, 0.5, 0.0], &[true, true, true, false]).unwrap();
        assert_eq!(m, vec![0.5, 0.0, -0.5, 0.0]);
    }

    #[test]
    fn pooled_concatenates_valid_cells() {
        let a = MetricReport::pooled(&[
            (&[1.0, 9.0][..], &[0.0, 0.0][..], &[true, false][..]),
            (&[3.0][..], &[4.0][..], &[true][..]),
        ])
        .unwrap();
        let b = MetricReport::compute(&[1.0f32, 3.0], &[0.0, 4.0], &[true, true]).unwrap();
        assert_eq!(a, b);
        let flat = MetricReport::compute(&[1.0f32, 3.0], &[2.0, 2.0], &[true, true]).unwrap();
        assert!(flat.nse.is_nan());
        assert_eq!(flat.rmse, 1.0);
        assert_eq!(a.n_valid, 2);
        assert_eq!(a.max_abs_error, 1.0);
    }

    proptest! {
        #[test]
        fn masked_cells_never_matter(
            cells in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, any::<bool>()), 2..40),
            junk in -1e6f64..1e6,
        ) {
            let pred: Vec<f64> = cells.iter().map(|c| c.0).collect();
            let target: Vec<f64> = cells.iter().map(|c| c.1).collect();
            let mut mask: Vec<bool> = cells.iter().map(|c| c.2).collect();
            mask[0] = true;
            let base = masked_rmse(&pred, &target, &mask).unwrap();
            let mut p2 = pred.clone();
            p2.push(junk);
            let mut t2 = target.clone();
            t2.push(-junk);
            let mut m2 = mask.clone();
            m2.push(false);
            prop_assert_eq!(masked_rmse(&p2, &t2, &m2).unwrap(), base);
            // reversal is a permutation
            let rp: Vec<f64> = pred.iter().rev().copied().collect();
            let rt: Vec<f64> = target.iter().rev().copied().collect();
            let rm: Vec<bool> = mask.iter().rev().copied().collect();
            prop_assert!((masked_rmse(&rp, &rt, &rm).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn report_bounds(cells in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..40)) {
            let pred: Vec<f64> = cells.iter().map(|c| c.0).collect();
            let target: Vec<f64> = cells.iter().map(|c| c.1).collect();
            let mask = vec![true; pred.len()];
            if let Ok(r) = MetricReport::compute(&pred, &target, &mask) {
                prop_assert!(r.rmse >= 0.0);
                prop_assert!(r.nse <= 1.0);
                prop_assert!(r.max_abs_error >= r.rmse - 1e-12);
            }
        }
    }
}
