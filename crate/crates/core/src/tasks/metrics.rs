//! Scoring transforms: NMSE and its category reward, macro-F1, and the
//! RMSE and RMSLE reward maps.

use std::collections::BTreeSet;

use super::TaskError;

/// `sum (p - y)^2 / sum (y - mean(y))^2`.
pub fn nmse(predictions: &[f64], targets: &[f64]) -> Result<f64, TaskError> {
    if predictions.len() != targets.len() {
        return Err(TaskError::DimensionMismatch { expected: targets.len(), got: predictions.len() });
    }
    if targets.len() < 2 {
        return Err(TaskError::DegenerateTargets);
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let denom: f64 = targets.iter().map(|y| (y - mean).powi(2)).sum();
    if !(denom > 0.0) {
        return Err(TaskError::DegenerateTargets);
    }
    let num: f64 = predictions.iter().zip(targets).map(|(p, y)| (p - y).powi(2)).sum();
    Ok(num / denom)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// `-log10(median + 1e-300)`.
pub fn sr_category_reward(case_nmses: &[f64]) -> Result<f64, TaskError> {
    if case_nmses.is_empty() {
        return Err(TaskError::Misconfigured("no cases to aggregate".into()));
    }
    if case_nmses.iter().any(|v| !(*v >= 0.0)) {
        return Err(TaskError::DomainError("case NMSE values must be non-negative".into()));
    }
    Ok(-(median(case_nmses) + 1e-300).log10())
}

/// Unweighted mean of per-class F1 over `classes`.
pub fn macro_f1<L: Ord>(predicted: &[L], actual: &[L], classes: &BTreeSet<L>) -> Result<f64, TaskError> {
    if classes.is_empty() {
        return Err(TaskError::Misconfigured("macro-F1 needs at least one class".into()));
    }
    if predicted.len() != actual.len() {
        return Err(TaskError::DimensionMismatch { expected: actual.len(), got: predicted.len() });
    }
    if actual.is_empty() {
        return Err(TaskError::Misconfigured("macro-F1 needs at least one sample".into()));
    }
    let mut total = 0.0;
    for class in classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (p, a) in predicted.iter().zip(actual) {
            match (p == class, a == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        // F1 = 2PR/(P+R) = 2tp / (2tp + fp + fn); zero when there is no overlap.
        if tp > 0 {
            total += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        }
    }
    Ok(total / classes.len() as f64)
}

/// `2 - log10(rmse + 1e-10)`.
pub fn rmse_reward(rmse: f64) -> Result<f64, TaskError> {
    if !(rmse >= 0.0) {
        return Err(TaskError::DomainError(format!("rmse must be non-negative, got {rmse}")));
    }
    Ok(2.0 - (rmse + 1e-10).log10())
}

/// `1 - RMSLE` for a single target column.
pub fn rmsle_reward(predictions: &[f64], actuals: &[f64]) -> Result<f64, TaskError> {
    if predictions.len() != actuals.len() {
        return Err(TaskError::DimensionMismatch { expected: actuals.len(), got: predictions.len() });
    }
    if actuals.is_empty() {
        return Err(TaskError::Misconfigured("RMSLE needs at least one sample".into()));
    }
    if let Some(bad) = predictions.iter().chain(actuals).find(|v| !(**v > -1.0)) {
        return Err(TaskError::DomainError(format!("RMSLE undefined for value {bad} <= -1")));
    }
    let mean: f64 = predictions.iter().zip(actuals).map(|(p, a)| (p.ln_1p() - a.ln_1p()).powi(2)).sum::<f64>()
        / actuals.len() as f64;
    Ok(1.0 - mean.sqrt())
}

/// Average of [`rmsle_reward`] over target columns.
pub fn rmsle_reward_multi(predictions: &[Vec<f64>], actuals: &[Vec<f64>]) -> Result<f64, TaskError> {
    if predictions.len() != actuals.len() {
        return Err(TaskError::DimensionMismatch { expected: actuals.len(), got: predictions.len() });
    }
    if actuals.is_empty() {
        return Err(TaskError::Misconfigured("RMSLE needs at least one target column".into()));
    }
    let mut sum = 0.0;
    for (p, a) in predictions.iter().zip(actuals) {
        sum += rmsle_reward(p, a)?;
    }
    Ok(sum / actuals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nmse_fixtures() {
        let y = [0.0, 1.0, 2.0];
        assert_eq!(nmse(&y, &y).unwrap(), 0.0);
        assert_eq!(nmse(&[1.0; 3], &y).unwrap(), 1.0);
        assert_eq!(nmse(&[0.0, 1.0, 1.0], &y).unwrap(), 0.5);
        assert_eq!(nmse(&[1.0, 1.0], &[3.0, 3.0]).unwrap_err(), TaskError::DegenerateTargets);
        assert!(nmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn category_reward() {
        assert!((sr_category_reward(&[1e-8]).unwrap() - 8.0).abs() < 1e-12);
        assert!((sr_category_reward(&[1e-2, 1e-4, 1e-6]).unwrap() - 4.0).abs() < 1e-12);
        assert!((sr_category_reward(&[2.98e-8]).unwrap() - 7.5258).abs() < 1e-4);
        assert_eq!(sr_category_reward(&[0.0]).unwrap(), 300.0);
        assert!((sr_category_reward(&[1e-2, 1e-4]).unwrap() + (0.505e-2f64).log10()).abs() < 1e-12);
        assert!(sr_category_reward(&[]).is_err());
    }

    #[test]
    fn macro_f1_fixtures() {
        let classes: BTreeSet<_> = ["a", "b"].into_iter().collect();
        assert_eq!(macro_f1(&["a", "b", "a"], &["a", "b", "a"], &classes).unwrap(), 1.0);
        // P_a = 1/2, R_a = 1 => F1_a = 2/3; class b never predicted => 0.
        let m = macro_f1(&["a"; 4], &["a", "a", "b", "b"], &classes).unwrap();
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
        assert!(macro_f1::<&str>(&["a"], &["a"], &BTreeSet::new()).is_err());
    }

    #[test]
    fn rmse_fixtures() {
        assert!((rmse_reward(1.747).unwrap() - 1.758).abs() < 5e-4);
        assert!((rmse_reward(1.0).unwrap() - 2.0).abs() < 1e-9);
        assert!((rmse_reward(0.0).unwrap() - 12.0).abs() < 1e-12);
        assert!(rmse_reward(-1.0).is_err());
    }

    #[test]
    fn rmsle_fixtures() {
        let a = [0.5, 3.0, 10.0];
        assert_eq!(rmsle_reward(&a, &a).unwrap(), 1.0);
        let r = rmsle_reward(&[std::f64::consts::E - 1.0], &[0.0]).unwrap();
        assert!(r.abs() < 1e-15);
        assert!(matches!(rmsle_reward(&[-1.0], &[0.0]), Err(TaskError::DomainError(_))));
        let multi = rmsle_reward_multi(&[a.to_vec(), vec![std::f64::consts::E - 1.0]], &[a.to_vec(), vec![0.0]]).unwrap();
        assert!((multi - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn nmse_affine_invariant(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..20),
            c in prop_oneof![-5.0f64..-0.2, 0.2f64..5.0],
            b in -5.0f64..5.0,
        ) {
            let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let Ok(base) = nmse(&p, &y) {
                let p2: Vec<f64> = p.iter().map(|v| c * v + b).collect();
                let y2: Vec<f64> = y.iter().map(|v| c * v + b).collect();
                let moved = nmse(&p2, &y2).unwrap();
                prop_assert!((base - moved).abs() <= 1e-9 * (1.0 + base));
            }
        }

        #[test]
        fn macro_f1_relabel_invariant(labels in prop::collection::vec((0u8..3, 0u8..3), 1..30)) {
            let classes: BTreeSet<u8> = [0, 1, 2].into_iter().collect();
            let (p, a): (Vec<u8>, Vec<u8>) = labels.into_iter().unzip();
            let perm = |v: &u8| (v + 1) % 3;
            let p2: Vec<u8> = p.iter().map(perm).collect();
            let a2: Vec<u8> = a.iter().map(perm).collect();
            let x = macro_f1(&p, &a, &classes).unwrap();
            let y = macro_f1(&p2, &a2, &classes).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}
