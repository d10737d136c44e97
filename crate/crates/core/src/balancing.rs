//! Entropy balancing for the ATT and its mixed extension.
//!
//! Control weights `q_i ∝ exp(lambda' f(X_i))` are found by minimizing the
//! convex dual `log sum_i exp(lambda' (f(X_i) - target))`, whose gradient is
//! the weighted imbalance. Weights are reported on the odds scale (summing to
//! `N_t`) so that the mixing adjustment `(w* - delta r) / (1 - delta)` is
//! commensurate with propensity odds.

use nalgebra::{DMatrix, DVector};

use crate::dataset::ObservedSample;
use crate::error::{check_delta, Error, Result};
use crate::estimators::{hajek_contrast, Estimand, EstimateReport, Provenance, WeightSet};
use crate::propensity::{marginal_odds, unmix_odds};
use crate::resample::bag_weights;

#[derive(Debug, Clone, Copy)]
pub struct BalanceOptions {
    /// 1 balances means; 2 also balances squares.
    pub moments: usize,
    pub max_iter: usize,
    /// Convergence threshold on the standardized imbalance.
    pub tol: f64,
}

impl Default for BalanceOptions {
    fn default() -> Self {
        Self {
            moments: 1,
            max_iter: 200,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BalanceSolution {
    /// Dual variables for the standardized balance features.
    pub lambda: Vec<f64>,
    /// Control weights (sample order), summing to the treated count.
    pub control_weights_odds_scale: Vec<f64>,
    pub max_imbalance: f64,
    /// Imbalance divided by the control standard deviation of each feature.
    pub max_std_imbalance: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Dual objective after each accepted step.
    pub objective_trace: Vec<f64>,
}

fn features(row: &[f64], moments: usize) -> Vec<f64> {
    let mut f = row.to_vec();
    if moments >= 2 {
        f.extend(row.iter().map(|x| x * x));
    }
    f
}

fn feature_names(names: &[String], moments: usize) -> Vec<String> {
    let mut v = names.to_vec();
    if moments >= 2 {
        v.extend(names.iter().map(|n| format!("{n}^2")));
    }
    v
}

/// Entropy-balancing weights (summing to one) on `rows` whose weighted
/// feature means hit `target`.
pub fn entropy_balance(
    rows: &[Vec<f64>],
    target: &[f64],
    names: &[String],
    options: BalanceOptions,
) -> Result<(Vec<f64>, BalanceSolution)> {
    let n = rows.len();
    let k = target.len();
    if n == 0 {
        return Err(Error::NoControlUnits);
    }
    // standardize by the control SD so tolerances are scale free
    let mut scale = vec![1.0; k];
    for j in 0..k {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        if var > 0.0 {
            scale[j] = var.sqrt();
        }
    }
    let f: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| (0..k).map(|j| (r[j] - target[j]) / scale[j]).collect())
        .collect();

    // dual objective, softmax weights and gradient (the weighted imbalance)
    let eval = |lambda: &DVector<f64>| -> (f64, Vec<f64>, DVector<f64>) {
        let s: Vec<f64> = f
            .iter()
            .map(|fi| fi.iter().zip(lambda.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
        let q: Vec<f64> = s.iter().map(|v| (v - m).exp() / z).collect();
        let mut grad = DVector::zeros(k);
        for (fi, qi) in f.iter().zip(&q) {
            for j in 0..k {
                grad[j] += qi * fi[j];
            }
        }
        (m + z.ln(), q, grad)
    };

    let mut lambda = DVector::zeros(k);
    let (mut obj, mut q, mut grad) = eval(&lambda);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..=options.max_iter {
        iterations = iter;
        if grad.amax() <= options.tol {
            converged = true;
            break;
        }
        if iter == options.max_iter || lambda.norm() > 1e8 {
            break;
        }
        let mut hess = DMatrix::zeros(k, k);
        for (fi, qi) in f.iter().zip(&q) {
            for a in 0..k {
                for b in 0..=a {
                    hess[(a, b)] += qi * fi[a] * fi[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        hess -= &grad * grad.transpose();
        let step = match hess.clone().cholesky() {
            Some(ch) => -ch.solve(&grad),
            None => -&grad,
        };
        // near the optimum the objective is flat to rounding, so a step that
        // keeps it level and shrinks the imbalance is also accepted
        let flat = 1e-14 * obj.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &lambda + t * &step;
            let (cand_obj, cand_q, cand_grad) = eval(&cand);
            let armijo = cand_obj <= obj + 1e-4 * t * grad.dot(&step);
            let level = cand_obj <= obj + flat && cand_grad.amax() < grad.amax();
            if cand_obj.is_finite() && (armijo || level) {
                lambda = cand;
                obj = cand_obj;
                q = cand_q;
                grad = cand_grad;
                trace.push(obj);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let std_imb: Vec<f64> = grad.iter().map(|g: &f64| g.abs()).collect();
    let raw_imb: Vec<f64> = std_imb.iter().zip(&scale).map(|(g, s)| g * s).collect();
    let (worst, &worst_std) = std_imb
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap_or((0, &0.0));
    if !converged {
        return Err(Error::BalanceInfeasible {
            covariate: names.get(worst).cloned().unwrap_or_else(|| format!("#{worst}")),
            imbalance: raw_imb.get(worst).copied().unwrap_or(worst_std),
        });
    }
    let solution = BalanceSolution {
        lambda: lambda.iter().copied().collect(),
        control_weights_odds_scale: Vec::new(),
        max_imbalance: raw_imb.iter().cloned().fold(0.0, f64::max),
        max_std_imbalance: worst_std,
        converged,
        iterations,
        objective_trace: trace,
    };
    Ok((q, solution))
}

/// Entropy-balancing weights of the original controls towards the treated
/// covariate means.
pub fn eb_weights(sample: &ObservedSample) -> Result<BalanceSolution> {
    eb_weights_with(sample, BalanceOptions::default())
}

pub fn eb_weights_with(sample: &ObservedSample, options: BalanceOptions) -> Result<BalanceSolution> {
    let treated: Vec<Vec<f64>> = sample
        .treated_indices()
        .into_iter()
        .map(|i| features(sample.row(i), options.moments))
        .collect();
    balance_towards(sample, &treated, options)
}

/// Balances the original controls towards the mean of `treated_rows`
/// (feature vectors).
pub fn balance_towards(sample: &ObservedSample, treated_rows: &[Vec<f64>], options: BalanceOptions) -> Result<BalanceSolution> {
    let k = treated_rows.first().map(|r| r.len()).unwrap_or(0);
    let mut target = vec![0.0; k];
    for r in treated_rows {
        target.iter_mut().zip(r).for_each(|(t, v)| *t += v);
    }
    let nt = treated_rows.len() as f64;
    target.iter_mut().for_each(|t| *t /= nt);
    let controls: Vec<Vec<f64>> = sample
        .control_indices()
        .into_iter()
        .map(|i| features(sample.row(i), options.moments))
        .collect();
    let names = feature_names(sample.column_names(), options.moments);
    let (q, mut sol) = entropy_balance(&controls, &target, &names, options)?;
    sol.control_weights_odds_scale = q.iter().map(|w| w * nt).collect();
    Ok(sol)
}

/// Entropy-balancing estimator of the ATT.
pub fn eb_att(sample: &ObservedSample) -> Result<EstimateReport> {
    let sol = eb_weights(sample)?;
    let weights = WeightSet::new(sol.control_weights_odds_scale, Provenance::Eb)?;
    Ok(EstimateReport {
        estimand: Estimand::Att,
        estimator: "EB".into(),
        delta: None,
        point: hajek_contrast(sample, &weights)?,
        robust_se: None,
        boot_se: None,
        diagnostics: weights.diagnostics(),
    })
}

/// Mixed entropy balancing: balance the original controls towards each mixed
/// replicate's treated arm, undo the mixing on the odds scale, average the
/// adjusted weights and plug them into the Hájek contrast.
///
/// Adjusted weights may be negative; they are kept and counted.
pub fn mixed_eb(sample: &ObservedSample, delta: f64, m: usize, seed: u64) -> Result<EstimateReport> {
    mixed_eb_with(sample, delta, m, seed, BalanceOptions::default())
}

pub fn mixed_eb_with(
    sample: &ObservedSample,
    delta: f64,
    m: usize,
    seed: u64,
    options: BalanceOptions,
) -> Result<EstimateReport> {
    let weights = mixed_eb_weights(sample, delta, m, seed, options)?;
    let failed = weights.1;
    let weights = WeightSet::new(weights.0, Provenance::MixedEb)?;
    let point = hajek_contrast(sample, &weights)?;
    let mut diagnostics = weights.diagnostics();
    diagnostics.failed_replicates = Some(failed);
    Ok(EstimateReport {
        estimand: Estimand::Att,
        estimator: "MEB".into(),
        delta: Some(delta),
        point,
        robust_se: None,
        boot_se: None,
        diagnostics,
    })
}

/// Averaged adjusted mixed-EB control weights and the failed replicate count.
pub fn mixed_eb_weights(
    sample: &ObservedSample,
    delta: f64,
    m: usize,
    seed: u64,
    options: BalanceOptions,
) -> Result<(Vec<f64>, usize)> {
    check_delta(delta)?;
    let pi = sample.pi_hat();
    let treated = sample.treated_indices();
    let bagged = bag_weights(sample, delta, m, seed, |rep| {
        let rows: Vec<Vec<f64>> = treated
            .iter()
            .map(|&i| features(rep.dataset.mixed_row(i), options.moments))
            .collect();
        let sol = balance_towards(sample, &rows, options)?;
        sol.control_weights_odds_scale
            .iter()
            .map(|&w| unmix_odds(w, delta, pi))
            .collect()
    })?;
    Ok((bagged.weights, bagged.failed))
}

/// Adjustment without the `1 - delta` divisor, `w* - delta r`.
pub fn shift_mixed_weight(w_star: f64, delta: f64, pi: f64) -> f64 {
    w_star - delta * marginal_odds(pi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propensity::{logistic, simple_mixed_odds};
    use crate::resample::mix_once;
    use crate::rng::{stream, TAG_MIXING};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sample(seed: u64, n: usize, slope: f64) -> ObservedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut y, mut z, mut x) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let x1: f64 = StandardNormal.sample(&mut rng);
            let x2: f64 = StandardNormal.sample(&mut rng);
            let zi = if i < 2 { i as u8 } else { (rng.gen::<f64>() < logistic(slope * (x1 - x2))) as u8 };
            let eps: f64 = StandardNormal.sample(&mut rng);
            y.push(x1 + 2.0 * x2 + zi as f64 + eps);
            z.push(zi);
            x.extend([x1, x2]);
        }
        ObservedSample::new(y, z, x, vec!["x1".into(), "x2".into()]).unwrap()
    }

    #[test]
    fn already_balanced_gives_zero_lambda() {
        let s = ObservedSample::new(
            vec![0.0; 6],
            vec![1, 1, 0, 0, 0, 0],
            vec![1.0, 3.0, 0.0, 4.0, 1.0, 3.0],
            vec!["x".into()],
        )
        .unwrap();
        let sol = eb_weights(&s).unwrap();
        assert!(sol.lambda.iter().all(|l| l.abs() < 1e-14));
        for w in &sol.control_weights_odds_scale {
            assert!((w - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn binary_covariate_closed_form() {
        // treated mean 0.5, controls {0, 0, 1}: weight on the 1 equals the total on the 0s
        let s = ObservedSample::new(
            vec![0.0; 5],
            vec![1, 1, 0, 0, 0],
            vec![0.0, 1.0, 0.0, 0.0, 1.0],
            vec!["x".into()],
        )
        .unwrap();
        let sol = eb_weights(&s).unwrap();
        let w = &sol.control_weights_odds_scale;
        // closed form: q = (1/4, 1/4, 1/2), times N_t = 2
        assert!((w[0] - 0.5).abs() < 1e-10);
        assert!((w[1] - 0.5).abs() < 1e-10);
        assert!((w[2] - 1.0).abs() < 1e-10);
        assert!((w[2] - (w[0] + w[1])).abs() < 1e-10);
        // lambda on the standardized feature: exp(lambda / sd) = 2
        let sd = (2.0f64 / 9.0).sqrt();
        assert!((sol.lambda[0] - 2f64.ln() * sd).abs() < 1e-10);
    }

    #[test]
    fn balance_holds_and_dual_decreases() {
        let s = sample(1, 1000, 0.8);
        let sol = eb_weights(&s).unwrap();
        assert!(sol.max_std_imbalance <= 1e-8);
        assert!(sol.max_imbalance <= 1e-8);
        assert!(sol.control_weights_odds_scale.iter().all(|&w| w > 0.0));
        let total: f64 = sol.control_weights_odds_scale.iter().sum();
        assert!((total - s.n_treated() as f64).abs() < 1e-9);
        assert!(sol.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-13));
    }

    #[test]
    fn second_moments_balance() {
        let s = sample(2, 600, 0.5);
        let opts = BalanceOptions { moments: 2, ..Default::default() };
        let sol = eb_weights_with(&s, opts).unwrap();
        assert_eq!(sol.lambda.len(), 4);
        assert!(sol.max_std_imbalance <= 1e-8);
    }

    #[test]
    fn infeasible_target_is_reported() {
        let s = ObservedSample::new(
            vec![0.0; 4],
            vec![1, 1, 0, 0],
            vec![5.0, 6.0, 0.0, 1.0],
            vec!["age".into()],
        )
        .unwrap();
        match eb_weights(&s) {
            Err(Error::BalanceInfeasible { covariate, .. }) => assert_eq!(covariate, "age"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unmixing_model_odds_recovers_original() {
        let odds = [0.1, 2.0, 7.5, 30.0];
        for &o in &odds {
            let mixed = simple_mixed_odds(o, 0.35, 0.27).unwrap();
            assert!((unmix_odds(mixed, 0.35, 0.27).unwrap() - o).abs() < 1e-12 * o.max(1.0));
        }
    }

    #[test]
    fn divisor_does_not_change_estimate() {
        let s = sample(3, 300, 0.7);
        let (delta, pi) = (0.6, s.pi_hat());
        let mut rng = stream(5, TAG_MIXING, 0);
        let rep = mix_once(&s, delta, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = s.treated_indices().iter().map(|&i| rep.dataset.mixed_row(i).to_vec()).collect();
        let sol = balance_towards(&s, &rows, BalanceOptions::default()).unwrap();
        let divided: Vec<f64> = sol.control_weights_odds_scale.iter().map(|&w| unmix_odds(w, delta, pi).unwrap()).collect();
        let shifted: Vec<f64> = sol.control_weights_odds_scale.iter().map(|&w| shift_mixed_weight(w, delta, pi)).collect();
        let a = hajek_contrast(&s, &WeightSet::new(divided, Provenance::MixedEb).unwrap()).unwrap();
        let b = hajek_contrast(&s, &WeightSet::new(shifted, Provenance::MixedEb).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn adjusted_weights_balance_original_sample() {
        let s = sample(4, 20, 0.6);
        let (w, failed) = mixed_eb_weights(&s, 0.5, 500, 11, BalanceOptions::default()).unwrap();
        assert!(failed <= 50);
        let controls = s.control_indices();
        let treated = s.treated_indices();
        for j in 0..2 {
            let wm = controls.iter().zip(&w).map(|(&i, wi)| wi * s.row(i)[j]).sum::<f64>() / w.iter().sum::<f64>();
            let tm = treated.iter().map(|&i| s.row(i)[j]).sum::<f64>() / treated.len() as f64;
            assert!((wm - tm).abs() < 0.05, "covariate {j}: {wm} vs {tm}");
        }
    }

    #[test]
    fn mixed_eb_reports_negative_weights() {
        let s = sample(5, 400, 1.5);
        let rep = mixed_eb(&s, 0.7, 30, 3).unwrap();
        assert_eq!(rep.estimator, "MEB");
        assert_eq!(rep.delta, Some(0.7));
        let (w, _) = mixed_eb_weights(&s, 0.7, 30, 3, BalanceOptions::default()).unwrap();
        assert_eq!(rep.diagnostics.negative_weights, w.iter().filter(|&&v| v < 0.0).count());
        let total: f64 = w.iter().sum();
        assert!((total - s.n_treated() as f64).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn prop3_round_trip(w in 0.0f64..1e3, delta in 0.01f64..0.99, pi in 0.01f64..0.99) {
            let mixed = simple_mixed_odds(w, delta, pi).unwrap();
            let back = unmix_odds(mixed, delta, pi).unwrap();
            let scale = (w + marginal_odds(pi)).max(1.0) / (1.0 - delta);
            prop_assert!((back - w).abs() <= 1e-12 * scale);
        }
    }
}
