//! The mixing resampler and the bagged mixed-IPW estimator built on it.
//!
//! A mixed replicate keeps every control row and every treatment label. Each
//! treated unit is flagged independently with probability `delta`; flagged
//! treated rows are replaced by control rows drawn with replacement, so the
//! mixed treated arm follows `(1 - delta) h1 + delta h0`.

use rand::Rng;
use rayon::prelude::*;

use crate::dataset::{AugmentedSample, ObservedSample};
use crate::error::{check_delta, Error, Result};
use crate::estimators::{hajek_contrast, Estimand, EstimateReport, Provenance, WeightSet};
use crate::propensity::{fit_logistic, fit_mixed_propensity, linear_index};
use crate::rng::{stream, TAG_MIXING};

/// Share of failed replicates tolerated by the resampling estimators.
pub const MAX_REPLICATE_FAILURE: f64 = 0.1;

/// One draw of the mixing resampler.
#[derive(Debug, Clone)]
pub struct MixedReplicate<'a> {
    pub dataset: AugmentedSample<'a>,
    /// Treated units whose own rows were kept.
    pub kept_treated_ids: Vec<usize>,
    /// Treated units whose rows were replaced.
    pub replaced_treated_ids: Vec<usize>,
    /// Control units injected at the replaced positions, in the same order.
    pub injected_control_draws: Vec<usize>,
}

/// Draws one mixed replicate.
pub fn mix_once<'a, R: Rng + ?Sized>(
    sample: &'a ObservedSample,
    delta: f64,
    rng: &mut R,
) -> Result<MixedReplicate<'a>> {
    check_delta(delta)?;
    let controls = sample.control_indices();
    let d = sample.dim();
    let mut outcomes = sample.outcomes().to_vec();
    let mut covariates = sample.covariates().to_vec();
    let mut kept = Vec::new();
    let mut replaced = Vec::new();
    let mut injected = Vec::new();
    for i in 0..sample.n() {
        if !sample.is_treated(i) {
            continue;
        }
        if rng.gen::<f64>() < delta {
            let c = controls[rng.gen_range(0..controls.len())];
            outcomes[i] = sample.outcomes()[c];
            covariates[i * d..(i + 1) * d].copy_from_slice(sample.row(c));
            replaced.push(i);
            injected.push(c);
        } else {
            kept.push(i);
        }
    }
    let dataset = AugmentedSample::new(sample, outcomes, sample.treatments().to_vec(), covariates)?;
    Ok(MixedReplicate {
        dataset,
        kept_treated_ids: kept,
        replaced_treated_ids: replaced,
        injected_control_draws: injected,
    })
}

/// Averaged per-control weights over `m` mixed replicates.
#[derive(Debug, Clone)]
pub struct BaggedWeights {
    pub weights: Vec<f64>,
    pub failed: usize,
    pub replicates: usize,
}

/// Runs `per_replicate` on `m` mixed replicates and averages the returned
/// control-weight vectors. Replicate `k` always uses the stream derived from
/// `(seed, k)`, so results do not depend on scheduling.
pub fn bag_weights<F>(sample: &ObservedSample, delta: f64, m: usize, seed: u64, per_replicate: F) -> Result<BaggedWeights>
where
    F: Fn(&MixedReplicate) -> Result<Vec<f64>> + Sync,
{
    check_delta(delta)?;
    if m == 0 {
        return Err(Error::InvalidArgument("number of mixing replicates must be >= 1".into()));
    }
    let n_control = sample.n_control();
    let results: Vec<Option<Vec<f64>>> = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, TAG_MIXING, k as u64);
            let rep = mix_once(sample, delta, &mut rng).ok()?;
            per_replicate(&rep).ok().filter(|w| w.len() == n_control && w.iter().all(|v| v.is_finite()))
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_none()).count();
    if failed as f64 > MAX_REPLICATE_FAILURE * m as f64 || failed == m {
        return Err(Error::ReplicateFailures { failed, total: m });
    }
    if failed > 0 {
        log::warn!("mixing: {failed} of {m} replicates failed and were dropped");
    }
    let mut weights = vec![0.0; n_control];
    for w in results.iter().flatten() {
        weights.iter_mut().zip(w).for_each(|(a, b)| *a += b);
    }
    let ok = (m - failed) as f64;
    weights.iter_mut().for_each(|w| *w /= ok);
    Ok(BaggedWeights {
        weights,
        failed,
        replicates: m,
    })
}

/// Bagged mixed IPW estimator of the ATT.
///
/// Each replicate fits the synthetic propensity model by maximum likelihood
/// on the mixed rows; the adjusted weight of control `i` is
/// `odds*(X_i) - delta pi/(1-pi) = (1 - delta) exp(X_i' beta)`. Weights are
/// averaged over replicates and plugged into the Hájek contrast.
pub fn mipw_m(sample: &ObservedSample, delta: f64, m: usize, seed: u64) -> Result<EstimateReport> {
    check_delta(delta)?;
    let pi = sample.pi_hat();
    let start = fit_logistic(sample).ok().map(|f| f.beta);
    let controls = sample.control_indices();
    let d = sample.dim();
    let bagged = bag_weights(sample, delta, m, seed, |rep| {
        let fit = fit_mixed_propensity(
            &rep.dataset.mixed_covariates,
            d,
            &rep.dataset.mixed_treatments,
            delta,
            pi,
            start.clone(),
        )?;
        Ok(controls
            .iter()
            .map(|&i| (1.0 - delta) * linear_index(&fit.beta, rep.dataset.mixed_row(i)).exp())
            .collect())
    })?;
    let weights = WeightSet::new(bagged.weights, Provenance::Averaged)?;
    let point = hajek_contrast(sample, &weights)?;
    let mut diagnostics = weights.diagnostics();
    diagnostics.failed_replicates = Some(bagged.failed);
    Ok(EstimateReport {
        estimand: Estimand::Att,
        estimator: "MIPW.M".into(),
        delta: Some(delta),
        point,
        robust_se: None,
        boot_se: None,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::mipw_att;
    use crate::propensity::logistic;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sample(seed: u64, n: usize, n_treated_min: bool) -> ObservedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut y, mut z, mut x) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let x1: f64 = StandardNormal.sample(&mut rng);
            let zi = if n_treated_min { (i % 2) as u8 } else { (rng.gen::<f64>() < logistic(0.5 * x1)) as u8 };
            let eps: f64 = StandardNormal.sample(&mut rng);
            y.push(x1 + zi as f64 + eps);
            z.push(zi);
            x.push(x1);
        }
        ObservedSample::new(y, z, x, vec!["x".into()]).unwrap()
    }

    #[test]
    fn replicate_structure() {
        let s = sample(1, 300, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rep = mix_once(&s, 0.4, &mut rng).unwrap();
        assert_eq!(rep.kept_treated_ids.len() + rep.replaced_treated_ids.len(), s.n_treated());
        assert_eq!(rep.dataset.mixed_treatments, s.treatments());
        for (&pos, &c) in rep.replaced_treated_ids.iter().zip(&rep.injected_control_draws) {
            assert!(!s.is_treated(c));
            assert_eq!(rep.dataset.mixed_row(pos), s.row(c));
            assert_eq!(rep.dataset.mixed_outcomes[pos], s.outcomes()[c]);
        }
        for &i in &rep.kept_treated_ids {
            assert_eq!(rep.dataset.mixed_row(i), s.row(i));
        }
        for i in s.control_indices() {
            assert_eq!(rep.dataset.mixed_row(i), s.row(i));
        }
    }

    #[test]
    fn kept_count_is_binomial() {
        // 1000 treated, delta = 0.3: kept ~ Binomial(1000, 0.7)
        let s = sample(3, 2000, true);
        assert_eq!(s.n_treated(), 1000);
        let reps = 200;
        let mean = (0..reps)
            .map(|k| {
                let mut rng = stream(17, TAG_MIXING, k);
                mix_once(&s, 0.3, &mut rng).unwrap().kept_treated_ids.len() as f64
            })
            .sum::<f64>()
            / reps as f64;
        let band = 4.0 * (1000.0f64 * 0.21).sqrt();
        assert!((mean - 700.0).abs() < band, "mean kept {mean}");
    }

    #[test]
    fn mipw_m_is_deterministic() {
        let s = sample(4, 400, false);
        let a = mipw_m(&s, 0.5, 20, 99).unwrap();
        let b = mipw_m(&s, 0.5, 20, 99).unwrap();
        assert_eq!(a, b);
        assert!(a.diagnostics.negative_weights == 0);
        let (mipw, _) = mipw_att(&s, 0.5).unwrap();
        // same target, different beta estimation channel
        assert!((a.point - mipw.point).abs() < 0.3);
    }

    #[test]
    fn identical_replicates_average_to_one_replicate() {
        let s = sample(5, 100, false);
        let fixed: Vec<f64> = (0..s.n_control()).map(|i| 1.0 + i as f64).collect();
        let one = bag_weights(&s, 0.5, 1, 1, |_| Ok(fixed.clone())).unwrap();
        let many = bag_weights(&s, 0.5, 30, 1, |_| Ok(fixed.clone())).unwrap();
        assert_eq!(one.weights, fixed);
        for (a, b) in many.weights.iter().zip(&fixed) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn too_many_failures_is_an_error() {
        let s = sample(6, 100, false);
        let res = bag_weights(&s, 0.5, 10, 1, |rep| {
            if rep.replaced_treated_ids.len() % 2 == 0 {
                Err(Error::NoControlUnits)
            } else {
                Ok(vec![1.0; s.n_control()])
            }
        });
        assert!(matches!(res, Err(Error::ReplicateFailures { .. })));
    }
}
