//! Weighting estimators of the ATT (IPW, mixed IPW) and the ATO (overlap
//! weights), all built on the normalized (Hájek) weighted-mean contrast.
//!
//! The M-estimation form of each estimator is exposed through
//! [`EstimatingSystem`], whose parameter vector is laid out as
//! `theta = (beta_0, ..., beta_d, pi, mu1, mu0)`.

use serde::Serialize;

use crate::dataset::{AugmentedSample, ObservedSample};
use crate::error::{check_delta, Error, Result};
use crate::propensity::{
    fit_logistic, intercept_start, linear_index, logistic, marginal_odds, maximize, unit_terms,
    MixedLikelihood, PropensityFit,
};

/// Control odds above this trigger an extreme-weight warning.
pub const EXTREME_ODDS: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Estimand {
    #[serde(rename = "ATT")]
    Att,
    #[serde(rename = "ATO")]
    Ato,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Model,
    MixedModel,
    Eb,
    MixedEb,
    Averaged,
}

/// Weights on the control units (in sample order) on the odds scale.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub control_weights: Vec<f64>,
    pub provenance: Provenance,
    pub negative_count: usize,
}

impl WeightSet {
    pub fn new(control_weights: Vec<f64>, provenance: Provenance) -> Result<Self> {
        let negative_count = control_weights.iter().filter(|&&w| w < 0.0).count();
        if negative_count > 0 && provenance != Provenance::MixedEb {
            return Err(Error::DegenerateWeights(format!(
                "{negative_count} negative weights with {provenance:?} provenance"
            )));
        }
        if control_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::DegenerateWeights("non-finite weight".into()));
        }
        Ok(Self {
            control_weights,
            provenance,
            negative_count,
        })
    }

    pub fn diagnostics(&self) -> Diagnostics {
        let sum: f64 = self.control_weights.iter().sum();
        let sum_sq: f64 = self.control_weights.iter().map(|w| w * w).sum();
        Diagnostics {
            negative_weights: self.negative_count,
            max_weight: self.control_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            ess: if sum_sq > 0.0 { sum * sum / sum_sq } else { 0.0 },
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub negative_weights: usize,
    pub max_weight: f64,
    /// Kish effective sample size of the control weights.
    pub ess: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_replicates: Option<usize>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub multiple_root_suspected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub estimand: Estimand,
    pub estimator: String,
    pub delta: Option<f64>,
    pub point: f64,
    pub robust_se: Option<f64>,
    pub boot_se: Option<f64>,
    pub diagnostics: Diagnostics,
}

/// Stacked M-estimation parameters `(beta, pi, mu1, mu0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaHat {
    pub beta: Vec<f64>,
    pub pi: f64,
    pub mu1: f64,
    pub mu0: f64,
}

impl ThetaHat {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.extend([self.pi, self.mu1, self.mu0]);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let p = v.len() - 3;
        Self {
            beta: v[..p].to_vec(),
            pi: v[p],
            mu1: v[p + 1],
            mu0: v[p + 2],
        }
    }

    /// `mu1 - mu0`.
    pub fn contrast(&self) -> f64 {
        self.mu1 - self.mu0
    }
}

/// Treated mean minus the weighted control mean with normalized weights.
pub fn hajek_contrast(sample: &ObservedSample, weights: &WeightSet) -> Result<f64> {
    let controls = sample.control_indices();
    if weights.control_weights.len() != controls.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} control units",
            weights.control_weights.len(),
            controls.len()
        )));
    }
    let y = sample.outcomes();
    let (mut sum_t, mut n_t) = (0.0, 0usize);
    for i in sample.treated_indices() {
        sum_t += y[i];
        n_t += 1;
    }
    if n_t == 0 {
        return Err(Error::NoTreatedUnits);
    }
    let wsum: f64 = weights.control_weights.iter().sum();
    if wsum == 0.0 || !wsum.is_finite() {
        return Err(Error::DegenerateWeights(format!("control weights sum to {wsum}")));
    }
    let wy: f64 = controls
        .iter()
        .zip(&weights.control_weights)
        .map(|(&i, w)| w * y[i])
        .sum();
    Ok(sum_t / n_t as f64 - wy / wsum)
}

fn treated_mean(sample: &ObservedSample) -> f64 {
    let y = sample.outcomes();
    let idx = sample.treated_indices();
    idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64
}

fn weighted_control_mean(sample: &ObservedSample, w: &[f64]) -> Result<f64> {
    let y = sample.outcomes();
    let idx = sample.control_indices();
    let s: f64 = w.iter().sum();
    if s == 0.0 || !s.is_finite() {
        return Err(Error::DegenerateWeights(format!("control weights sum to {s}")));
    }
    Ok(idx.iter().zip(w).map(|(&i, wi)| wi * y[i]).sum::<f64>() / s)
}

fn control_odds(sample: &ObservedSample, beta: &[f64]) -> Vec<f64> {
    sample
        .control_indices()
        .into_iter()
        .map(|i| linear_index(beta, sample.row(i)).exp())
        .collect()
}

fn warn_extreme(odds: &[f64]) {
    let max = odds.iter().cloned().fold(0.0, f64::max);
    if max > EXTREME_ODDS {
        log::warn!("extreme control weight: max odds {max:.3e} exceeds {EXTREME_ODDS:e}");
    }
}

fn require_converged(fit: &PropensityFit) -> Result<()> {
    if fit.converged {
        Ok(())
    } else {
        Err(Error::InvalidArgument("propensity fit did not converge".into()))
    }
}

/// IPW estimator of the ATT: controls weighted by `e/(1-e)`.
pub fn ipw_att(sample: &ObservedSample, fit: &PropensityFit) -> Result<EstimateReport> {
    require_converged(fit)?;
    let odds = control_odds(sample, &fit.beta);
    warn_extreme(&odds);
    let weights = WeightSet::new(odds, Provenance::Model)?;
    let point = hajek_contrast(sample, &weights)?;
    Ok(EstimateReport {
        estimand: Estimand::Att,
        estimator: "IPW".into(),
        delta: None,
        point,
        robust_se: None,
        boot_se: None,
        diagnostics: weights.diagnostics(),
    })
}

/// M-estimation parameters of the IPW estimator.
pub fn ipw_theta(sample: &ObservedSample, fit: &PropensityFit) -> Result<ThetaHat> {
    let odds = control_odds(sample, &fit.beta);
    Ok(ThetaHat {
        beta: fit.beta.clone(),
        pi: sample.pi_hat(),
        mu1: treated_mean(sample),
        mu0: weighted_control_mean(sample, &odds)?,
    })
}

/// Options for [`mipw_att_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MipwOptions {
    /// Re-solve the propensity block from perturbed starts and flag
    /// disagreement above 1e-6.
    pub check_multiple_roots: bool,
}

fn mipw_likelihood<'a>(sample: &'a ObservedSample, delta: f64, pi: f64) -> MixedLikelihood<'a> {
    let r = marginal_odds(pi);
    let z = sample.treatments();
    MixedLikelihood {
        x: sample.covariates(),
        d: sample.dim(),
        a: z.iter()
            .map(|&v| if v == 1 { 1.0 - delta } else { delta * r })
            .collect(),
        b: z.iter().map(|&v| 1.0 - v as f64).collect(),
        delta,
        r,
    }
}

/// Mixed IPW estimator of the ATT computed from the observed sample by
/// solving the observed-data estimating equations.
pub fn mipw_att(sample: &ObservedSample, delta: f64) -> Result<(EstimateReport, ThetaHat)> {
    mipw_att_with(sample, delta, MipwOptions::default())
}

pub fn mipw_att_with(
    sample: &ObservedSample,
    delta: f64,
    options: MipwOptions,
) -> Result<(EstimateReport, ThetaHat)> {
    check_delta(delta)?;
    let pi = sample.pi_hat();
    let model = mipw_likelihood(sample, delta, pi);
    // The block coincides with the logistic score at delta = 0.
    let start = match fit_logistic(sample) {
        Ok(fit) => fit.beta,
        Err(_) => intercept_start(sample.treatments(), sample.dim()),
    };
    let res = maximize(&model, start.clone());
    if !res.converged {
        return Err(Error::SolverFailure {
            what: format!("mixed propensity block (delta = {delta})"),
            iterations: res.iterations,
            residual: res.score_norm,
            trace: res.trace,
        });
    }
    let beta = res.beta;

    let mut multiple_root_suspected = false;
    if options.check_multiple_roots {
        for shift in [0.5, -0.5] {
            let alt_start: Vec<f64> = start.iter().map(|b| b + shift).collect();
            let alt = maximize(&model, alt_start);
            if alt.converged {
                let gap = alt
                    .beta
                    .iter()
                    .zip(&beta)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if gap > 1e-6 {
                    log::warn!("mixed propensity block: perturbed start reached a different root (gap {gap:.3e})");
                    multiple_root_suspected = true;
                }
            }
        }
    }

    let odds = control_odds(sample, &beta);
    warn_extreme(&odds);
    let theta = ThetaHat {
        beta,
        pi,
        mu1: treated_mean(sample),
        mu0: weighted_control_mean(sample, &odds)?,
    };

    let system = EstimatingSystem::Mipw { delta };
    let residual = system.residual(sample, &theta);
    let norm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-8 * sample.n() as f64 {
        return Err(Error::SolverFailure {
            what: "stacked mixed IPW system".into(),
            iterations: res.iterations,
            residual: norm,
            trace: Vec::new(),
        });
    }

    let weights = WeightSet::new(odds, Provenance::MixedModel)?;
    let mut diagnostics = weights.diagnostics();
    diagnostics.multiple_root_suspected = multiple_root_suspected;
    let report = EstimateReport {
        estimand: Estimand::Att,
        estimator: "MIPW".into(),
        delta: Some(delta),
        point: theta.contrast(),
        robust_se: None,
        boot_se: None,
        diagnostics,
    };
    Ok((report, theta))
}

/// Adjusted control weights `odds*(x) - delta r` built from fixed original
/// odds. They equal `(1 - delta) * odds`.
pub fn mixed_adjusted_weights(odds: &[f64], delta: f64, pi: f64) -> Result<Vec<f64>> {
    check_delta(delta)?;
    let r = marginal_odds(pi);
    odds.iter()
        .map(|&o| Ok(crate::propensity::simple_mixed_odds(o, delta, pi)? - delta * r))
        .collect()
}

/// Overlap-weighting estimator of the ATO: treated weighted by `1-e`,
/// controls by `e`.
pub fn ow_ato(sample: &ObservedSample, fit: &PropensityFit) -> Result<EstimateReport> {
    require_converged(fit)?;
    let theta = ow_theta(sample, fit)?;
    let e: Vec<f64> = sample
        .control_indices()
        .into_iter()
        .map(|i| fit.predict(sample.row(i)))
        .collect();
    let weights = WeightSet::new(e, Provenance::Model)?;
    Ok(EstimateReport {
        estimand: Estimand::Ato,
        estimator: "OW".into(),
        delta: None,
        point: theta.contrast(),
        robust_se: None,
        boot_se: None,
        diagnostics: weights.diagnostics(),
    })
}

pub fn ow_theta(sample: &ObservedSample, fit: &PropensityFit) -> Result<ThetaHat> {
    let y = sample.outcomes();
    let (mut n1, mut d1, mut n0, mut d0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..sample.n() {
        let e = fit.predict(sample.row(i));
        if sample.is_treated(i) {
            n1 += (1.0 - e) * y[i];
            d1 += 1.0 - e;
        } else {
            n0 += e * y[i];
            d0 += e;
        }
    }
    if d1 <= 0.0 || d0 <= 0.0 {
        return Err(Error::DegenerateWeights(format!(
            "overlap weight sums: treated {d1}, control {d0}"
        )));
    }
    Ok(ThetaHat {
        beta: fit.beta.clone(),
        pi: sample.pi_hat(),
        mu1: n1 / d1,
        mu0: n0 / d0,
    })
}

/// Stacked estimating equations of the weighting estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatingSystem {
    /// Logistic score, `Z - pi`, `Z (Y - mu1)`, `odds (1-Z)(Y - mu0)`.
    Ipw,
    /// Observed-data mixed IPW equations for mixing proportion `delta`.
    Mipw { delta: f64 },
    /// Logistic score, `Z - pi`, `(1-e) Z (Y - mu1)`, `e (1-Z)(Y - mu0)`.
    Ow,
}

impl EstimatingSystem {
    pub fn name(&self) -> String {
        match self {
            EstimatingSystem::Ipw => "ipw".into(),
            EstimatingSystem::Mipw { delta } => format!("mipw({delta})"),
            EstimatingSystem::Ow => "ow".into(),
        }
    }

    /// Writes `psi(theta; y, z, x)` for one unit into `out` (length `d + 4`).
    pub fn unit_psi(&self, theta: &[f64], y: f64, z: u8, x: &[f64], out: &mut [f64]) {
        let p = x.len() + 1;
        let beta = &theta[..p];
        let (pi, mu1, mu0) = (theta[p], theta[p + 1], theta[p + 2]);
        let u = linear_index(beta, x);
        let zf = z as f64;
        let score_mult = match *self {
            EstimatingSystem::Ipw | EstimatingSystem::Ow => zf - logistic(u),
            EstimatingSystem::Mipw { delta } => {
                let r = marginal_odds(pi);
                let ut = unit_terms(u, delta, r);
                let (a, b) = if z == 1 { (1.0 - delta, 0.0) } else { (delta * r, 1.0) };
                ut.t * (a * (1.0 - ut.e_star) - b * ut.e_star)
            }
        };
        out[0] = score_mult;
        for j in 1..p {
            out[j] = score_mult * x[j - 1];
        }
        out[p] = zf - pi;
        match *self {
            EstimatingSystem::Ipw | EstimatingSystem::Mipw { .. } => {
                out[p + 1] = zf * (y - mu1);
                out[p + 2] = u.exp() * (1.0 - zf) * (y - mu0);
            }
            EstimatingSystem::Ow => {
                let e = logistic(u);
                out[p + 1] = (1.0 - e) * zf * (y - mu1);
                out[p + 2] = e * (1.0 - zf) * (y - mu0);
            }
        }
    }

    /// `sum_i psi(theta; Y_i, Z_i, X_i)`.
    pub fn residual(&self, sample: &ObservedSample, theta: &ThetaHat) -> Vec<f64> {
        let t = theta.to_vec();
        let mut total = vec![0.0; t.len()];
        let mut buf = vec![0.0; t.len()];
        for i in 0..sample.n() {
            self.unit_psi(&t, sample.outcomes()[i], sample.treatments()[i], sample.row(i), &mut buf);
            total.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
        }
        total
    }
}

/// Stacked estimating equations on an augmented sample (original units paired
/// with mixed draws), summed over units.
pub fn psi_star_residual(theta: &ThetaHat, augmented: &AugmentedSample, delta: f64) -> Result<Vec<f64>> {
    check_delta(delta)?;
    let orig = augmented.original;
    let p = orig.dim() + 1;
    if theta.beta.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "beta has length {}, expected {p}",
            theta.beta.len()
        )));
    }
    let r = marginal_odds(theta.pi);
    let mut total = vec![0.0; p + 3];
    for i in 0..orig.n() {
        let xs = augmented.mixed_row(i);
        let zs = augmented.mixed_treatments[i] as f64;
        let u = linear_index(&theta.beta, xs);
        let ut = unit_terms(u, delta, r);
        // (Z* - e*) / (e*(1-e*)) * grad e*
        let mult = ut.t * (zs - ut.e_star);
        total[0] += mult;
        for j in 1..p {
            total[j] += mult * xs[j - 1];
        }
        let z = orig.treatments()[i] as f64;
        total[p] += z - theta.pi;
        total[p + 1] += z * (orig.outcomes()[i] - theta.mu1);
        let w = (1.0 - delta) * u.exp();
        total[p + 2] += w * (1.0 - zs) * (augmented.mixed_outcomes[i] - theta.mu0);
    }
    Ok(total)
}

/// Solves the augmented-sample equations: `pi` and `mu1` in closed form, the
/// propensity block by maximum likelihood on the mixed rows, then `mu0`.
pub fn solve_psi_star(augmented: &AugmentedSample, delta: f64) -> Result<ThetaHat> {
    check_delta(delta)?;
    let orig = augmented.original;
    let pi = orig.pi_hat();
    let r = marginal_odds(pi);
    let zs = &augmented.mixed_treatments;
    let model = MixedLikelihood {
        x: &augmented.mixed_covariates,
        d: orig.dim(),
        a: zs.iter().map(|&v| v as f64).collect(),
        b: zs.iter().map(|&v| 1.0 - v as f64).collect(),
        delta,
        r,
    };
    let start = match fit_logistic(orig) {
        Ok(f) => f.beta,
        Err(_) => intercept_start(orig.treatments(), orig.dim()),
    };
    let res = maximize(&model, start);
    if !res.converged {
        return Err(Error::SolverFailure {
            what: "augmented mixed propensity block".into(),
            iterations: res.iterations,
            residual: res.score_norm,
            trace: res.trace,
        });
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..orig.n() {
        if zs[i] == 0 {
            let w = linear_index(&res.beta, augmented.mixed_row(i)).exp();
            num += w * augmented.mixed_outcomes[i];
            den += w;
        }
    }
    if den == 0.0 {
        return Err(Error::DegenerateWeights("no mixed control weight".into()));
    }
    Ok(ThetaHat {
        beta: res.beta,
        pi,
        mu1: treated_mean(orig),
        mu0: num / den,
    })
}
