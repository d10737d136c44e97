//! Logistic propensity models, the mixed (synthetic) propensity score and the
//! identification weights of a mixed distribution.
//!
//! Throughout, `r = pi / (1 - pi)` denotes the marginal treatment odds and
//! "odds" means `e / (1 - e)` for a propensity `e`.

use nalgebra::{DMatrix, DVector};

use crate::dataset::ObservedSample;
use crate::error::{check_delta, Error, Result};

pub const SCORE_TOL: f64 = 1e-10;
pub const MAX_ITER: usize = 100;
pub const SEPARATION_NORM: f64 = 1e6;
/// Fits whose linear index exceeds this in magnitude at any unit put a
/// fitted probability within ~1e-13 of 0 or 1; treated as separation.
pub const SEPARATION_INDEX: f64 = 30.0;

pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `log(exp(a) + exp(b))` without overflow.
fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Odds `pi / (1 - pi)`.
pub fn marginal_odds(pi: f64) -> f64 {
    pi / (1.0 - pi)
}

/// Linear index `beta_0 + x' beta_{1..}`.
pub fn linear_index(beta: &[f64], row: &[f64]) -> f64 {
    beta[0] + beta[1..].iter().zip(row).map(|(b, x)| b * x).sum::<f64>()
}

/// A fitted logistic propensity model. `beta[0]` is the intercept.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub beta: Vec<f64>,
    pub fitted_probs: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
}

impl PropensityFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        logistic(linear_index(&self.beta, row))
    }

    /// `e / (1 - e)` at a covariate row, computed as `exp(x' beta)`.
    pub fn odds_at(&self, row: &[f64]) -> f64 {
        linear_index(&self.beta, row).exp()
    }

    pub fn fitted_odds(&self, sample: &ObservedSample) -> Vec<f64> {
        (0..sample.n()).map(|i| self.odds_at(sample.row(i))).collect()
    }
}

/// Weighted log-likelihood of the synthetic propensity model
///
/// `L(beta) = sum_i a_i log e*_i + b_i log(1 - e*_i)`,
///
/// with `odds*_i = (1 - delta) exp(x_i' beta) + delta r`. With `delta = 0`,
/// `a = Z` and `b = 1 - Z` this is the ordinary logistic log-likelihood.
/// Its gradient is the first block of the mixed estimating equations.
#[derive(Debug, Clone)]
pub(crate) struct MixedLikelihood<'a> {
    pub x: &'a [f64],
    pub d: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub delta: f64,
    pub r: f64,
}

/// Per-unit quantities of the synthetic propensity model at linear index `u`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct UnitTerms {
    /// log odds*
    pub log_odds_star: f64,
    /// e*
    pub e_star: f64,
    /// (odds* - delta r) / odds*, the share of the model part in odds*.
    pub t: f64,
}

pub(crate) fn unit_terms(u: f64, delta: f64, r: f64) -> UnitTerms {
    if delta == 0.0 {
        return UnitTerms {
            log_odds_star: u,
            e_star: logistic(u),
            t: 1.0,
        };
    }
    let model = (1.0 - delta).ln() + u;
    let shift = (delta * r).ln();
    let log_odds_star = log_add_exp(model, shift);
    UnitTerms {
        log_odds_star,
        e_star: logistic(log_odds_star),
        t: logistic(model - shift),
    }
}

impl<'a> MixedLikelihood<'a> {
    pub fn n(&self) -> usize {
        self.a.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn objective(&self, beta: &[f64]) -> f64 {
        (0..self.n())
            .map(|i| {
                let ut = unit_terms(linear_index(beta, self.row(i)), self.delta, self.r);
                let log1p = log_add_exp(0.0, ut.log_odds_star);
                let mut v = 0.0;
                if self.a[i] != 0.0 {
                    v += self.a[i] * (ut.log_odds_star - log1p);
                }
                if self.b[i] != 0.0 {
                    v -= self.b[i] * log1p;
                }
                v
            })
            .sum()
    }

    /// Gradient and Hessian of the objective.
    pub fn derivatives(&self, beta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.d + 1;
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        let mut xi = vec![0.0; p];
        xi[0] = 1.0;
        for i in 0..self.n() {
            xi[1..].copy_from_slice(self.row(i));
            let ut = unit_terms(linear_index(beta, &xi[1..]), self.delta, self.r);
            let g = self.a[i] * (1.0 - ut.e_star) - self.b[i] * ut.e_star;
            let phi = ut.t * g;
            let dphi = ut.t * (1.0 - ut.t) * g
                - ut.t * ut.t * (self.a[i] + self.b[i]) * ut.e_star * (1.0 - ut.e_star);
            for j in 0..p {
                grad[j] += phi * xi[j];
                for k in 0..=j {
                    hess[(j, k)] += dphi * xi[j] * xi[k];
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                hess[(k, j)] = hess[(j, k)];
            }
        }
        (grad, hess)
    }
}

/// Outcome of a Newton ascent on [`MixedLikelihood`].
#[derive(Debug, Clone)]
pub(crate) struct AscentResult {
    pub beta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub score_norm: f64,
    pub trace: Vec<f64>,
}

/// Newton's method with step halving. Convergence is declared when the
/// mean score norm drops below `SCORE_TOL`.
pub(crate) fn maximize(model: &MixedLikelihood, start: Vec<f64>) -> AscentResult {
    let n = model.n().max(1) as f64;
    let mut beta = start;
    let mut obj = model.objective(&beta);
    let mut trace = Vec::new();
    for iter in 0..=MAX_ITER {
        let (grad, hess) = model.derivatives(&beta);
        let score_norm = grad.norm() / n;
        trace.push(score_norm);
        if score_norm <= SCORE_TOL {
            return AscentResult {
                beta,
                objective: obj,
                iterations: iter,
                converged: true,
                score_norm,
                trace,
            };
        }
        let beta_norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        if iter == MAX_ITER || beta_norm > SEPARATION_NORM || !obj.is_finite() {
            return AscentResult {
                beta,
                objective: obj,
                iterations: iter,
                converged: false,
                score_norm,
                trace,
            };
        }
        let neg = -hess;
        let step = match neg.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            // Not concave here: fall back to a scaled gradient step.
            None => {
                let scale = neg.diagonal().abs().max().max(1.0);
                &grad / scale
            }
        };
        let mut size = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + size * s).collect();
            let cand_obj = model.objective(&cand);
            if cand_obj.is_finite() && cand_obj >= obj - 1e-12 * obj.abs().max(1.0) {
                beta = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            size *= 0.5;
        }
        if !accepted {
            // The objective cannot be improved numerically; accept if the
            // score is at the round-off floor.
            let converged = score_norm <= SCORE_TOL * 1e3;
            return AscentResult {
                beta,
                objective: obj,
                iterations: iter,
                converged,
                score_norm,
                trace,
            };
        }
    }
    unreachable!()
}

/// Starting point: the intercept-only MLE for the treated fraction.
pub(crate) fn intercept_start(z: &[u8], d: usize) -> Vec<f64> {
    let pi = z.iter().filter(|&&v| v == 1).count() as f64 / z.len() as f64;
    let mut beta = vec![0.0; d + 1];
    beta[0] = (pi / (1.0 - pi)).ln();
    beta
}

fn finish_fit(res: AscentResult, x: &[f64], d: usize, n: usize, log_likelihood: f64) -> Result<PropensityFit> {
    let extreme = (0..n).any(|i| linear_index(&res.beta, &x[i * d..(i + 1) * d]).abs() > SEPARATION_INDEX);
    if !res.converged || extreme {
        let beta_norm = res.beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        return Err(Error::Separation {
            iterations: res.iterations,
            beta: res.beta,
            beta_norm,
            score_norm: res.score_norm,
        });
    }
    let fitted_probs = (0..n)
        .map(|i| logistic(linear_index(&res.beta, &x[i * d..(i + 1) * d])))
        .collect();
    Ok(PropensityFit {
        beta: res.beta,
        fitted_probs,
        log_likelihood,
        converged: true,
        iterations: res.iterations,
        score_norm: res.score_norm,
    })
}

/// Maximum-likelihood logistic regression of treatment on covariates
/// (intercept included).
pub fn fit_logistic(sample: &ObservedSample) -> Result<PropensityFit> {
    fit_logistic_rows(sample.covariates(), sample.dim(), sample.treatments())
}

pub fn fit_logistic_rows(x: &[f64], d: usize, z: &[u8]) -> Result<PropensityFit> {
    let model = MixedLikelihood {
        x,
        d,
        a: z.iter().map(|&v| v as f64).collect(),
        b: z.iter().map(|&v| 1.0 - v as f64).collect(),
        delta: 0.0,
        r: 0.0,
    };
    let res = maximize(&model, intercept_start(z, d));
    let ll = res.objective;
    finish_fit(res, x, d, z.len(), ll)
}

/// Maximum-likelihood fit of the synthetic propensity model
/// `odds* = (1 - delta) exp(x' beta) + delta r` to labelled rows, e.g. a
/// mixed replicate. The returned `beta` parameterizes the original odds;
/// `fitted_probs` are the synthetic propensities.
pub fn fit_mixed_propensity(
    x: &[f64],
    d: usize,
    z: &[u8],
    delta: f64,
    pi: f64,
    start: Option<Vec<f64>>,
) -> Result<PropensityFit> {
    check_delta(delta)?;
    let r = marginal_odds(pi);
    let model = MixedLikelihood {
        x,
        d,
        a: z.iter().map(|&v| v as f64).collect(),
        b: z.iter().map(|&v| 1.0 - v as f64).collect(),
        delta,
        r,
    };
    let start = match start {
        Some(s) => s,
        None => fit_logistic_rows(x, d, z)?.beta,
    };
    let res = maximize(&model, start);
    let ll = res.objective;
    let mut fit = finish_fit(res, x, d, z.len(), ll)?;
    for (i, e) in fit.fitted_probs.iter_mut().enumerate() {
        *e = unit_terms(linear_index(&fit.beta, &x[i * d..(i + 1) * d]), delta, r).e_star;
    }
    Ok(fit)
}

/// Synthetic odds under simple mixing: `(1 - delta) odds + delta r`.
pub fn simple_mixed_odds(odds: f64, delta: f64, pi: f64) -> Result<f64> {
    check_delta(delta)?;
    if !(odds.is_finite() && odds >= 0.0) {
        return Err(Error::InvalidArgument(format!("odds must be finite and nonnegative, got {odds}")));
    }
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::InvalidArgument(format!("pi must lie in (0,1), got {pi}")));
    }
    Ok((1.0 - delta) * odds + delta * marginal_odds(pi))
}

/// Undoes simple mixing on the odds scale: `(w* - delta r) / (1 - delta)`.
///
/// Applied to balancing weights of a mixed sample this yields weights that
/// balance the original sample.
pub fn unmix_odds(mixed: f64, delta: f64, pi: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok((mixed - delta * marginal_odds(pi)) / (1.0 - delta))
}

/// A mixing proportion that is either shared or given per unit.
#[derive(Debug, Clone, PartialEq)]
pub enum Proportion {
    Scalar(f64),
    PerUnit(Vec<f64>),
}

impl Proportion {
    pub fn at(&self, i: usize) -> f64 {
        match self {
            Proportion::Scalar(v) => *v,
            Proportion::PerUnit(v) => v[i],
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            Proportion::Scalar(v) => std::slice::from_ref(v),
            Proportion::PerUnit(v) => v,
        }
    }
}

/// Parameters of a mixed distribution: the treated arm draws from the
/// original treated population with proportion `theta1` (and from controls
/// otherwise), the control arm with proportion `theta0`, and the mixed
/// treatment marginal is `pi_star` (`None` means "same as the original").
#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    pub theta1: Proportion,
    pub theta0: Proportion,
    pub pi_star: Option<f64>,
}

/// A [`MixSpec`] evaluated at one unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixPoint {
    pub theta1: f64,
    pub theta0: f64,
    pub pi_star: Option<f64>,
}

impl MixSpec {
    /// Simple mixing: `theta1 = 1 - delta`, `theta0 = 0`, `pi* = pi`.
    pub fn simple(delta: f64) -> Result<Self> {
        check_delta(delta)?;
        Ok(Self {
            theta1: Proportion::Scalar(1.0 - delta),
            theta0: Proportion::Scalar(0.0),
            pi_star: None,
        })
    }

    /// Simple mixing with a per-unit mixing proportion.
    pub fn heterogeneous(deltas: Vec<f64>) -> Result<Self> {
        for &d in &deltas {
            check_delta(d)?;
        }
        let n = deltas.len();
        Ok(Self {
            theta1: Proportion::PerUnit(deltas.into_iter().map(|d| 1.0 - d).collect()),
            theta0: Proportion::PerUnit(vec![0.0; n]),
            pi_star: None,
        })
    }

    pub fn general(theta1: Proportion, theta0: Proportion, pi_star: Option<f64>) -> Result<Self> {
        for &t in theta1.values().iter().chain(theta0.values()) {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("mixing proportion {t} outside [0,1]")));
            }
        }
        if let Some(p) = pi_star {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidArgument(format!("pi* must lie in (0,1), got {p}")));
            }
        }
        Ok(Self { theta1, theta0, pi_star })
    }

    pub fn at(&self, i: usize) -> MixPoint {
        MixPoint {
            theta1: self.theta1.at(i),
            theta0: self.theta0.at(i),
            pi_star: self.pi_star,
        }
    }
}

/// Synthetic odds `e*/(1-e*)` of a general mixed distribution at one point:
///
/// `r* (theta1 odds + (1 - theta1) r) / (theta0 odds + (1 - theta0) r)`.
pub fn general_mixed_odds(odds: f64, mix: &MixPoint, pi: f64) -> Result<f64> {
    let r = marginal_odds(pi);
    let num = mix.theta1 * odds + (1.0 - mix.theta1) * r;
    let den = mix.theta0 * odds + (1.0 - mix.theta0) * r;
    if !(den > 0.0) {
        return Err(Error::DegenerateMixing(format!("denominator {den} is not positive")));
    }
    match mix.pi_star {
        None if mix.theta0 == 0.0 => Ok(num),
        None => Ok(r * num / den),
        Some(ps) => Ok(marginal_odds(ps) * num / den),
    }
}

/// Synthetic odds for every unit of a (possibly heterogeneous) mixing spec.
pub fn mixed_odds_vector(odds: &[f64], mix: &MixSpec, pi: f64) -> Result<Vec<f64>> {
    odds.iter()
        .enumerate()
        .map(|(i, &o)| general_mixed_odds(o, &mix.at(i), pi))
        .collect()
}

/// Weights `(w0(x), w1(x))` that identify counterfactual means from a mixed
/// distribution, e.g.
///
/// `E[Y(0) | Z = 1] = (1-pi)/pi { E[w0 Z* Y*]/pi* - E[w1 (1-Z*) Y*]/(1-pi*) }`.
pub fn identification_weights(odds_star: f64, mix: &MixPoint, pi: f64) -> Result<(f64, f64)> {
    let (t1, t0) = (mix.theta1, mix.theta0);
    if t1 == t0 {
        return Err(Error::InvalidArgument(
            "identification requires theta1 != theta0".into(),
        ));
    }
    let r = marginal_odds(pi);
    let r_star = mix.pi_star.map(marginal_odds).unwrap_or(r);
    let den = t0 * odds_star - t1 * r_star;
    if den.abs() < 1e-12 {
        return Err(Error::SingularIdentification(den));
    }
    let common = r * ((1.0 - t1) * r_star - (1.0 - t0) * odds_star) / den / (t0 - t1);
    Ok((t0 * common, t1 * common))
}
