//! Huber-White sandwich variances for stacked estimating equations and
//! pairs-bootstrap standard errors.

use nalgebra::{DMatrix, DVector, SVD};
use rand::Rng;
use rayon::prelude::*;

use crate::dataset::ObservedSample;
use crate::error::{Error, Result};
use crate::estimators::{EstimatingSystem, ThetaHat};
use crate::propensity::{linear_index, logistic, marginal_odds, unit_terms};
use crate::rng::{stream, TAG_BOOTSTRAP};

/// Condition numbers of the bread above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;
/// Maximum share of failed bootstrap replicates.
pub const MAX_BOOT_FAILURE: f64 = 0.2;

/// Unit-level estimating equations `psi_i(theta)` summed over `n_units`.
pub trait EstimatingEquations: Sync {
    fn n_units(&self) -> usize;
    fn dim(&self) -> usize;
    fn unit_psi(&self, i: usize, theta: &[f64], out: &mut [f64]);
    /// Writes `d psi_i / d theta` into `out` and returns `true`, or returns
    /// `false` when no analytic Jacobian is available.
    fn unit_jacobian(&self, _i: usize, _theta: &[f64], _out: &mut DMatrix<f64>) -> bool {
        false
    }
    /// Contrast vector `c` of the scalar target `c' theta`.
    fn contrast(&self) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Jacobian {
    Analytic,
    Numerical,
}

#[derive(Debug, Clone)]
pub struct SandwichResult {
    pub variance: f64,
    pub se: f64,
    pub bread: DMatrix<f64>,
    pub meat: DMatrix<f64>,
    pub condition_number: f64,
}

/// A weighting estimator's system bound to a sample.
pub struct SystemOnSample<'a> {
    pub system: EstimatingSystem,
    pub sample: &'a ObservedSample,
}

impl EstimatingEquations for SystemOnSample<'_> {
    fn n_units(&self) -> usize {
        self.sample.n()
    }

    fn dim(&self) -> usize {
        self.sample.dim() + 4
    }

    fn unit_psi(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        self.system.unit_psi(
            theta,
            self.sample.outcomes()[i],
            self.sample.treatments()[i],
            self.sample.row(i),
            out,
        );
    }

    fn unit_jacobian(&self, i: usize, theta: &[f64], out: &mut DMatrix<f64>) -> bool {
        analytic_unit_jacobian(
            self.system,
            theta,
            self.sample.outcomes()[i],
            self.sample.treatments()[i],
            self.sample.row(i),
            out,
        );
        true
    }

    fn contrast(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.dim()];
        let k = c.len();
        c[k - 2] = 1.0;
        c[k - 1] = -1.0;
        c
    }
}

/// Analytic `d psi / d theta` for one unit of a weighting system.
pub fn analytic_unit_jacobian(
    system: EstimatingSystem,
    theta: &[f64],
    y: f64,
    z: u8,
    x: &[f64],
    out: &mut DMatrix<f64>,
) {
    let p = x.len() + 1;
    let beta = &theta[..p];
    let (pi, mu1, mu0) = (theta[p], theta[p + 1], theta[p + 2]);
    let zf = z as f64;
    let u = linear_index(beta, x);
    let xi = |j: usize| if j == 0 { 1.0 } else { x[j - 1] };
    out.fill(0.0);

    // propensity block: d/d beta = dphi * x x', d/d pi = dphi_dpi * x
    let (dphi, dphi_dpi) = match system {
        EstimatingSystem::Ipw | EstimatingSystem::Ow => {
            let e = logistic(u);
            (-e * (1.0 - e), 0.0)
        }
        EstimatingSystem::Mipw { delta } => {
            let r = marginal_odds(pi);
            let ut = unit_terms(u, delta, r);
            let (a, b) = if z == 1 { (1.0 - delta, 0.0) } else { (delta * r, 1.0) };
            let (t, es) = (ut.t, ut.e_star);
            let g = a * (1.0 - es) - b * es;
            let dphi = t * (1.0 - t) * g - t * t * (a + b) * es * (1.0 - es);
            let dt_dr = -delta * t * (-ut.log_odds_star).exp();
            let des_dr = delta * (1.0 - es) * (1.0 - es);
            let da_dr = if z == 1 { 0.0 } else { delta };
            let dphi_dr = dt_dr * g + t * (da_dr * (1.0 - es) - (a + b) * des_dr);
            (dphi, dphi_dr / ((1.0 - pi) * (1.0 - pi)))
        }
    };
    for j in 0..p {
        for k in 0..p {
            out[(j, k)] = dphi * xi(j) * xi(k);
        }
        out[(j, p)] = dphi_dpi * xi(j);
    }
    out[(p, p)] = -1.0;

    match system {
        EstimatingSystem::Ipw | EstimatingSystem::Mipw { .. } => {
            out[(p + 1, p + 1)] = -zf;
            let o = u.exp();
            for k in 0..p {
                out[(p + 2, k)] = o * (1.0 - zf) * (y - mu0) * xi(k);
            }
            out[(p + 2, p + 2)] = -o * (1.0 - zf);
        }
        EstimatingSystem::Ow => {
            let e = logistic(u);
            let de = e * (1.0 - e);
            for k in 0..p {
                out[(p + 1, k)] = -de * zf * (y - mu1) * xi(k);
                out[(p + 2, k)] = de * (1.0 - zf) * (y - mu0) * xi(k);
            }
            out[(p + 1, p + 1)] = -(1.0 - e) * zf;
            out[(p + 2, p + 2)] = -e * (1.0 - zf);
        }
    }
}

/// `-(1/N) sum_i d psi_i / d theta` by central differences with step
/// `cbrt(eps) * max(1, |theta_j|)`. Differences are taken per unit before
/// summing.
pub fn numerical_bread<E: EstimatingEquations + ?Sized>(eq: &E, theta: &[f64]) -> DMatrix<f64> {
    let k = eq.dim();
    let mut a = DMatrix::zeros(k, k);
    let step = f64::EPSILON.cbrt();
    let mut up = vec![0.0; k];
    let mut dn = vec![0.0; k];
    let mut work = theta.to_vec();
    for j in 0..k {
        let h = step * theta[j].abs().max(1.0);
        for i in 0..eq.n_units() {
            work[j] = theta[j] + h;
            eq.unit_psi(i, &work, &mut up);
            work[j] = theta[j] - h;
            eq.unit_psi(i, &work, &mut dn);
            for r in 0..k {
                a[(r, j)] -= (up[r] - dn[r]) / (2.0 * h);
            }
        }
        work[j] = theta[j];
    }
    a / eq.n_units() as f64
}

/// Analytic bread, or `None` when the equations provide no Jacobian.
pub fn analytic_bread<E: EstimatingEquations + ?Sized>(eq: &E, theta: &[f64]) -> Option<DMatrix<f64>> {
    let k = eq.dim();
    let mut a = DMatrix::zeros(k, k);
    let mut buf = DMatrix::zeros(k, k);
    for i in 0..eq.n_units() {
        if !eq.unit_jacobian(i, theta, &mut buf) {
            return None;
        }
        a -= &buf;
    }
    Some(a / eq.n_units() as f64)
}

pub fn meat<E: EstimatingEquations + ?Sized>(eq: &E, theta: &[f64]) -> DMatrix<f64> {
    let k = eq.dim();
    let mut b = DMatrix::zeros(k, k);
    let mut buf = vec![0.0; k];
    for i in 0..eq.n_units() {
        eq.unit_psi(i, theta, &mut buf);
        for r in 0..k {
            for c in 0..=r {
                b[(r, c)] += buf[r] * buf[c];
            }
        }
    }
    for r in 0..k {
        for c in 0..r {
            b[(c, r)] = b[(r, c)];
        }
    }
    b / eq.n_units() as f64
}

/// Sandwich variance `c' A^-1 B A^-T c / N` of the target `c' theta`.
pub fn sandwich<E: EstimatingEquations + ?Sized>(
    eq: &E,
    theta: &[f64],
    jacobian: Jacobian,
) -> Result<SandwichResult> {
    let bread = match jacobian {
        Jacobian::Analytic => analytic_bread(eq, theta).unwrap_or_else(|| numerical_bread(eq, theta)),
        Jacobian::Numerical => numerical_bread(eq, theta),
    };
    let meat = meat(eq, theta);
    // the SVD iteration does not terminate on non-finite input
    let finite = bread.iter().chain(meat.iter()).all(|v| v.is_finite());
    let condition_number = match finite.then(|| SVD::try_new(bread.clone(), false, false, f64::EPSILON, 1000)).flatten() {
        Some(svd) => {
            let sv = svd.singular_values;
            let smin = sv.min();
            if smin > 0.0 {
                sv.max() / smin
            } else {
                f64::INFINITY
            }
        }
        None => f64::INFINITY,
    };
    if !(condition_number < MAX_CONDITION) {
        return Err(Error::SingularBread {
            condition: condition_number,
        });
    }
    let c = DVector::from_vec(eq.contrast());
    let x = bread
        .transpose()
        .lu()
        .solve(&c)
        .ok_or(Error::SingularBread {
            condition: condition_number,
        })?;
    let variance = (x.transpose() * &meat * &x)[(0, 0)] / eq.n_units() as f64;
    let variance = variance.max(0.0);
    Ok(SandwichResult {
        variance,
        se: variance.sqrt(),
        bread,
        meat,
        condition_number,
    })
}

/// Robust standard error of a weighting estimator. The mixed IPW system uses
/// a finite-difference bread; IPW and OW use analytic ones.
pub fn sandwich_se(
    sample: &ObservedSample,
    theta: &ThetaHat,
    system: EstimatingSystem,
) -> Result<SandwichResult> {
    let eq = SystemOnSample { system, sample };
    let mode = match system {
        EstimatingSystem::Mipw { .. } => Jacobian::Numerical,
        _ => Jacobian::Analytic,
    };
    sandwich(&eq, &theta.to_vec(), mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub se: f64,
    /// Successful replicate estimates in replicate order.
    pub replicate_estimates: Vec<f64>,
    pub failed_count: usize,
}

/// Pairs bootstrap: resample units with replacement `b` times, rerun the
/// estimator, and report the standard deviation of the replicate estimates.
///
/// The estimator receives the resampled data and a replicate-specific seed
/// for any internal randomness. Failing replicates are excluded and counted.
pub fn bootstrap_se<F>(sample: &ObservedSample, estimator: F, b: usize, seed: u64) -> Result<BootstrapResult>
where
    F: Fn(&ObservedSample, u64) -> Result<f64> + Sync,
{
    if b < 2 {
        return Err(Error::InvalidArgument(format!("bootstrap needs B >= 2, got {b}")));
    }
    let n = sample.n();
    let outcomes: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream(seed, TAG_BOOTSTRAP, rep as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let inner_seed: u64 = rng.gen();
            let resampled = sample.subset(&idx).ok()?;
            estimator(&resampled, inner_seed).ok().filter(|v| v.is_finite())
        })
        .collect();
    let replicate_estimates: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let failed_count = b - replicate_estimates.len();
    if failed_count as f64 > MAX_BOOT_FAILURE * b as f64 || replicate_estimates.len() < 2 {
        return Err(Error::UnreliableBootstrap {
            failed: failed_count,
            total: b,
        });
    }
    if failed_count > 0 {
        log::warn!("bootstrap: {failed_count} of {b} replicates failed and were dropped");
    }
    Ok(BootstrapResult {
        se: sample_sd(&replicate_estimates),
        replicate_estimates,
        failed_count,
    })
}

/// Sample standard deviation with the `n - 1` divisor.
pub fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{ipw_theta, mipw_att, ow_theta};
    use crate::propensity::fit_logistic;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    struct MeanEq<'a>(&'a [f64]);

    impl EstimatingEquations for MeanEq<'_> {
        fn n_units(&self) -> usize {
            self.0.len()
        }
        fn dim(&self) -> usize {
            1
        }
        fn unit_psi(&self, i: usize, theta: &[f64], out: &mut [f64]) {
            out[0] = self.0[i] - theta[0];
        }
        fn contrast(&self) -> Vec<f64> {
            vec![1.0]
        }
    }

    fn normal_sample(seed: u64, n: usize) -> ObservedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = Vec::new();
        let mut z = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            let x1: f64 = StandardNormal.sample(&mut rng);
            let x2: f64 = StandardNormal.sample(&mut rng);
            let e = logistic(-0.4 + 0.7 * x1 + 0.4 * x2);
            let zi = (rng.gen::<f64>() < e) as u8;
            let eps: f64 = StandardNormal.sample(&mut rng);
            y.push(x1 - x2 + zi as f64 + eps);
            z.push(zi);
            x.extend([x1, x2]);
        }
        ObservedSample::new(y, z, x, vec!["x1".into(), "x2".into()]).unwrap()
    }

    #[test]
    fn mean_sandwich_is_classical() {
        let y = [1.0, 2.5, -0.3, 4.0, 0.7, 1.1];
        let mean = y.iter().sum::<f64>() / 6.0;
        let res = sandwich(&MeanEq(&y), &[mean], Jacobian::Numerical).unwrap();
        let pop_sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0).sqrt();
        assert!((res.se - pop_sd / 6f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn analytic_and_numerical_breads_agree() {
        let s = normal_sample(11, 400);
        let fit = fit_logistic(&s).unwrap();
        let cases = vec![
            (EstimatingSystem::Ipw, ipw_theta(&s, &fit).unwrap()),
            (EstimatingSystem::Ow, ow_theta(&s, &fit).unwrap()),
            (EstimatingSystem::Mipw { delta: 0.4 }, mipw_att(&s, 0.4).unwrap().1),
        ];
        for (system, theta) in cases {
            let eq = SystemOnSample { system, sample: &s };
            let t = theta.to_vec();
            let an = analytic_bread(&eq, &t).unwrap();
            let nu = numerical_bread(&eq, &t);
            let scale = an.abs().max();
            for (a, b) in an.iter().zip(nu.iter()) {
                assert!((a - b).abs() <= 1e-5 * a.abs().max(scale * 1e-3), "{system:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn sandwich_is_order_invariant() {
        let s = normal_sample(12, 300);
        let (_, theta) = mipw_att(&s, 0.5).unwrap();
        let rev: Vec<usize> = (0..s.n()).rev().collect();
        let s2 = s.subset(&rev).unwrap();
        let a = sandwich_se(&s, &theta, EstimatingSystem::Mipw { delta: 0.5 }).unwrap();
        let b = sandwich_se(&s2, &theta, EstimatingSystem::Mipw { delta: 0.5 }).unwrap();
        assert!((a.variance - b.variance).abs() <= 1e-12 * a.variance);
        let meat_sym = (&a.meat - a.meat.transpose()).abs().max();
        assert_eq!(meat_sym, 0.0);
    }

    #[test]
    fn ipw_sandwich_is_delta_zero_limit_of_mipw() {
        let s = normal_sample(13, 500);
        let fit = fit_logistic(&s).unwrap();
        let ipw = sandwich_se(&s, &ipw_theta(&s, &fit).unwrap(), EstimatingSystem::Ipw).unwrap();
        let delta = 1e-12;
        let (_, theta) = mipw_att(&s, delta).unwrap();
        let eq = SystemOnSample { system: EstimatingSystem::Mipw { delta }, sample: &s };
        let mipw = sandwich(&eq, &theta.to_vec(), Jacobian::Analytic).unwrap();
        assert!((ipw.se - mipw.se).abs() < 1e-8, "{} vs {}", ipw.se, mipw.se);
    }

    #[test]
    fn singular_bread_is_reported() {
        let y = [1.0, 2.0, 3.0];
        struct Flat<'a>(&'a [f64]);
        impl EstimatingEquations for Flat<'_> {
            fn n_units(&self) -> usize {
                self.0.len()
            }
            fn dim(&self) -> usize {
                2
            }
            fn unit_psi(&self, i: usize, theta: &[f64], out: &mut [f64]) {
                out[0] = self.0[i] - theta[0];
                out[1] = 0.0;
            }
            fn contrast(&self) -> Vec<f64> {
                vec![1.0, 0.0]
            }
        }
        assert!(matches!(
            sandwich(&Flat(&y), &[2.0, 0.0], Jacobian::Numerical),
            Err(Error::SingularBread { .. })
        ));
    }

    #[test]
    fn bootstrap_of_mean_matches_textbook() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 500;
        let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let s = ObservedSample::new(y.clone(), z, vec![], vec![]).unwrap();
        let mean_est = |d: &ObservedSample, _: u64| Ok(d.outcomes().iter().sum::<f64>() / d.n() as f64);
        let res = bootstrap_se(&s, mean_est, 400, 9).unwrap();
        let textbook = sample_sd(&y) / (n as f64).sqrt();
        assert!((res.se / textbook - 1.0).abs() < 0.1, "{} vs {}", res.se, textbook);
        let again = bootstrap_se(&s, mean_est, 400, 9).unwrap();
        assert_eq!(res.replicate_estimates, again.replicate_estimates);
    }

    #[test]
    fn bootstrap_constant_estimator_has_zero_se() {
        let s = normal_sample(1, 20);
        let res = bootstrap_se(&s, |_, _| Ok(3.0), 2, 1).unwrap();
        assert_eq!(res.se, 0.0);
        assert!(bootstrap_se(&s, |_, _| Ok(3.0), 1, 1).is_err());
    }

    #[test]
    fn bootstrap_failures_are_counted() {
        let s = normal_sample(2, 50);
        let flaky = |_: &ObservedSample, seed: u64| {
            if seed % 10 == 0 {
                Err(Error::NoControlUnits)
            } else {
                Ok((seed % 7) as f64)
            }
        };
        let res = bootstrap_se(&s, flaky, 200, 3).unwrap();
        assert_eq!(res.failed_count + res.replicate_estimates.len(), 200);
        let always = |_: &ObservedSample, _: u64| -> Result<f64> { Err(Error::NoControlUnits) };
        assert!(matches!(bootstrap_se(&s, always, 10, 3), Err(Error::UnreliableBootstrap { .. })));
    }
}
