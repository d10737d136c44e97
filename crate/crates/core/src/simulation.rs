//! Simulation designs and the Monte Carlo runner.
//!
//! Covariates are five independent standard normals, treatment follows a
//! logistic propensity whose coefficients set the degree of overlap, and the
//! outcome is linear in the covariates with a constant effect `tau`. In the
//! misspecified design the analyst only sees a nonlinear transform of the
//! covariates, while treatment and outcome still depend on the raw ones.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balancing::{eb_att, mixed_eb};
use crate::dataset::{AugmentedSample, ObservedSample};
use crate::error::{Error, Result};
use crate::estimators::{ipw_theta, mipw_att, ow_theta, EstimatingSystem};
use crate::inference::{sample_sd, sandwich_se};
use crate::propensity::{fit_logistic, linear_index, logistic};
use crate::resample::mipw_m;
use crate::rng::{derive_seed, stream, TAG_AUGMENT, TAG_MIXING, TAG_SIMULATION};

pub const DIM: usize = 5;

/// Share of failed replications above which a cell is flagged.
pub const MAX_CELL_FAILURE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Overlap {
    Strong,
    Moderate,
    Weak,
}

impl Overlap {
    /// Propensity coefficients, intercept first.
    pub fn beta(self) -> [f64; 6] {
        match self {
            Overlap::Strong => [-0.5, 0.5, -0.5, 0.5, 0.5, 0.5],
            Overlap::Moderate => [-1.0, 1.0, -1.0, 0.5, -0.5, 0.5],
            Overlap::Weak => [-2.0, 2.0, -2.0, 1.0, 0.0, 0.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Overlap::Strong => "strong",
            Overlap::Moderate => "moderate",
            Overlap::Weak => "weak",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "strong" => Ok(Overlap::Strong),
            "moderate" => Ok(Overlap::Moderate),
            "weak" => Ok(Overlap::Weak),
            other => Err(Error::InvalidArgument(format!("unknown overlap setting '{other}'"))),
        }
    }
}

pub const CORRECT_GAMMA: [f64; 6] = [2.0, 2.0, 2.0, 0.0, 1.0, -1.0];
pub const MISSPECIFIED_GAMMA: [f64; 6] = [-13.7, 27.4, 13.7, 13.7, 13.7, 13.7];

/// The standard delta grid 0.05, 0.10, ..., 0.95.
pub fn default_delta_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub n: usize,
    pub overlap: Overlap,
    pub misspecified: bool,
    /// Outcome coefficients, intercept first.
    pub gamma: Vec<f64>,
    pub tau: f64,
    pub delta_grid: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    /// Mixing replicates per estimate for the resampling estimators.
    pub mix_replicates: usize,
    /// Attach sandwich standard errors where defined.
    pub robust_se: bool,
    /// Replaces the propensity coefficients implied by `overlap`.
    pub beta: Option<Vec<f64>>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self::correct(Overlap::Strong)
    }
}

impl ScenarioSpec {
    /// Correctly specified linear design.
    pub fn correct(overlap: Overlap) -> Self {
        Self {
            name: format!("correct-{}", overlap.name()),
            n: 1000,
            overlap,
            misspecified: false,
            gamma: CORRECT_GAMMA.to_vec(),
            tau: 1.0,
            delta_grid: default_delta_grid(),
            replications: 500,
            seed: 20240601,
            mix_replicates: 200,
            robust_se: true,
            beta: None,
        }
    }

    /// Transformed-covariate design under weak overlap.
    pub fn misspecified() -> Self {
        Self {
            name: "misspecified-weak".into(),
            overlap: Overlap::Weak,
            misspecified: true,
            gamma: MISSPECIFIED_GAMMA.to_vec(),
            tau: 210.0,
            ..Self::correct(Overlap::Weak)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("scenario file: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn propensity_beta(&self) -> Vec<f64> {
        self.beta.clone().unwrap_or_else(|| self.overlap.beta().to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::InvalidArgument("scenario n must be at least 4".into()));
        }
        if self.gamma.len() != DIM + 1 {
            return Err(Error::InvalidArgument(format!("gamma needs {} entries, got {}", DIM + 1, self.gamma.len())));
        }
        if self.replications == 0 || self.mix_replicates == 0 {
            return Err(Error::InvalidArgument("replications and mix_replicates must be >= 1".into()));
        }
        if self.beta.as_ref().is_some_and(|b| b.len() != DIM + 1) {
            return Err(Error::InvalidArgument(format!("beta needs {} entries", DIM + 1)));
        }
        for &d in &self.delta_grid {
            crate::error::check_delta(d)?;
        }
        Ok(())
    }
}

/// Kang–Schafer style transform of the raw covariates.
pub fn transform_covariates(x: &[f64]) -> [f64; DIM] {
    [
        (x[0] / 2.0).exp(),
        x[1] / (1.0 + x[0].exp()) + 10.0,
        (x[0] * x[2] / 25.0 + 0.6).powi(3),
        (x[0] + x[4] + 20.0).powi(2),
        (x[2] - x[4] + 1.0).abs().sqrt(),
    ]
}

/// One simulated dataset plus quantities only a simulation knows.
#[derive(Debug, Clone)]
pub struct SimulatedDraw {
    pub sample: ObservedSample,
    pub true_propensity: Vec<f64>,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
}

impl SimulatedDraw {
    /// Sample ATT from the potential outcomes.
    pub fn oracle_att(&self) -> f64 {
        let t = self.sample.treated_indices();
        t.iter().map(|&i| self.y1[i] - self.y0[i]).sum::<f64>() / t.len() as f64
    }

    /// Overlap-weighted effect from the potential outcomes and true scores.
    pub fn oracle_ato(&self) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, e) in self.true_propensity.iter().enumerate() {
            let h = e * (1.0 - e);
            num += h * (self.y1[i] - self.y0[i]);
            den += h;
        }
        num / den
    }
}

struct Unit {
    observed: [f64; DIM],
    e: f64,
    z: u8,
    y0: f64,
    y1: f64,
}

fn draw_unit(spec: &ScenarioSpec, beta: &[f64], rng: &mut ChaCha8Rng) -> Unit {
    let mut x = [0.0; DIM];
    for v in x.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    let e = logistic(linear_index(beta, &x));
    let z = (rng.gen::<f64>() < e) as u8;
    let eps: f64 = StandardNormal.sample(rng);
    let y0 = linear_index(&spec.gamma, &x) + eps;
    let observed = if spec.misspecified { transform_covariates(&x) } else { x };
    Unit {
        observed,
        e,
        z,
        y0,
        y1: y0 + spec.tau,
    }
}

fn column_names() -> Vec<String> {
    (1..=DIM).map(|j| format!("x{j}")).collect()
}

/// Dataset number `rep` of a scenario.
pub fn generate(spec: &ScenarioSpec, rep: usize) -> Result<ObservedSample> {
    Ok(generate_with_truth(spec, rep)?.sample)
}

pub fn generate_with_truth(spec: &ScenarioSpec, rep: usize) -> Result<SimulatedDraw> {
    let mut rng = stream(spec.seed, TAG_SIMULATION, rep as u64);
    let beta = spec.propensity_beta();
    let n = spec.n;
    let (mut y, mut z, mut x) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n * DIM));
    let (mut e, mut y1, mut y0) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let u = draw_unit(spec, &beta, &mut rng);
        y.push(if u.z == 1 { u.y1 } else { u.y0 });
        z.push(u.z);
        x.extend_from_slice(&u.observed);
        e.push(u.e);
        y1.push(u.y1);
        y0.push(u.y0);
    }
    Ok(SimulatedDraw {
        sample: ObservedSample::new(y, z, x, column_names())?,
        true_propensity: e,
        y1,
        y0,
    })
}

/// A simulated dataset together with a population-level augmentation:
/// each treated row is, with probability `delta`, replaced by a fresh draw
/// from the control population.
#[derive(Debug, Clone)]
pub struct AugmentedDraw {
    pub draw: SimulatedDraw,
    pub mixed_outcomes: Vec<f64>,
    pub mixed_treatments: Vec<u8>,
    pub mixed_covariates: Vec<f64>,
    pub replaced: usize,
}

impl AugmentedDraw {
    pub fn view(&self) -> Result<AugmentedSample<'_>> {
        AugmentedSample::new(
            &self.draw.sample,
            self.mixed_outcomes.clone(),
            self.mixed_treatments.clone(),
            self.mixed_covariates.clone(),
        )
    }
}

pub fn generate_augmented(spec: &ScenarioSpec, rep: usize, delta: f64) -> Result<AugmentedDraw> {
    crate::error::check_delta(delta)?;
    let draw = generate_with_truth(spec, rep)?;
    let mut rng = stream(spec.seed, TAG_AUGMENT, rep as u64);
    let beta = spec.propensity_beta();
    let s = &draw.sample;
    let mut outcomes = s.outcomes().to_vec();
    let mut covariates = s.covariates().to_vec();
    let mut replaced = 0;
    for i in 0..s.n() {
        if !s.is_treated(i) || rng.gen::<f64>() >= delta {
            continue;
        }
        // rejection: keep drawing units until one lands in the control arm
        let unit = loop {
            let u = draw_unit(spec, &beta, &mut rng);
            if u.z == 0 {
                break u;
            }
        };
        outcomes[i] = unit.y0;
        covariates[i * DIM..(i + 1) * DIM].copy_from_slice(&unit.observed);
        replaced += 1;
    }
    let treatments = s.treatments().to_vec();
    Ok(AugmentedDraw {
        draw,
        mixed_outcomes: outcomes,
        mixed_treatments: treatments,
        mixed_covariates: covariates,
        replaced,
    })
}

/// Conditional variance of the IPW contrast given `(X, Z)` when the outcome
/// variances are known constants.
pub fn eq4_variance(sample: &ObservedSample, true_propensities: &[f64], v1: f64, v0: f64) -> Result<f64> {
    if true_propensities.len() != sample.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} propensities for {} units",
            true_propensities.len(),
            sample.n()
        )));
    }
    let nt = sample.n_treated() as f64;
    let (mut sq, mut sum) = (0.0, 0.0);
    for i in sample.control_indices() {
        let e = true_propensities[i];
        let o = e / (1.0 - e);
        sq += o * o;
        sum += o;
    }
    Ok(nt * v1 / (nt * nt) + sq * v0 / (sum * sum))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    Ipw,
    Mipw,
    MipwM,
    Ow,
    Eb,
    Meb,
    /// Difference of potential-outcome means over the treated.
    Oracle,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::Ipw,
        EstimatorKind::Mipw,
        EstimatorKind::MipwM,
        EstimatorKind::Ow,
        EstimatorKind::Eb,
        EstimatorKind::Meb,
        EstimatorKind::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Ipw => "IPW",
            EstimatorKind::Mipw => "MIPW",
            EstimatorKind::MipwM => "MIPW.M",
            EstimatorKind::Ow => "OW",
            EstimatorKind::Eb => "EB",
            EstimatorKind::Meb => "MEB",
            EstimatorKind::Oracle => "ORACLE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ipw" => Ok(EstimatorKind::Ipw),
            "mipw" => Ok(EstimatorKind::Mipw),
            "mipw.m" | "mipwm" | "mipw-m" => Ok(EstimatorKind::MipwM),
            "ow" => Ok(EstimatorKind::Ow),
            "eb" => Ok(EstimatorKind::Eb),
            "meb" => Ok(EstimatorKind::Meb),
            "oracle" => Ok(EstimatorKind::Oracle),
            other => Err(Error::InvalidArgument(format!("unknown estimator '{other}'"))),
        }
    }

    pub fn uses_delta(self) -> bool {
        matches!(self, EstimatorKind::Mipw | EstimatorKind::MipwM | EstimatorKind::Meb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McRow {
    pub scenario: String,
    pub overlap: Overlap,
    pub delta: Option<f64>,
    pub estimator: EstimatorKind,
    pub mean_est: f64,
    pub sd_est: f64,
    pub mean_robust_se: Option<f64>,
    pub n_ok: usize,
    pub n_fail: usize,
    pub flagged: bool,
    /// Point estimates of the successful replications, in replication order.
    pub estimates: Vec<f64>,
}

impl McRow {
    pub fn bias(&self, truth: f64) -> f64 {
        self.mean_est - truth
    }

    /// `mean ± 1.96 sd` band of the sampling distribution.
    pub fn interval(&self) -> (f64, f64) {
        (self.mean_est - 1.96 * self.sd_est, self.mean_est + 1.96 * self.sd_est)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloTable {
    pub rows: Vec<McRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MonteCarloTable {
    pub fn row(&self, estimator: EstimatorKind, delta: Option<f64>) -> Option<&McRow> {
        self.rows.iter().find(|r| {
            r.estimator == estimator
                && match (r.delta, delta) {
                    (None, None) => true,
                    (Some(a), Some(b)) => (a - b).abs() < 1e-9,
                    _ => false,
                }
        })
    }

    /// Tidy CSV. `metadata` lines are written first as `# key: value`;
    /// flagged cells are listed the same way.
    pub fn write_csv<W: Write>(&self, mut out: W, metadata: &[(String, String)]) -> Result<()> {
        for (k, v) in metadata {
            writeln!(out, "# {k}: {v}")?;
        }
        for r in self.rows.iter().filter(|r| r.flagged) {
            writeln!(
                out,
                "# flagged: overlap={} delta={} estimator={} n_fail={}",
                r.overlap.name(),
                fmt_opt(r.delta),
                r.estimator.name(),
                r.n_fail
            )?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scenario", "overlap", "delta", "estimator", "mean_est", "sd_est", "mean_robust_se", "n_fail"])?;
        for r in &self.rows {
            w.write_record([
                r.scenario.clone(),
                r.overlap.name().to_string(),
                fmt_opt(r.delta),
                r.estimator.name().to_string(),
                r.mean_est.to_string(),
                r.sd_est.to_string(),
                fmt_opt(r.mean_robust_se),
                r.n_fail.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

type CellOutcome = Option<(f64, Option<f64>)>;

fn cells(spec: &ScenarioSpec, estimators: &[EstimatorKind]) -> Vec<(EstimatorKind, Option<f64>)> {
    let mut out = Vec::new();
    for &k in estimators {
        if k.uses_delta() {
            out.extend(spec.delta_grid.iter().map(|&d| (k, Some(d))));
        } else {
            out.push((k, None));
        }
    }
    out
}

fn replicate(spec: &ScenarioSpec, rep: usize, cells: &[(EstimatorKind, Option<f64>)]) -> Vec<CellOutcome> {
    let draw = match generate_with_truth(spec, rep) {
        Ok(d) => d,
        Err(e) => {
            log::warn!("replication {rep}: data generation failed: {e}");
            return vec![None; cells.len()];
        }
    };
    let s = &draw.sample;
    let fit = fit_logistic(s).ok();
    let mix_seed = derive_seed(spec.seed, TAG_MIXING, rep as u64);
    let robust = |theta, system| {
        if spec.robust_se {
            sandwich_se(s, &theta, system).ok().map(|r| r.se)
        } else {
            None
        }
    };
    cells
        .iter()
        .map(|&(kind, delta)| {
            let out = match (kind, delta) {
                (EstimatorKind::Ipw, _) => {
                    let theta = ipw_theta(s, fit.as_ref()?).ok()?;
                    Some((theta.contrast(), robust(theta, EstimatingSystem::Ipw)))
                }
                (EstimatorKind::Ow, _) => {
                    let theta = ow_theta(s, fit.as_ref()?).ok()?;
                    Some((theta.contrast(), robust(theta, EstimatingSystem::Ow)))
                }
                (EstimatorKind::Mipw, Some(d)) => {
                    let (report, theta) = mipw_att(s, d).ok()?;
                    Some((report.point, robust(theta, EstimatingSystem::Mipw { delta: d })))
                }
                (EstimatorKind::MipwM, Some(d)) => Some((mipw_m(s, d, spec.mix_replicates, mix_seed).ok()?.point, None)),
                (EstimatorKind::Eb, _) => Some((eb_att(s).ok()?.point, None)),
                (EstimatorKind::Meb, Some(d)) => Some((mixed_eb(s, d, spec.mix_replicates, mix_seed).ok()?.point, None)),
                (EstimatorKind::Oracle, _) => Some((draw.oracle_att(), None)),
                _ => None,
            };
            out.filter(|(p, _)| p.is_finite())
        })
        .collect()
}

/// Runs every selected estimator on `spec.replications` simulated datasets.
/// Resampling estimators reuse the same mixing seed across the delta grid
/// within a replication.
pub fn run_monte_carlo(spec: &ScenarioSpec, estimators: &[EstimatorKind]) -> Result<MonteCarloTable> {
    spec.validate()?;
    if estimators.is_empty() {
        return Err(Error::InvalidArgument("select at least one estimator".into()));
    }
    let cells = cells(spec, estimators);
    let per_rep: Vec<Vec<CellOutcome>> = (0..spec.replications)
        .into_par_iter()
        .map(|rep| replicate(spec, rep, &cells))
        .collect();
    let rows = cells
        .iter()
        .enumerate()
        .map(|(c, &(estimator, delta))| {
            let ok: Vec<(f64, Option<f64>)> = per_rep.iter().filter_map(|r| r[c]).collect();
            let estimates: Vec<f64> = ok.iter().map(|o| o.0).collect();
            let ses: Vec<f64> = ok.iter().filter_map(|o| o.1).collect();
            let n_ok = estimates.len();
            let n_fail = spec.replications - n_ok;
            let flagged = n_fail as f64 > MAX_CELL_FAILURE * spec.replications as f64;
            if n_fail > 0 {
                log::warn!(
                    "{} {} delta={}: {n_fail} of {} replications failed",
                    spec.name,
                    estimator.name(),
                    fmt_opt(delta),
                    spec.replications
                );
            }
            McRow {
                scenario: spec.name.clone(),
                overlap: spec.overlap,
                delta,
                estimator,
                mean_est: if n_ok > 0 { estimates.iter().sum::<f64>() / n_ok as f64 } else { f64::NAN },
                sd_est: sample_sd(&estimates),
                mean_robust_se: (!ses.is_empty()).then(|| ses.iter().sum::<f64>() / ses.len() as f64),
                n_ok,
                n_fail,
                flagged,
                estimates,
            }
        })
        .collect();
    Ok(MonteCarloTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(overlap: Overlap) -> ScenarioSpec {
        ScenarioSpec {
            n: 400,
            replications: 20,
            delta_grid: vec![0.5],
            mix_replicates: 10,
            ..ScenarioSpec::correct(overlap)
        }
    }

    #[test]
    fn transform_at_origin() {
        let t = transform_covariates(&[0.0; 5]);
        let want = [1.0, 10.0, 0.216, 400.0, 1.0];
        for (a, b) in t.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn treated_share_matches_intercept_only_model() {
        let spec = ScenarioSpec {
            n: 2000,
            beta: Some(vec![-0.7, 0.0, 0.0, 0.0, 0.0, 0.0]),
            ..small(Overlap::Strong)
        };
        let share = (0..20).map(|r| generate(&spec, r).unwrap().pi_hat()).sum::<f64>() / 20.0;
        // sd of the pooled share is about 0.0023
        assert!((share - logistic(-0.7)).abs() < 0.01, "share {share}");
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = small(Overlap::Moderate);
        let a = generate(&spec, 3).unwrap();
        let b = generate(&spec, 3).unwrap();
        let c = generate(&spec, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.outcomes(), c.outcomes());
    }

    #[test]
    fn misspecified_observes_transformed_covariates() {
        let spec = ScenarioSpec { n: 200, ..ScenarioSpec::misspecified() };
        let s = generate(&spec, 0).unwrap();
        for i in 0..s.n() {
            let r = s.row(i);
            assert!(r[0] > 0.0 && r[3] > 0.0 && r[4] >= 0.0);
        }
    }

    #[test]
    fn weak_overlap_has_more_extreme_scores() {
        // Kolmogorov distance between pooled fitted-score CDFs, plus tail mass
        let pooled = |o: Overlap| {
            let spec = small(o);
            let mut v: Vec<f64> = (0..100)
                .flat_map(|r| fit_logistic(&generate(&spec, r).unwrap()).unwrap().fitted_probs)
                .map(|e| (e - 0.5).abs())
                .collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let strong = pooled(Overlap::Strong);
        let weak = pooled(Overlap::Weak);
        let cdf = |v: &[f64], t: f64| v.partition_point(|&x| x <= t) as f64 / v.len() as f64;
        let ks = (0..=100).map(|k| k as f64 / 200.0).map(|t| cdf(&strong, t) - cdf(&weak, t)).fold(f64::MIN, f64::max);
        assert!(ks > 0.2, "distance {ks}");
        assert!(cdf(&weak, 0.45) < cdf(&strong, 0.45));
    }

    #[test]
    fn design_effect_is_tau() {
        let spec = ScenarioSpec { replications: 200, ..small(Overlap::Weak) };
        let (mut att, mut ato) = (0.0, 0.0);
        for r in 0..spec.replications {
            let d = generate_with_truth(&spec, r).unwrap();
            att += d.oracle_att();
            ato += d.oracle_ato();
        }
        assert!((att / 200.0 - 1.0).abs() < 1e-9);
        assert!((ato / 200.0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn eq4_hand_values() {
        let s = ObservedSample::new(vec![0.0; 6], vec![1, 1, 1, 0, 0, 0], vec![0.0; 6], vec!["x".into()]).unwrap();
        let v = eq4_variance(&s, &[0.5; 6], 1.0, 1.0).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-14);
        let mut last = v;
        for e in [0.9, 0.99, 0.999, 0.9999] {
            let val = eq4_variance(&s, &[0.5, 0.5, 0.5, e, 0.5, 0.5], 1.0, 1.0).unwrap();
            assert!(val > last);
            last = val;
        }
        assert!(last > 0.99 + 1.0 / 3.0);
    }

    #[test]
    fn eq4_weak_exceeds_strong() {
        let median = |o: Overlap| {
            let spec = small(o);
            let mut v: Vec<f64> = (0..40)
                .map(|r| {
                    let d = generate_with_truth(&spec, r).unwrap();
                    eq4_variance(&d.sample, &d.true_propensity, 1.0, 1.0).unwrap()
                })
                .collect();
            v.sort_by(f64::total_cmp);
            v[20]
        };
        assert!(median(Overlap::Weak) > median(Overlap::Strong));
    }

    #[test]
    fn augmented_rows_replace_treated_with_controls() {
        let spec = small(Overlap::Strong);
        let aug = generate_augmented(&spec, 0, 0.4).unwrap();
        let view = aug.view().unwrap();
        let s = &aug.draw.sample;
        let nt = s.n_treated() as f64;
        assert!((aug.replaced as f64 - 0.4 * nt).abs() < 4.0 * (nt * 0.24).sqrt());
        assert_eq!(view.mixed_treatments, s.treatments());
    }

    #[test]
    fn monte_carlo_is_deterministic_and_complete() {
        let spec = small(Overlap::Strong);
        let est = [EstimatorKind::Ipw, EstimatorKind::Mipw, EstimatorKind::Ow, EstimatorKind::Oracle, EstimatorKind::Meb];
        let a = run_monte_carlo(&spec, &est).unwrap();
        let b = run_monte_carlo(&spec, &est).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 5);
        for r in &a.rows {
            assert_eq!(r.n_ok + r.n_fail, spec.replications);
        }
        let oracle = a.row(EstimatorKind::Oracle, None).unwrap();
        assert!((oracle.mean_est - 1.0).abs() < 1e-9);
        assert!(a.row(EstimatorKind::Mipw, Some(0.5)).unwrap().mean_robust_se.is_some());
        let mut buf = Vec::new();
        a.write_csv(&mut buf, &[("seed".into(), spec.seed.to_string())]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# seed: "));
        assert!(text.contains("scenario,overlap,delta,estimator,mean_est,sd_est,mean_robust_se,n_fail"));
    }

    #[test]
    fn scenario_file_round_trip() {
        let spec = ScenarioSpec::from_toml_str("overlap = \"weak\"\nn = 300\nreplications = 7\ndelta_grid = [0.25, 0.75]\nseed = 3\n").unwrap();
        assert_eq!(spec.overlap, Overlap::Weak);
        assert_eq!(spec.n, 300);
        assert_eq!(spec.gamma, CORRECT_GAMMA.to_vec());
        assert!(ScenarioSpec::from_toml_str("delta_grid = [1.0]").is_err());
        assert!(ScenarioSpec::from_toml_str("bogus = 1").is_err());
    }
}
