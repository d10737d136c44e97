//! Observational samples `(Y, Z, X)`: validation, CSV ingestion and summaries.
//!
//! Covariates are stored row-major so a unit's covariate vector is a
//! contiguous slice. Samples are immutable once constructed.

use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::propensity::PropensityFit;

/// A validated observational dataset of `n` units with `d` covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSample {
    outcomes: Vec<f64>,
    treatments: Vec<u8>,
    covariates: Vec<f64>,
    d: usize,
    column_names: Vec<String>,
}

impl ObservedSample {
    /// Builds a sample from row-major covariates (`outcomes.len() * d` values).
    pub fn new(
        outcomes: Vec<f64>,
        treatments: Vec<u8>,
        covariates: Vec<f64>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let n = outcomes.len();
        let d = column_names.len();
        if treatments.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} outcomes but {} treatments",
                n,
                treatments.len()
            )));
        }
        if covariates.len() != n * d {
            return Err(Error::DimensionMismatch(format!(
                "expected {} covariate values ({} x {}), got {}",
                n * d,
                n,
                d,
                covariates.len()
            )));
        }
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 units, got {n}"
            )));
        }
        for (row, &z) in treatments.iter().enumerate() {
            if z > 1 {
                return Err(Error::NonBinaryTreatment {
                    row,
                    value: z.to_string(),
                });
            }
        }
        for (row, y) in outcomes.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::MissingValue {
                    row,
                    column: "outcome".into(),
                });
            }
        }
        for (k, x) in covariates.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::MissingValue {
                    row: k / d,
                    column: column_names[k % d].clone(),
                });
            }
        }
        let n_treated = treatments.iter().filter(|&&z| z == 1).count();
        if n_treated == 0 {
            return Err(Error::NoTreatedUnits);
        }
        if n_treated == n {
            return Err(Error::NoControlUnits);
        }
        Ok(Self {
            outcomes,
            treatments,
            covariates,
            d,
            column_names,
        })
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    /// Number of covariates (excluding the intercept).
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn treatments(&self) -> &[u8] {
        &self.treatments
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.d..(i + 1) * self.d]
    }

    pub fn is_treated(&self, i: usize) -> bool {
        self.treatments[i] == 1
    }

    pub fn n_treated(&self) -> usize {
        self.treatments.iter().filter(|&&z| z == 1).count()
    }

    pub fn n_control(&self) -> usize {
        self.n() - self.n_treated()
    }

    /// `N_t / N`.
    pub fn pi_hat(&self) -> f64 {
        self.n_treated() as f64 / self.n() as f64
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.is_treated(i)).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.is_treated(i)).collect()
    }

    /// Builds a new sample from the given unit indices (with repetition).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut outcomes = Vec::with_capacity(indices.len());
        let mut treatments = Vec::with_capacity(indices.len());
        let mut covariates = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            outcomes.push(self.outcomes[i]);
            treatments.push(self.treatments[i]);
            covariates.extend_from_slice(self.row(i));
        }
        Self::new(outcomes, treatments, covariates, self.column_names.clone())
    }

    /// Returns `true` when `[1, X]` has full column rank. Logs a warning otherwise.
    pub fn check_rank(&self) -> bool {
        let p = self.d + 1;
        let design = DMatrix::from_fn(self.n(), p, |i, j| {
            if j == 0 {
                1.0
            } else {
                self.covariates[i * self.d + j - 1]
            }
        });
        let svd = design.svd(false, false);
        let smax = svd.singular_values.max();
        let tol = smax * f64::EPSILON * self.n().max(p) as f64;
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        if rank < p {
            log::warn!("covariate matrix is rank deficient: rank {rank} < {p} (with intercept)");
            false
        } else {
            true
        }
    }
}

/// A sample paired unit-by-unit with a draw from its mixed distribution.
///
/// Mixed treatment labels and mixed control rows coincide with the original
/// ones; only rows at treated positions may differ.
#[derive(Debug, Clone)]
pub struct AugmentedSample<'a> {
    pub original: &'a ObservedSample,
    pub mixed_outcomes: Vec<f64>,
    pub mixed_treatments: Vec<u8>,
    pub mixed_covariates: Vec<f64>,
}

impl<'a> AugmentedSample<'a> {
    pub fn new(
        original: &'a ObservedSample,
        mixed_outcomes: Vec<f64>,
        mixed_treatments: Vec<u8>,
        mixed_covariates: Vec<f64>,
    ) -> Result<Self> {
        let n = original.n();
        let d = original.dim();
        if mixed_outcomes.len() != n
            || mixed_treatments.len() != n
            || mixed_covariates.len() != n * d
        {
            return Err(Error::DimensionMismatch(
                "augmented sample must have the same shape as the original".into(),
            ));
        }
        for i in 0..n {
            if mixed_treatments[i] > 1 {
                return Err(Error::NonBinaryTreatment {
                    row: i,
                    value: mixed_treatments[i].to_string(),
                });
            }
            if mixed_treatments[i] == 0 {
                let same_row = mixed_covariates[i * d..(i + 1) * d] == *original.row(i);
                if original.is_treated(i)
                    || mixed_outcomes[i] != original.outcomes()[i]
                    || !same_row
                {
                    return Err(Error::InvalidArgument(format!(
                        "mixed control row {i} differs from the original control row"
                    )));
                }
            }
        }
        Ok(Self {
            original,
            mixed_outcomes,
            mixed_treatments,
            mixed_covariates,
        })
    }

    pub fn mixed_row(&self, i: usize) -> &[f64] {
        let d = self.original.dim();
        &self.mixed_covariates[i * d..(i + 1) * d]
    }
}

/// CSV reading options.
#[derive(Debug, Clone, Copy)]
pub struct CsvOptions {
    pub delimiter: u8,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self { delimiter: b',' }
    }
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "na" | "NaN" | "nan" | "null" | "NULL" | ".")
}

/// Loads a sample from a CSV file with a header row. Every column other than
/// the outcome and treatment columns is read as a numeric covariate.
pub fn load_csv(path: impl AsRef<Path>, outcome_col: &str, treatment_col: &str) -> Result<ObservedSample> {
    load_csv_with(path, outcome_col, treatment_col, CsvOptions::default())
}

pub fn load_csv_with(
    path: impl AsRef<Path>,
    outcome_col: &str,
    treatment_col: &str,
    options: CsvOptions,
) -> Result<ObservedSample> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(true)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    };
    let y_col = find(outcome_col)?;
    let z_col = find(treatment_col)?;
    let x_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != y_col && c != z_col).collect();
    let names: Vec<String> = x_cols.iter().map(|&c| headers[c].clone()).collect();

    let mut outcomes = Vec::new();
    let mut treatments = Vec::new();
    let mut covariates = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            if is_missing(raw) {
                return Err(Error::MissingValue {
                    row,
                    column: headers[c].clone(),
                });
            }
            raw.trim().parse::<f64>().map_err(|_| Error::NonNumeric {
                row,
                column: headers[c].clone(),
                value: raw.to_string(),
            })
        };
        outcomes.push(field(y_col)?);
        let raw_z = record.get(z_col).unwrap_or("");
        if is_missing(raw_z) {
            return Err(Error::MissingValue {
                row,
                column: headers[z_col].clone(),
            });
        }
        let z = match raw_z.trim().parse::<f64>() {
            Ok(v) if v == 0.0 => 0u8,
            Ok(v) if v == 1.0 => 1u8,
            _ => {
                return Err(Error::NonBinaryTreatment {
                    row,
                    value: raw_z.to_string(),
                })
            }
        };
        treatments.push(z);
        for &c in &x_cols {
            covariates.push(field(c)?);
        }
    }
    ObservedSample::new(outcomes, treatments, covariates, names)
}

/// Writes a sample as CSV using shortest round-trip float formatting.
pub fn write_csv(
    sample: &ObservedSample,
    path: impl AsRef<Path>,
    outcome_col: &str,
    treatment_col: &str,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec![outcome_col.to_string(), treatment_col.to_string()];
    header.extend(sample.column_names().iter().cloned());
    writer.write_record(&header)?;
    for i in 0..sample.n() {
        let mut rec = Vec::with_capacity(sample.dim() + 2);
        rec.push(sample.outcomes()[i].to_string());
        rec.push(sample.treatments()[i].to_string());
        rec.extend(sample.row(i).iter().map(|x| x.to_string()));
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PropensityRange {
    pub treated_min: f64,
    pub treated_max: f64,
    pub control_min: f64,
    pub control_max: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct OverlapSummary {
    pub n: usize,
    pub n_treated: usize,
    pub pi_hat: f64,
    pub column_names: Vec<String>,
    pub treated_means: Vec<f64>,
    pub control_means: Vec<f64>,
    pub propensity_range: Option<PropensityRange>,
}

/// Group sizes, covariate means by arm and, given a fit, the range of fitted
/// propensities in each arm.
pub fn summarize(sample: &ObservedSample, fit: Option<&PropensityFit>) -> OverlapSummary {
    let d = sample.dim();
    let mut treated_means = vec![0.0; d];
    let mut control_means = vec![0.0; d];
    let n_treated = sample.n_treated();
    let n_control = sample.n() - n_treated;
    for i in 0..sample.n() {
        let target = if sample.is_treated(i) {
            &mut treated_means
        } else {
            &mut control_means
        };
        for (m, x) in target.iter_mut().zip(sample.row(i)) {
            *m += x;
        }
    }
    treated_means.iter_mut().for_each(|m| *m /= n_treated as f64);
    control_means.iter_mut().for_each(|m| *m /= n_control as f64);

    let propensity_range = fit.map(|f| {
        let mut r = PropensityRange {
            treated_min: f64::INFINITY,
            treated_max: f64::NEG_INFINITY,
            control_min: f64::INFINITY,
            control_max: f64::NEG_INFINITY,
        };
        for (i, &e) in f.fitted_probs.iter().enumerate() {
            if sample.is_treated(i) {
                r.treated_min = r.treated_min.min(e);
                r.treated_max = r.treated_max.max(e);
            } else {
                r.control_min = r.control_min.min(e);
                r.control_max = r.control_max.max(e);
            }
        }
        r
    });

    OverlapSummary {
        n: sample.n(),
        n_treated,
        pi_hat: n_treated as f64 / sample.n() as f64,
        column_names: sample.column_names().to_vec(),
        treated_means,
        control_means,
        propensity_range,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn toy() -> ObservedSample {
        ObservedSample::new(
            vec![2.0, 4.0, 1.0, 3.0],
            vec![1, 1, 0, 0],
            vec![0.5, 1.5, 1.0, 3.0],
            vec!["x".into()],
        )
        .unwrap()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_four_rows() {
        let f = write_tmp("y,z,x\n2,1,0.5\n4,1,1.5\n1,0,1\n3,0,3\n");
        let s = load_csv(f.path(), "y", "z").unwrap();
        assert_eq!(s.n(), 4);
        assert_eq!(s.n_treated(), 2);
        assert_eq!(s, toy());
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let f = write_tmp("y,z,x1\n2,1,0.5\n4,2,1.5\n1,0,1\n");
        let err = load_csv(f.path(), "y", "z").unwrap_err();
        assert!(matches!(err, Error::NonBinaryTreatment { row: 1, .. }));
        assert!(err.to_string().contains("non-binary treatment"));
    }

    #[test]
    fn rejects_boolean_treatment() {
        let f = write_tmp("y,z,x1\n2,true,0.5\n4,false,1.5\n");
        assert!(matches!(
            load_csv(f.path(), "y", "z"),
            Err(Error::NonBinaryTreatment { .. })
        ));
    }

    #[test]
    fn rejects_missing_with_location() {
        let f = write_tmp("y,z,x1\n2,1,0.5\n4,1,NA\n1,0,1\n");
        match load_csv(f.path(), "y", "z") {
            Err(Error::MissingValue { row, column }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "x1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_single_class() {
        let f = write_tmp("y,z,x1\n2,1,0.5\n4,1,1.5\n");
        let err = load_csv(f.path(), "y", "z").unwrap_err();
        assert_eq!(err.to_string(), "no control units");
        let f = write_tmp("y,z,x1\n2,0,0.5\n4,0,1.5\n");
        assert_eq!(load_csv(f.path(), "y", "z").unwrap_err().to_string(), "no treated units");
    }

    #[test]
    fn unknown_column() {
        let f = write_tmp("y,z,x1\n2,1,0.5\n4,0,1.5\n");
        assert!(matches!(load_csv(f.path(), "y", "t"), Err(Error::UnknownColumn(_))));
    }

    #[test]
    fn semicolon_delimiter() {
        let f = write_tmp("y;z;x1\n2;1;0.5\n4;0;1.5\n");
        let s = load_csv_with(f.path(), "y", "z", CsvOptions { delimiter: b';' }).unwrap();
        assert_eq!(s.n(), 2);
    }

    #[test]
    fn summary_counts_and_means() {
        let s = toy();
        let sum = summarize(&s, None);
        assert_eq!(sum.pi_hat, 0.5);
        assert_eq!(sum.control_means, vec![2.0]);
        assert_eq!(sum.treated_means, vec![1.0]);
        assert_eq!((sum.pi_hat * sum.n as f64) as usize, sum.n_treated);
    }

    #[test]
    fn augmented_rejects_modified_control_rows() {
        let s = toy();
        let mut x = s.covariates().to_vec();
        x[2] = 9.0;
        let err = AugmentedSample::new(&s, s.outcomes().to_vec(), s.treatments().to_vec(), x);
        assert!(err.is_err());
        let mut x = s.covariates().to_vec();
        x[0] = 9.0;
        assert!(AugmentedSample::new(&s, s.outcomes().to_vec(), s.treatments().to_vec(), x).is_ok());
    }

    #[test]
    fn rank_deficiency_detected() {
        let s = ObservedSample::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![1, 0, 1, 0],
            vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 4.0, 8.0],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert!(!s.check_rank());
        assert!(toy().check_rank());
    }
}
