//! Single-dipole scans: the standard scan against `A0`, and the scan that
//! also estimates the leading approximation-error coefficients `alpha` at
//! every location, followed by the linear-Gaussian skull-conductivity
//! estimate at the winning location.
//!
//! Data, lead fields and error samples are all average referenced, so every
//! covariance is inverted on the zero-sum subspace only.

use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baestats::{provenance_hash, ErrorStats, StatsLibrary};
use crate::error::{Error, Result};
use crate::fem::LeadField;
use crate::headmesh::Point;
use crate::linalg::{average_reference_projector, zero_mean_basis};

/// Gaussian measurement noise `e ~ N(mean, covariance)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl NoiseModel {
    /// Zero-mean noise of standard deviation `zeta` per electrode, average
    /// referenced: covariance `zeta^2 (I - 11^T/m)`.
    pub fn white(m: usize, zeta: f64) -> Self {
        Self {
            mean: DVector::zeros(m),
            covariance: average_reference_projector(m) * (zeta * zeta),
        }
    }

    fn check(&self, m: usize) -> Result<()> {
        if self.mean.len() != m || self.covariance.shape() != (m, m) {
            return Err(Error::Dimension(format!("noise model does not match {m} electrodes")));
        }
        Ok(())
    }
}

/// `L` with `L^T L` the inverse of a covariance restricted to the zero-sum
/// subspace: `L = C^{-1} U^T`, where `U` spans the subspace and
/// `C C^T = U^T Gamma U`.
#[derive(Clone, Debug, PartialEq)]
pub struct Whitener {
    pub matrix: DMatrix<f64>,
}

impl Whitener {
    pub fn new(covariance: &DMatrix<f64>) -> Result<Self> {
        let m = covariance.nrows();
        let u = zero_mean_basis(m);
        let g = u.tr_mul(covariance) * &u;
        let g = (&g + g.transpose()) * 0.5;
        let chol = g
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance is not positive definite on the zero-mean subspace".into()))?;
        let c = chol.l();
        let matrix = c
            .solve_lower_triangular(&u.transpose())
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        Ok(Self { matrix })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.matrix * x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanMethod {
    Standard,
    Bae,
}

impl FromStr for ScanMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "bae" => Ok(Self::Bae),
            other => Err(Error::Input(format!(
                "unknown scan method {other:?} (expected standard or bae)"
            ))),
        }
    }
}

impl std::fmt::Display for ScanMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::Bae => "bae",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub method: ScanMethod,
    pub winner: usize,
    /// Winning source position, meters.
    pub position: Point,
    pub moment: [f64; 2],
    pub alpha: Vec<f64>,
    pub sigma_estimate: Option<f64>,
    /// `sigma_estimate` minus the prior mean.
    pub sigma_increment: Option<f64>,
    pub functional_minimum: f64,
    /// Locations whose lead-field block was rank deficient.
    pub skipped: Vec<usize>,
    /// Per-location functional, infinite for skipped locations.
    pub functional_values: Vec<f64>,
}

impl ScanResult {
    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Input(format!("cannot serialize scan result: {e}")))
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Least-squares fit at one location.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationFit {
    pub moment: [f64; 2],
    pub alpha: DVector<f64>,
    pub functional: f64,
}

/// Minimizes `|L(y - A d - W alpha)|^2 + sum_k alpha_k^2 / lambda_k` over
/// `(d, alpha)`. Coefficients with zero prior variance are pinned to zero.
/// `None` when the whitened 2-column block is rank deficient.
pub fn fit_location(
    whitener: &Whitener,
    block: &DMatrix<f64>,
    w: &DMatrix<f64>,
    alpha_var: &[f64],
    y: &DVector<f64>,
) -> Option<LocationFit> {
    let l = &whitener.matrix;
    let la = l * block;
    let sv = la.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smax > 0.0) || smin <= 1e-10 * smax {
        return None;
    }
    let free: Vec<usize> = (0..alpha_var.len()).filter(|&k| alpha_var[k] > 0.0).collect();
    let rows = l.nrows();
    let cols = 2 + free.len();
    let mut m = DMatrix::zeros(rows + free.len(), cols);
    m.view_mut((0, 0), (rows, 2)).copy_from(&la);
    for (c, &k) in free.iter().enumerate() {
        m.view_mut((0, 2 + c), (rows, 1)).copy_from(&(l * w.column(k)));
        m[(rows + c, 2 + c)] = 1.0 / alpha_var[k].sqrt();
    }
    let ly = l * y;
    let mut rhs = DVector::zeros(rows + free.len());
    rhs.rows_mut(0, rows).copy_from(&ly);

    let svd = m.svd(true, true);
    let tol = 1e-13 * svd.singular_values.max();
    let x = svd.solve(&rhs, tol).ok()?;
    let moment = [x[0], x[1]];
    let mut alpha = DVector::zeros(alpha_var.len());
    for (c, &k) in free.iter().enumerate() {
        alpha[k] = x[2 + c];
    }
    let residual = y - block * DVector::from_column_slice(&moment) - w * &alpha;
    let misfit = (l * residual).norm_squared();
    let penalty: f64 = free.iter().map(|&k| alpha[k] * alpha[k] / alpha_var[k]).sum();
    Some(LocationFit {
        moment,
        alpha,
        functional: misfit + penalty,
    })
}

/// Lowest value wins, ties go to the lowest index.
fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

fn check_data(v: &DVector<f64>, standard: &LeadField, noise: &NoiseModel) -> Result<()> {
    let m = standard.electrode_count();
    if v.len() != m {
        return Err(Error::Dimension(format!(
            "data has {} entries, lead field has {m} electrodes",
            v.len()
        )));
    }
    noise.check(m)
}

pub fn standard_scan(v: &DVector<f64>, standard: &LeadField, noise: &NoiseModel) -> Result<ScanResult> {
    check_data(v, standard, noise)?;
    let whitener = Whitener::new(&noise.covariance)?;
    let y = v - &noise.mean;
    let m = standard.electrode_count();
    let empty = DMatrix::zeros(m, 0);
    let fits: Vec<Option<LocationFit>> = (0..standard.source_count())
        .into_par_iter()
        .map(|i| fit_location(&whitener, &standard.block(i), &empty, &[], &y))
        .collect();
    assemble(ScanMethod::Standard, standard, fits, |_, _| Ok((None, None)))
}

fn assemble(
    method: ScanMethod,
    standard: &LeadField,
    fits: Vec<Option<LocationFit>>,
    sigma: impl Fn(usize, &LocationFit) -> Result<(Option<f64>, Option<f64>)>,
) -> Result<ScanResult> {
    let mut skipped = Vec::new();
    let values: Vec<f64> = fits
        .iter()
        .enumerate()
        .map(|(i, f)| match f {
            Some(f) => f.functional,
            None => {
                skipped.push(i);
                f64::INFINITY
            }
        })
        .collect();
    if !skipped.is_empty() {
        log::warn!("{method} scan skipped {} rank-deficient locations", skipped.len());
    }
    let winner = argmin(&values).ok_or_else(|| Error::Numerical("no location could be fitted".into()))?;
    let fit = fits[winner].as_ref().expect("winner was fitted");
    let (sigma_estimate, sigma_increment) = sigma(winner, fit)?;
    Ok(ScanResult {
        method,
        winner,
        position: standard.source_positions[winner],
        moment: fit.moment,
        alpha: fit.alpha.iter().copied().collect(),
        sigma_estimate,
        sigma_increment,
        functional_minimum: values[winner],
        skipped,
        functional_values: values,
    })
}

/// A statistics library checked against the standard lead field it
/// will be used with.
pub struct BaeScanner<'a> {
    standard: &'a LeadField,
    stats: &'a StatsLibrary,
}

impl<'a> BaeScanner<'a> {
    pub fn new(standard: &'a LeadField, stats: &'a StatsLibrary) -> Result<Self> {
        let found = provenance_hash(standard, stats.metadata.sigma0);
        if found != stats.metadata.provenance {
            return Err(Error::ProvenanceMismatch {
                expected: stats.metadata.provenance.clone(),
                found,
            });
        }
        if stats.entries.len() != standard.source_count() || stats.electrode_count() != standard.electrode_count() {
            return Err(Error::Dimension(format!(
                "statistics cover {} locations x {} electrodes, lead field {} x {}",
                stats.entries.len(),
                stats.electrode_count(),
                standard.source_count(),
                standard.electrode_count()
            )));
        }
        Ok(Self { standard, stats })
    }

    /// Augmented fit at location `i`.
    pub fn fit(&self, i: usize, v: &DVector<f64>, noise: &NoiseModel) -> Result<Option<LocationFit>> {
        let e = &self.stats.entries[i];
        let whitener = Whitener::new(&(e.residual_covariance() + &noise.covariance))?;
        let y = v - &e.eps_mean - &noise.mean;
        Ok(fit_location(
            &whitener,
            &self.standard.block(i),
            &e.w(),
            e.alpha_variances(),
            &y,
        ))
    }

    pub fn scan(&self, v: &DVector<f64>, noise: &NoiseModel) -> Result<ScanResult> {
        check_data(v, self.standard, noise)?;
        let fits = (0..self.standard.source_count())
            .into_par_iter()
            .map(|i| self.fit(i, v, noise))
            .collect::<Result<Vec<_>>>()?;
        let prior_mean = self.stats.metadata.prior.mean;
        assemble(
            ScanMethod::Bae,
            self.standard,
            fits,
            |winner, fit| match estimate_conductivity(&fit.alpha, &self.stats.entries[winner], prior_mean) {
                Ok(est) => Ok((Some(est.value), Some(est.increment))),
                Err(Error::DegenerateStatistics(msg)) => {
                    log::warn!("no conductivity estimate at location {winner}: {msg}");
                    Ok((None, None))
                }
                Err(e) => Err(e),
            },
        )
    }
}

pub fn bae_scan(
    v: &DVector<f64>,
    standard: &LeadField,
    stats: &StatsLibrary,
    noise: &NoiseModel,
) -> Result<ScanResult> {
    BaeScanner::new(standard, stats)?.scan(v, noise)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConductivityEstimate {
    pub value: f64,
    pub increment: f64,
}

/// `sigma_hat = prior_mean + sum_k cross_cov_k alpha_k / lambda_k`.
pub fn estimate_conductivity(
    alpha: &DVector<f64>,
    stats: &ErrorStats,
    prior_mean: f64,
) -> Result<ConductivityEstimate> {
    if alpha.len() != stats.p || stats.cross_cov.len() != stats.p {
        return Err(Error::Dimension(format!(
            "expected {} coefficients, got {}",
            stats.p,
            alpha.len()
        )));
    }
    let mut increment = 0.0;
    for k in 0..stats.p {
        let lambda = stats.eigvals[k];
        if !(lambda > 0.0) {
            return Err(Error::DegenerateStatistics(format!(
                "eigenvalue {} of the kept block is {lambda}",
                k + 1
            )));
        }
        increment += stats.cross_cov[k] * alpha[k] / lambda;
    }
    Ok(ConductivityEstimate {
        value: prior_mean + increment,
        increment,
    })
}
