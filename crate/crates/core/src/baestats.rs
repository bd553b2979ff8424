//! Monte-Carlo statistics of the approximation error `eps = A(sigma) d - A0 d`
//! at every source location.
//!
//! Samples are generated on a crossed design: a list of sample head models
//! (skull conductivities) times a list of dipole amplitudes `a_s` along the
//! radial direction, sample `j = s + S*k`. Because `eps_j = a_s * delta_k` with
//! `delta_k = (A_k - A0) r`, mean, covariance and the conductivity
//! cross-covariance have closed forms in the `delta_k`, so the library never
//! materializes the `S*K` samples. The explicit per-sample route is kept for
//! diagnostics and tests.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{hex_digest, ByteReader, Conductivity, LeadField, LeadFieldBuilder};
use crate::headmesh::radial_direction;
use crate::linalg::sorted_symmetric_eigen;
use crate::rng::{substream, Domain};

/// Gaussian prior on the skull conductivity (S/m).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConductivityPrior {
    pub mean: f64,
    pub std: f64,
    /// Draws below this are raised to it.
    pub lower_clip: f64,
}

impl Default for ConductivityPrior {
    fn default() -> Self {
        Self {
            mean: 0.0073,
            std: 0.0013,
            lower_clip: 1e-4,
        }
    }
}

impl ConductivityPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean.is_finite() && self.mean > 0.0) {
            return Err(Error::Config(format!("prior.mean must be positive, got {}", self.mean)));
        }
        if !(self.std.is_finite() && self.std > 0.0) {
            return Err(Error::Config(format!("prior.std must be positive, got {}", self.std)));
        }
        if !(self.lower_clip.is_finite() && self.lower_clip > 0.0) {
            return Err(Error::Config(format!(
                "prior.lower_clip must be positive, got {}",
                self.lower_clip
            )));
        }
        Ok(())
    }
}

/// Gaussian prior on the dimensionless amplitude of a unit radial moment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmplitudePrior {
    pub mean: f64,
    pub std: f64,
}

impl Default for AmplitudePrior {
    fn default() -> Self {
        Self { mean: 1.0, std: 0.01 }
    }
}

impl AmplitudePrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean.is_finite() && self.std.is_finite() && self.std > 0.0) {
            return Err(Error::Config(format!(
                "amplitude prior needs finite mean and positive std, got ({}, {})",
                self.mean, self.std
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<f64> {
        let normal = Normal::new(self.mean, self.std).expect("validated prior");
        (0..count).map(|_| normal.sample(rng)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConductivitySamples {
    pub values: Vec<f64>,
    /// Draws that fell below `lower_clip` and were raised to it.
    pub clipped: usize,
}

pub fn sample_conductivities(prior: &ConductivityPrior, count: usize, master_seed: u64) -> Result<ConductivitySamples> {
    prior.validate()?;
    if count < 2 {
        return Err(Error::Input(format!(
            "need at least two conductivity samples, got {count}"
        )));
    }
    let normal = Normal::new(prior.mean, prior.std).expect("validated prior");
    let mut rng = substream(master_seed, Domain::Conductivity, 0);
    let mut clipped = 0;
    let values = (0..count)
        .map(|_| {
            let s: f64 = normal.sample(&mut rng);
            if s < prior.lower_clip {
                clipped += 1;
                prior.lower_clip
            } else {
                s
            }
        })
        .collect();
    Ok(ConductivitySamples { values, clipped })
}

/// One lead field per skull conductivity, other compartments fixed.
pub fn compute_sample_lead_fields(
    builder: &LeadFieldBuilder,
    base: &Conductivity,
    skull: &[f64],
) -> Result<Vec<LeadField>> {
    skull.par_iter().map(|&s| builder.build(&base.with_skull(s))).collect()
}

/// Sample head models bundled with the conductivities that generated them.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleLeadFields {
    pub skull: Vec<f64>,
    pub lead_fields: Vec<LeadField>,
    /// Provenance of the standard lead field these samples pair with.
    pub standard_provenance: String,
}

const SAMPLES_MAGIC: &[u8; 8] = b"SKBAE-SL";
const SAMPLES_VERSION: u32 = 1;

impl SampleLeadFields {
    /// ```text
    /// 0    8   magic "SKBAE-SL"
    /// 8    4   version (u32) = 1
    /// 12   4   reserved
    /// 16   8   K (u64)
    /// 24   64  standard provenance, ASCII hex
    /// 88   8K  skull conductivities (f64)
    /// ...      K times: byte length (u64), lead-field file image
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SAMPLES_MAGIC);
        out.extend_from_slice(&SAMPLES_VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(self.skull.len() as u64).to_le_bytes());
        let mut tag = [b'0'; 64];
        let hash = self.standard_provenance.as_bytes();
        tag[..hash.len().min(64)].copy_from_slice(&hash[..hash.len().min(64)]);
        out.extend_from_slice(&tag);
        for s in &self.skull {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for lf in &self.lead_fields {
            let bytes = lf.to_bytes();
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        if r.take(8)? != SAMPLES_MAGIC {
            return Err(Error::format(path, "not a sample lead-field file (bad magic)"));
        }
        let version = r.u32()?;
        if version != SAMPLES_VERSION {
            return Err(Error::Version {
                path: path.into(),
                found: version,
                expected: SAMPLES_VERSION,
            });
        }
        r.u32()?;
        let k = r.u64()? as usize;
        let tag = r.take(64)?;
        let standard_provenance =
            String::from_utf8(tag.to_vec()).map_err(|_| Error::format(path, "bad provenance tag"))?;
        let skull = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let mut lead_fields = Vec::with_capacity(k);
        for _ in 0..k {
            let len = r.u64()? as usize;
            lead_fields.push(LeadField::from_bytes(r.take(len)?, path)?);
        }
        if !r.at_end() {
            return Err(Error::format(path, "trailing bytes after last sample"));
        }
        Ok(Self {
            skull,
            lead_fields,
            standard_provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Identifies a standard lead field together with the skull conductivity it
/// was built for.
pub fn provenance_hash(standard: &LeadField, sigma0: f64) -> String {
    let mut bytes = standard.to_bytes();
    bytes.extend_from_slice(&sigma0.to_le_bytes());
    hex_digest(&bytes)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Every sample model crossed with every amplitude.
    #[default]
    Exhaustive,
    /// `models_per_location` models drawn with replacement per location,
    /// crossed with every amplitude.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub amplitude: AmplitudePrior,
    /// S, amplitude draws per location.
    pub amplitude_samples: usize,
    pub pairing: Pairing,
    /// Only used with `Pairing::Random`.
    pub models_per_location: usize,
    pub energy_threshold: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            amplitude: AmplitudePrior::default(),
            amplitude_samples: 1000,
            pairing: Pairing::Exhaustive,
            models_per_location: 200,
            energy_threshold: 0.85,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        self.amplitude.validate()?;
        if self.amplitude_samples == 0 {
            return Err(Error::Config("sampling.amplitude_samples must be at least 1".into()));
        }
        if self.pairing == Pairing::Random && self.models_per_location == 0 {
            return Err(Error::Config("sampling.models_per_location must be at least 1".into()));
        }
        if !(self.energy_threshold > 0.0 && self.energy_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "sampling.energy_threshold must lie in (0, 1], got {}",
                self.energy_threshold
            )));
        }
        Ok(())
    }
}

/// Models and amplitudes crossed at one location.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDesign {
    pub models: Vec<usize>,
    pub amplitudes: Vec<f64>,
}

impl SampleDesign {
    pub fn len(&self) -> usize {
        self.models.len() * self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn sample_design(location: usize, model_count: usize, config: &SamplingConfig, master_seed: u64) -> SampleDesign {
    let mut rng = substream(master_seed, Domain::Location, location as u64);
    let models = match config.pairing {
        Pairing::Exhaustive => (0..model_count).collect(),
        Pairing::Random => (0..config.models_per_location)
            .map(|_| rng.random_range(0..model_count))
            .collect(),
    };
    let amplitudes = config.amplitude.sample(config.amplitude_samples, &mut rng);
    SampleDesign { models, amplitudes }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSamples {
    pub eps: Vec<DVector<f64>>,
    /// Skull conductivity behind each sample.
    pub sigma: Vec<f64>,
}

/// Explicit samples `eps_j = A_k (a_s r) - A0 (a_s r)` with `j = s + S*k`.
pub fn compute_error_samples(
    location: usize,
    samples: &SampleLeadFields,
    standard: &LeadField,
    design: &SampleDesign,
) -> Result<ErrorSamples> {
    if samples.lead_fields.is_empty() {
        return Err(Error::Config("no sample lead fields".into()));
    }
    if location >= standard.source_count() {
        return Err(Error::Dimension(format!(
            "location {location} outside the source space"
        )));
    }
    let r = radial_direction(standard.source_positions[location]);
    let mut eps = Vec::with_capacity(design.len());
    let mut sigma = Vec::with_capacity(design.len());
    for &k in &design.models {
        let lf = samples
            .lead_fields
            .get(k)
            .ok_or_else(|| Error::Dimension(format!("sample model {k} does not exist")))?;
        check_same_shape(lf, standard)?;
        for &a in &design.amplitudes {
            let d = [a * r[0], a * r[1]];
            eps.push(lf.oriented_response(location, d) - standard.oriented_response(location, d));
            sigma.push(samples.skull[k]);
        }
    }
    Ok(ErrorSamples { eps, sigma })
}

fn check_same_shape(a: &LeadField, b: &LeadField) -> Result<()> {
    if a.matrix.shape() != b.matrix.shape() {
        return Err(Error::Dimension(format!(
            "lead field shapes differ: {:?} vs {:?}",
            a.matrix.shape(),
            b.matrix.shape()
        )));
    }
    Ok(())
}

/// Sample mean and unbiased (1/(J-1)) covariance.
pub fn compute_statistics(samples: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let j = samples.len();
    if j < 2 {
        return Err(Error::DegenerateStatistics(format!(
            "need at least two samples, got {j}"
        )));
    }
    let m = samples[0].len();
    if samples.iter().any(|s| s.len() != m) {
        return Err(Error::Dimension("samples have different lengths".into()));
    }
    let mut mean = DVector::zeros(m);
    for s in samples {
        mean += s;
    }
    mean /= j as f64;
    let mut cov = DMatrix::zeros(m, m);
    for s in samples {
        let c = s - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (j - 1) as f64;
    Ok((mean, cov))
}

/// Spectral decomposition plus the energy-rule truncation order.
#[derive(Clone, Debug, PartialEq)]
pub struct Truncation {
    pub eigvals: DVector<f64>,
    pub eigvecs: DMatrix<f64>,
    pub p: usize,
}

impl Truncation {
    pub fn w(&self) -> DMatrix<f64> {
        self.eigvecs.columns(0, self.p).clone_owned()
    }
}

/// Smallest `p` whose leading eigenvalues hold `threshold` of the total.
/// Zero total energy gives `p = 0`; a threshold of one keeps every mode.
pub fn truncation_order(eigvals: &DVector<f64>, threshold: f64) -> usize {
    let m = eigvals.len();
    let total: f64 = eigvals.iter().sum();
    if !(total > 0.0) {
        return 0;
    }
    if threshold >= 1.0 {
        return m;
    }
    let mut acc = 0.0;
    for (k, &l) in eigvals.iter().enumerate() {
        acc += l;
        if acc / total >= threshold {
            return k + 1;
        }
    }
    m
}

pub fn eigendecompose_truncate(covariance: &DMatrix<f64>, threshold: f64) -> Result<Truncation> {
    let (mut eigvals, eigvecs) = sorted_symmetric_eigen(covariance)?;
    let top = eigvals.iter().cloned().fold(0.0, f64::max);
    for l in eigvals.iter_mut() {
        if *l < 0.0 {
            if *l < -1e-12 * top {
                log::debug!("clamping eigenvalue {l:e} (largest {top:e})");
            }
            *l = 0.0;
        }
    }
    let p = truncation_order(&eigvals, threshold);
    Ok(Truncation { eigvals, eigvecs, p })
}

/// Coefficients `alpha = W^T (eps - eps_*)` and residuals
/// `eps'' = Q Q^T (eps - eps_*)`, Q the trailing eigenvectors.
pub fn compute_alpha_samples(
    samples: &[DVector<f64>],
    eps_mean: &DVector<f64>,
    truncation: &Truncation,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let m = eps_mean.len();
    if truncation.eigvecs.nrows() != m {
        return Err(Error::Dimension(format!(
            "eigenvectors have {} rows, samples have {m}",
            truncation.eigvecs.nrows()
        )));
    }
    let w = truncation.w();
    let q = truncation.eigvecs.columns(truncation.p, m - truncation.p);
    let mut alphas = Vec::with_capacity(samples.len());
    let mut residuals = Vec::with_capacity(samples.len());
    for s in samples {
        if s.len() != m {
            return Err(Error::Dimension("sample length differs from mean".into()));
        }
        let c = s - eps_mean;
        alphas.push(w.tr_mul(&c));
        residuals.push(q * q.tr_mul(&c));
    }
    Ok((alphas, residuals))
}

/// Unbiased cross-covariance between the scalar `sigma` and each component
/// of `alpha`.
pub fn compute_cross_covariance(sigma: &[f64], alphas: &[DVector<f64>]) -> Result<DVector<f64>> {
    if sigma.len() != alphas.len() {
        return Err(Error::Dimension(format!(
            "{} conductivities but {} coefficient samples",
            sigma.len(),
            alphas.len()
        )));
    }
    let j = sigma.len();
    if j < 2 {
        return Err(Error::DegenerateStatistics(format!(
            "need at least two samples, got {j}"
        )));
    }
    let p = alphas[0].len();
    let sigma_mean = sigma.iter().sum::<f64>() / j as f64;
    let mut alpha_mean = DVector::zeros(p);
    for a in alphas {
        alpha_mean += a;
    }
    alpha_mean /= j as f64;
    let mut cross = DVector::zeros(p);
    for (s, a) in sigma.iter().zip(alphas) {
        cross += (a - &alpha_mean) * (s - sigma_mean);
    }
    Ok(cross / (j - 1) as f64)
}

/// Approximation-error statistics at one source location.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorStats {
    pub eps_mean: DVector<f64>,
    /// Descending, nonnegative.
    pub eigvals: DVector<f64>,
    /// Orthonormal columns; the first `p` form W, the rest Q.
    pub eigvecs: DMatrix<f64>,
    pub p: usize,
    /// Cross-covariance of skull conductivity with the `p` coefficients.
    pub cross_cov: DVector<f64>,
    /// (number of models, number of amplitudes).
    pub sample_counts: (usize, usize),
}

impl ErrorStats {
    pub fn w(&self) -> DMatrix<f64> {
        self.eigvecs.columns(0, self.p).clone_owned()
    }

    pub fn q(&self) -> DMatrix<f64> {
        let m = self.eigvecs.nrows();
        self.eigvecs.columns(self.p, m - self.p).clone_owned()
    }

    /// `sum_{k>p} lambda_k w_k w_k^T`.
    pub fn residual_covariance(&self) -> DMatrix<f64> {
        let m = self.eigvecs.nrows();
        let mut g = DMatrix::zeros(m, m);
        for k in self.p..m {
            let w = self.eigvecs.column(k);
            g.ger(self.eigvals[k], &w, &w, 1.0);
        }
        g
    }

    pub fn alpha_variances(&self) -> &[f64] {
        &self.eigvals.as_slice()[..self.p]
    }
}

/// Radial-dipole responses of the standard and sample models, m x n each.
pub struct RadialResponses {
    pub standard: DMatrix<f64>,
    pub samples: Vec<DMatrix<f64>>,
}

fn radial_responses(lf: &LeadField) -> DMatrix<f64> {
    let m = lf.electrode_count();
    let n = lf.source_count();
    let mut out = DMatrix::zeros(m, n);
    for i in 0..n {
        out.set_column(i, &lf.oriented_response(i, radial_direction(lf.source_positions[i])));
    }
    out
}

impl RadialResponses {
    pub fn new(standard: &LeadField, samples: &SampleLeadFields) -> Result<Self> {
        for lf in &samples.lead_fields {
            check_same_shape(lf, standard)?;
            if lf.source_positions != standard.source_positions {
                return Err(Error::Input("sample lead fields use a different source space".into()));
            }
        }
        Ok(Self {
            standard: radial_responses(standard),
            samples: samples.lead_fields.par_iter().map(radial_responses).collect(),
        })
    }

    /// `(A_k - A0) r_i`.
    pub fn delta(&self, model: usize, location: usize) -> DVector<f64> {
        self.samples[model].column(location) - self.standard.column(location)
    }
}

/// Statistics at one location from the closed-form crossed-design moments.
///
/// With `eps_{s,k} = a_s delta_k`, centered deltas `X` and `J = S K`:
/// mean `a_bar delta_bar`, covariance
/// `[sum a^2 X X^T + K sum (a - a_bar)^2 delta_bar delta_bar^T] / (J - 1)`
/// and sigma/eps cross-covariance `S a_bar X (sigma - sigma_bar) / (J - 1)`.
pub fn location_stats(
    responses: &RadialResponses,
    skull: &[f64],
    location: usize,
    design: &SampleDesign,
    threshold: f64,
) -> Result<ErrorStats> {
    let k = design.models.len();
    let s = design.amplitudes.len();
    let j = k * s;
    if j < 2 {
        return Err(Error::DegenerateStatistics(format!(
            "need at least two samples, got {j}"
        )));
    }
    let m = responses.standard.nrows();
    let mut x = DMatrix::zeros(m, k);
    for (c, &model) in design.models.iter().enumerate() {
        x.set_column(c, &responses.delta(model, location));
    }
    let delta_bar = x.column_mean();
    for mut col in x.column_iter_mut() {
        col -= &delta_bar;
    }
    let a_bar = design.amplitudes.iter().sum::<f64>() / s as f64;
    let sum_a2: f64 = design.amplitudes.iter().map(|a| a * a).sum();
    let sum_da2: f64 = design.amplitudes.iter().map(|a| (a - a_bar).powi(2)).sum();
    let denom = (j - 1) as f64;

    let mut cov = &x * x.transpose() * sum_a2;
    cov.ger(k as f64 * sum_da2, &delta_bar, &delta_bar, 1.0);
    cov /= denom;

    let sig: Vec<f64> = design.models.iter().map(|&i| skull[i]).collect();
    let sig_bar = sig.iter().sum::<f64>() / k as f64;
    let centered = DVector::from_iterator(k, sig.iter().map(|v| v - sig_bar));
    let cross_eps = &x * centered * (s as f64 * a_bar / denom);

    let t = eigendecompose_truncate(&cov, threshold)?;
    let cross_cov = t.w().tr_mul(&cross_eps);
    Ok(ErrorStats {
        eps_mean: delta_bar * a_bar,
        eigvals: t.eigvals,
        eigvecs: t.eigvecs,
        p: t.p,
        cross_cov,
        sample_counts: (k, s),
    })
}

/// Everything needed to interpret a statistics library.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsMetadata {
    pub sigma0: f64,
    pub prior: ConductivityPrior,
    pub sampling: SamplingConfig,
    pub model_count: usize,
    pub clipped_conductivities: usize,
    pub master_seed: u64,
    /// `provenance_hash` of the standard lead field.
    pub provenance: String,
    /// Resolved pipeline configuration, when built by the pipeline.
    #[serde(default)]
    pub config: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsLibrary {
    pub threshold: f64,
    pub entries: Vec<ErrorStats>,
    pub metadata: StatsMetadata,
}

pub struct StatsInputs<'a> {
    pub standard: &'a LeadField,
    pub samples: &'a SampleLeadFields,
    pub sigma0: f64,
    pub prior: ConductivityPrior,
    pub clipped_conductivities: usize,
    pub sampling: SamplingConfig,
    pub master_seed: u64,
}

pub fn build_stats_library(inputs: &StatsInputs) -> Result<StatsLibrary> {
    inputs.sampling.validate()?;
    let provenance = provenance_hash(inputs.standard, inputs.sigma0);
    if inputs.samples.standard_provenance != provenance {
        return Err(Error::ProvenanceMismatch {
            expected: provenance,
            found: inputs.samples.standard_provenance.clone(),
        });
    }
    let k = inputs.samples.lead_fields.len();
    if k == 0 {
        return Err(Error::Config("no sample lead fields".into()));
    }
    let responses = RadialResponses::new(inputs.standard, inputs.samples)?;
    let n = inputs.standard.source_count();
    let threshold = inputs.sampling.energy_threshold;
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let design = sample_design(i, k, &inputs.sampling, inputs.master_seed);
            location_stats(&responses, &inputs.samples.skull, i, &design, threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StatsLibrary {
        threshold,
        entries,
        metadata: StatsMetadata {
            sigma0: inputs.sigma0,
            prior: inputs.prior,
            sampling: inputs.sampling,
            model_count: k,
            clipped_conductivities: inputs.clipped_conductivities,
            master_seed: inputs.master_seed,
            provenance,
            config: None,
        },
    })
}

const STATS_MAGIC: &[u8; 8] = b"SKBAE-ST";
const STATS_VERSION: u32 = 1;
const INDEX_OFFSET: usize = 64;

impl StatsLibrary {
    pub fn electrode_count(&self) -> usize {
        self.entries.first().map_or(0, |e| e.eps_mean.len())
    }

    /// Histogram of truncation orders, index = p.
    pub fn p_histogram(&self) -> Vec<usize> {
        let m = self.electrode_count();
        let mut h = vec![0; m + 1];
        for e in &self.entries {
            h[e.p] += 1;
        }
        h
    }

    /// Binary layout, little-endian:
    ///
    /// ```text
    /// 0    8    magic "SKBAE-ST"
    /// 8    4    version (u32) = 1
    /// 12   4    m (u32)
    /// 16   8    n (u64)
    /// 24   8    energy threshold (f64)
    /// 32   8    metadata offset (u64)
    /// 40   8    metadata length (u64)
    /// 48   16   reserved
    /// 64   16n  index: record offset (u64), record length (u64)
    /// ...       records, one per location:
    ///             p, K, S (u64)
    ///             eps_mean (m f64), eigenvalues (m f64),
    ///             eigenvectors (m*m f64, column-major; W is the first p columns),
    ///             cross-covariance (p f64)
    /// ...       metadata, JSON
    /// ```
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = self.electrode_count();
        let n = self.entries.len();
        let mut records = Vec::with_capacity(n);
        for e in &self.entries {
            if e.eps_mean.len() != m || e.eigvecs.shape() != (m, m) || e.cross_cov.len() != e.p {
                return Err(Error::Dimension("inconsistent statistics entry".into()));
            }
            let mut r = Vec::with_capacity(8 * (3 + 2 * m + m * m + e.p));
            for v in [e.p, e.sample_counts.0, e.sample_counts.1] {
                r.extend_from_slice(&(v as u64).to_le_bytes());
            }
            for v in e
                .eps_mean
                .iter()
                .chain(e.eigvals.iter())
                .chain(e.eigvecs.iter())
                .chain(e.cross_cov.iter())
            {
                r.extend_from_slice(&v.to_le_bytes());
            }
            records.push(r);
        }
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| Error::Input(format!("metadata: {e}")))?;

        let mut out = Vec::new();
        out.extend_from_slice(STATS_MAGIC);
        out.extend_from_slice(&STATS_VERSION.to_le_bytes());
        out.extend_from_slice(&(m as u32).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&self.threshold.to_le_bytes());
        let body = INDEX_OFFSET + 16 * n;
        let meta_offset = body + records.iter().map(Vec::len).sum::<usize>();
        out.extend_from_slice(&(meta_offset as u64).to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.resize(INDEX_OFFSET, 0);
        let mut offset = body;
        for r in &records {
            out.extend_from_slice(&(offset as u64).to_le_bytes());
            out.extend_from_slice(&(r.len() as u64).to_le_bytes());
            offset += r.len();
        }
        for r in &records {
            out.extend_from_slice(r);
        }
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        if r.take(8)? != STATS_MAGIC {
            return Err(Error::format(path, "not a statistics file (bad magic)"));
        }
        let version = r.u32()?;
        if version != STATS_VERSION {
            return Err(Error::Version {
                path: path.into(),
                found: version,
                expected: STATS_VERSION,
            });
        }
        let m = r.u32()? as usize;
        let n = r.u64()? as usize;
        let threshold = r.f64()?;
        let meta_offset = r.u64()? as usize;
        let meta_len = r.u64()? as usize;

        r.seek(meta_offset);
        let metadata: StatsMetadata =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::format(path, format!("bad metadata: {e}")))?;

        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            r.seek(INDEX_OFFSET + 16 * i);
            let offset = r.u64()? as usize;
            let len = r.u64()? as usize;
            r.seek(offset);
            let p = r.u64()? as usize;
            let k = r.u64()? as usize;
            let s = r.u64()? as usize;
            if p > m || len != 8 * (3 + 2 * m + m * m + p) {
                return Err(Error::format(path, format!("corrupt record {i}")));
            }
            let mut floats = |count: usize| (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>();
            let eps_mean = DVector::from_vec(floats(m)?);
            let eigvals = DVector::from_vec(floats(m)?);
            let eigvecs = DMatrix::from_vec(m, m, floats(m * m)?);
            let cross_cov = DVector::from_vec(floats(p)?);
            entries.push(ErrorStats {
                eps_mean,
                eigvals,
                eigvecs,
                p,
                cross_cov,
                sample_counts: (k, s),
            });
        }
        Ok(Self {
            threshold,
            entries,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headmesh::{build_head_mesh, build_source_space, place_electrodes, HeadGeometry};
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn conductivity_samples_match_prior() {
        let prior = ConductivityPrior::default();
        let s = sample_conductivities(&prior, 400, 11).unwrap();
        let n = s.values.len() as f64;
        let mean = s.values.iter().sum::<f64>() / n;
        let std = (s.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - 0.0073).abs() < 3.0 * 0.0013 / 20.0, "{mean}");
        assert!((0.0011..=0.0015).contains(&std), "{std}");
        assert_eq!(s.clipped, 0);
        assert_eq!(s, sample_conductivities(&prior, 400, 11).unwrap());
    }

    #[test]
    fn narrow_prior_and_clipping() {
        let narrow = ConductivityPrior {
            std: 1e-15,
            ..Default::default()
        };
        let s = sample_conductivities(&narrow, 10, 1).unwrap();
        assert!(s.values.iter().all(|v| (v - 0.0073).abs() < 1e-12));

        let wide = ConductivityPrior {
            mean: 0.001,
            std: 0.01,
            lower_clip: 1e-4,
        };
        let s = sample_conductivities(&wide, 200, 1).unwrap();
        assert!(s.clipped > 0);
        assert_eq!(s.values.iter().filter(|&&v| v == 1e-4).count(), s.clipped);
        assert!(sample_conductivities(&narrow, 1, 1).is_err());
    }

    #[test]
    fn two_sample_statistics() {
        let (u, v) = (dv(&[1.0, 2.0]), dv(&[3.0, -1.0]));
        let (mean, cov) = compute_statistics(&[u.clone(), v.clone()]).unwrap();
        assert!((mean - (&u + &v) / 2.0).amax() < 1e-15);
        let d = &u - &v;
        assert!((cov - &d * d.transpose() / 2.0).amax() < 1e-15);

        let same = vec![dv(&[1.0, 2.0]); 5];
        assert_eq!(compute_statistics(&same).unwrap().1, DMatrix::zeros(2, 2));
        assert!(compute_statistics(&same[..1]).is_err());
    }

    #[test]
    fn truncation_examples() {
        let t = eigendecompose_truncate(&DMatrix::from_diagonal(&dv(&[9.0, 1.0])), 0.85).unwrap();
        assert_eq!(t.p, 1);
        let t = eigendecompose_truncate(&DMatrix::identity(4, 4), 0.85).unwrap();
        assert_eq!(t.p, 4);
        assert_eq!(truncation_order(&dv(&[0.0, 0.0]), 0.85), 0);
        assert_eq!(truncation_order(&dv(&[5.0, 1.0, 0.0]), 1.0), 3);
    }

    #[test]
    fn hand_cross_covariance() {
        let alphas = vec![dv(&[2.0]), dv(&[4.0]), dv(&[6.0])];
        let c = compute_cross_covariance(&[1.0, 2.0, 3.0], &alphas).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-15);
        let c = compute_cross_covariance(&[5.0; 3], &alphas).unwrap();
        assert_eq!(c[0], 0.0);
        assert!(compute_cross_covariance(&[1.0, 2.0], &alphas).is_err());
    }

    #[test]
    fn alpha_of_mean_and_eigenvector() {
        let cov = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let t = eigendecompose_truncate(&cov, 0.6).unwrap();
        let mean = dv(&[0.1, -0.2, 0.3]);
        let w1 = t.eigvecs.column(0).clone_owned();
        let (alphas, _) = compute_alpha_samples(&[mean.clone(), &mean + &w1], &mean, &t).unwrap();
        assert!(alphas[0].amax() < 1e-15);
        assert!((alphas[1][0] - 1.0).abs() < 1e-12);
        assert!(alphas[1].rows(1, t.p - 1).amax() < 1e-12);
    }

    proptest! {
        #[test]
        fn eigendecomposition_reconstructs(entries in proptest::collection::vec(-1.0f64..1.0, 64)) {
            let a = DMatrix::from_vec(8, 8, entries);
            let sym = &a + a.transpose();
            let (l, v) = sorted_symmetric_eigen(&sym).unwrap();
            let mut rebuilt = DMatrix::zeros(8, 8);
            for k in 0..8 {
                rebuilt.ger(l[k], &v.column(k), &v.column(k), 1.0);
            }
            prop_assert!((rebuilt - &sym).amax() < 1e-10);
            prop_assert!((v.transpose() * &v - DMatrix::identity(8, 8)).amax() < 1e-10);
        }

        #[test]
        fn energy_rule_is_minimal(vals in proptest::collection::vec(0.0f64..10.0, 1..12), threshold in 0.05f64..0.99) {
            let mut sorted = vals.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let l = DVector::from_vec(sorted);
            let total: f64 = l.iter().sum();
            let p = truncation_order(&l, threshold);
            if total > 0.0 {
                let head: f64 = l.rows(0, p).sum();
                prop_assert!(head / total >= threshold);
                if p > 1 {
                    let shorter: f64 = l.rows(0, p - 1).sum();
                    prop_assert!(shorter / total < threshold);
                }
            } else {
                prop_assert_eq!(p, 0);
            }
        }
    }

    struct Fixture {
        standard: LeadField,
        samples: SampleLeadFields,
    }

    fn fixture(skull: Vec<f64>) -> Fixture {
        let g = HeadGeometry::default();
        let mesh = build_head_mesh(&g, 500).unwrap();
        let electrodes = place_electrodes(&mesh, 16).unwrap();
        let mut sources = build_source_space(&mesh, &g).unwrap();
        sources.nodes.truncate(6);
        sources.positions.truncate(6);
        sources.radial_dirs.truncate(6);
        let builder = LeadFieldBuilder::new(&mesh, &electrodes, &sources).unwrap();
        let base = Conductivity::new(0.33, 0.0085, 0.43).unwrap();
        let standard = builder.build(&base).unwrap();
        let lead_fields = compute_sample_lead_fields(&builder, &base, &skull).unwrap();
        let standard_provenance = provenance_hash(&standard, 0.0085);
        Fixture {
            standard,
            samples: SampleLeadFields {
                skull,
                lead_fields,
                standard_provenance,
            },
        }
    }

    #[test]
    fn standard_conductivity_sample_gives_zero_error() {
        let f = fixture(vec![0.0085, 0.0085]);
        assert_eq!(f.samples.lead_fields[0], f.standard);
        let design = SampleDesign {
            models: vec![0, 1],
            amplitudes: vec![1.0, 0.99, 1.02],
        };
        let e = compute_error_samples(2, &f.samples, &f.standard, &design).unwrap();
        assert_eq!(e.eps.len(), 6);
        assert!(e.eps.iter().all(|v| v.amax() <= 1e-10));
    }

    #[test]
    fn error_is_linear_in_amplitude() {
        let f = fixture(vec![0.006, 0.01]);
        let one = SampleDesign {
            models: vec![0, 1],
            amplitudes: vec![0.7],
        };
        let two = SampleDesign {
            models: vec![0, 1],
            amplitudes: vec![1.4],
        };
        let a = compute_error_samples(1, &f.samples, &f.standard, &one).unwrap();
        let b = compute_error_samples(1, &f.samples, &f.standard, &two).unwrap();
        for (x, y) in a.eps.iter().zip(&b.eps) {
            assert!((x * 2.0 - y).amax() <= 1e-14 * y.amax());
        }
        assert_eq!(a.sigma, vec![0.006, 0.01]);
    }

    #[test]
    fn closed_form_matches_explicit_samples() {
        let skull = sample_conductivities(&ConductivityPrior::default(), 12, 5)
            .unwrap()
            .values;
        let f = fixture(skull);
        let responses = RadialResponses::new(&f.standard, &f.samples).unwrap();
        for pairing in [Pairing::Exhaustive, Pairing::Random] {
            let config = SamplingConfig {
                amplitude_samples: 7,
                pairing,
                models_per_location: 9,
                ..Default::default()
            };
            for i in 0..f.standard.source_count() {
                let design = sample_design(i, 12, &config, 3);
                let fast = location_stats(&responses, &f.samples.skull, i, &design, 0.85).unwrap();

                let e = compute_error_samples(i, &f.samples, &f.standard, &design).unwrap();
                let (mean, cov) = compute_statistics(&e.eps).unwrap();
                let t = eigendecompose_truncate(&cov, 0.85).unwrap();
                let (alphas, residuals) = compute_alpha_samples(&e.eps, &mean, &t).unwrap();
                let cross = compute_cross_covariance(&e.sigma, &alphas).unwrap();

                let scale = cov.amax();
                assert!((&fast.eps_mean - &mean).amax() <= 1e-10 * mean.amax());
                assert_eq!(fast.p, t.p);
                assert!((&fast.eigvals - &t.eigvals).amax() <= 1e-9 * scale);
                // Leading eigenvectors are well separated; compare them directly.
                assert!((fast.w() - t.w()).amax() < 1e-6);
                assert!((&fast.cross_cov - &cross).amax() <= 1e-8 * cross.amax().max(1e-300));

                let w = t.w();
                for (j, eps) in e.eps.iter().enumerate().step_by(5) {
                    let rebuilt = &mean + &w * &alphas[j] + &residuals[j];
                    assert!((rebuilt - eps).amax() <= 1e-10 * eps.amax().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn alpha_samples_are_centered_and_correlated_with_sigma() {
        let skull = sample_conductivities(&ConductivityPrior::default(), 40, 9)
            .unwrap()
            .values;
        let f = fixture(skull);
        let config = SamplingConfig {
            amplitude_samples: 5,
            ..Default::default()
        };
        let design = sample_design(0, 40, &config, 1);
        let e = compute_error_samples(0, &f.samples, &f.standard, &design).unwrap();
        let (mean, cov) = compute_statistics(&e.eps).unwrap();
        let t = eigendecompose_truncate(&cov, 0.85).unwrap();
        let (alphas, _) = compute_alpha_samples(&e.eps, &mean, &t).unwrap();
        let j = alphas.len() as f64;
        let mean_alpha = alphas.iter().fold(DVector::zeros(t.p), |acc, a| acc + a) / j;
        assert!(mean_alpha[0].abs() <= 3.0 * (t.eigvals[0] / j).sqrt());

        // Shuffling the conductivity labels removes the correlation.
        let mut shuffled = e.sigma.clone();
        shuffled.rotate_left(7 * 5);
        let c = compute_cross_covariance(&shuffled, &alphas).unwrap();
        let c_true = compute_cross_covariance(&e.sigma, &alphas).unwrap();
        assert!(c[0].abs() < c_true[0].abs());
    }

    #[test]
    fn library_round_trip_and_provenance() {
        let skull = sample_conductivities(&ConductivityPrior::default(), 10, 2)
            .unwrap()
            .values;
        let f = fixture(skull);
        let inputs = StatsInputs {
            standard: &f.standard,
            samples: &f.samples,
            sigma0: 0.0085,
            prior: ConductivityPrior::default(),
            clipped_conductivities: 0,
            sampling: SamplingConfig {
                amplitude_samples: 4,
                ..Default::default()
            },
            master_seed: 8,
        };
        let lib = build_stats_library(&inputs).unwrap();
        assert_eq!(lib.entries.len(), 6);
        let bytes = lib.to_bytes().unwrap();
        let back = StatsLibrary::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, lib);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            StatsLibrary::from_bytes(&bad, Path::new("mem")),
            Err(Error::Version { found: 9, .. })
        ));
        assert_ne!(
            provenance_hash(&f.standard, 0.0085),
            provenance_hash(&f.standard, 0.009)
        );

        let wrong = StatsInputs {
            sigma0: 0.009,
            ..inputs
        };
        assert!(matches!(
            build_stats_library(&wrong),
            Err(Error::ProvenanceMismatch { .. })
        ));
    }

    #[test]
    fn parallel_and_serial_builds_agree() {
        let skull = sample_conductivities(&ConductivityPrior::default(), 8, 4)
            .unwrap()
            .values;
        let f = fixture(skull);
        let inputs = StatsInputs {
            standard: &f.standard,
            samples: &f.samples,
            sigma0: 0.0085,
            prior: ConductivityPrior::default(),
            clipped_conductivities: 0,
            sampling: SamplingConfig {
                amplitude_samples: 3,
                ..Default::default()
            },
            master_seed: 8,
        };
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = serial.install(|| build_stats_library(&inputs)).unwrap();
        let b = build_stats_library(&inputs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_bundle_round_trip() {
        let f = fixture(vec![0.006, 0.009]);
        let bytes = f.samples.to_bytes();
        let back = SampleLeadFields::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, f.samples);
    }
}
