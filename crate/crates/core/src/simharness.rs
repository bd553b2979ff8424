//! Simulated experiments: data from the accurate (forward-mesh, true skull
//! conductivity) model, inverted with the standard scan and the BAE scan.
//!
//! Noise level follows the amplitude SNR definition
//! `zeta = rms(A d) / 10^(snr_db / 20)`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baestats::StatsLibrary;
use crate::error::{Error, Result};
use crate::fem::{forward_map, Conductivity, Dipole, DipoleModel, LeadField, LeadFieldBuilder};
use crate::headmesh::{radial_direction, HeadGeometry, Mesh, Point, SourceSpace};
use crate::linalg::average_reference;
use crate::rng::{substream, Domain};
use crate::scan::{standard_scan, BaeScanner, NoiseModel, ScanResult};

pub fn signal_rms(v: &DVector<f64>) -> f64 {
    (v.norm_squared() / v.len() as f64).sqrt()
}

/// Per-electrode noise standard deviation for a target SNR; zero for an
/// infinite SNR.
pub fn noise_std_for_snr(signal: &DVector<f64>, snr_db: f64) -> Result<f64> {
    if snr_db.is_nan() {
        return Err(Error::Input("SNR is NaN".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(0.0);
    }
    let rms = signal_rms(signal);
    if !(rms > 0.0) {
        return Err(Error::Input("zero signal cannot be scaled to a finite SNR".into()));
    }
    Ok(rms / 10f64.powf(snr_db / 20.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub values: DVector<f64>,
    pub signal: DVector<f64>,
    pub noise_std: f64,
}

/// `v = A d + e`, `e` i.i.d. Gaussian, then average referenced.
pub fn simulate_measurements<R: Rng + ?Sized>(
    accurate: &LeadField,
    dipole: &Dipole,
    snr_db: f64,
    rng: &mut R,
) -> Result<Measurement> {
    let signal = forward_map(accurate, dipole)?;
    let noise_std = noise_std_for_snr(&signal, snr_db)?;
    let mut values = signal.clone();
    if noise_std > 0.0 {
        for v in values.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += noise_std * z;
        }
        average_reference(&mut values);
    }
    Ok(Measurement {
        values,
        signal,
        noise_std,
    })
}

/// Distance in millimeters between two positions in meters.
pub fn euclidean_distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1]) * 1000.0
}

/// A true source given in polar coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourcePreset {
    pub radius: f64,
    pub angle_deg: f64,
}

impl SourcePreset {
    pub fn point(&self) -> Point {
        let t = self.angle_deg.to_radians();
        [self.radius * t.cos(), self.radius * t.sin()]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Snap true sources to the nearest inverse source node.
    #[default]
    Grid,
    /// Use the preset positions as given.
    OffGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub skull_conductivities: Vec<f64>,
    pub sources: Vec<SourcePreset>,
    /// Radial moment of the true dipoles.
    pub amplitude: f64,
    /// `inf` for noiseless data.
    pub snr_db: f64,
    pub trials: usize,
    pub placement: Placement,
    /// The scan noise model never assumes a higher SNR than this.
    pub scan_noise_floor_db: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            skull_conductivities: vec![0.0055, 0.011],
            sources: vec![
                SourcePreset {
                    radius: 0.0735,
                    angle_deg: 35.0,
                },
                SourcePreset {
                    radius: 0.0675,
                    angle_deg: 155.0,
                },
                SourcePreset {
                    radius: 0.0615,
                    angle_deg: 265.0,
                },
            ],
            amplitude: 1.0,
            snr_db: 30.0,
            trials: 20,
            placement: Placement::Grid,
            scan_noise_floor_db: 80.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, geometry: &HeadGeometry) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("experiment.trials must be at least 1".into()));
        }
        if self.skull_conductivities.is_empty() || self.sources.is_empty() {
            return Err(Error::Config(
                "experiment needs at least one conductivity and one source".into(),
            ));
        }
        if let Some(s) = self.skull_conductivities.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!(
                "experiment.skull_conductivities: {s} is not positive"
            )));
        }
        for s in &self.sources {
            let (lo, hi) = geometry.gray_matter;
            if !(s.radius >= lo && s.radius <= hi) || !s.angle_deg.is_finite() {
                return Err(Error::Config(format!(
                    "experiment.sources: radius {} outside the gray-matter band [{lo}, {hi}]",
                    s.radius
                )));
            }
        }
        if !(self.amplitude.is_finite() && self.amplitude != 0.0) {
            return Err(Error::Config("experiment.amplitude must be finite and nonzero".into()));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::Config("experiment.snr_db must be a number or inf".into()));
        }
        if !self.scan_noise_floor_db.is_finite() {
            return Err(Error::Config("experiment.scan_noise_floor_db must be finite".into()));
        }
        Ok(())
    }
}

/// Models an experiment runs against.
pub struct ExperimentInputs<'a> {
    pub forward_mesh: &'a Mesh,
    pub forward_electrodes: &'a [usize],
    /// Brain and scalp conductivities; the skull value is replaced per case.
    pub base: Conductivity,
    pub dipole_model: DipoleModel,
    pub standard: &'a LeadField,
    pub stats: &'a StatsLibrary,
}

/// One row of the per-trial CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub case: usize,
    pub sigma_true: f64,
    pub source: usize,
    pub trial: usize,
    pub true_index: usize,
    pub true_x_mm: f64,
    pub true_y_mm: f64,
    pub noise_std: f64,
    pub standard_index: Option<usize>,
    pub standard_x_mm: Option<f64>,
    pub standard_y_mm: Option<f64>,
    pub standard_ed_mm: Option<f64>,
    pub bae_index: Option<usize>,
    pub bae_x_mm: Option<f64>,
    pub bae_y_mm: Option<f64>,
    pub bae_ed_mm: Option<f64>,
    pub sigma_estimate: Option<f64>,
    pub status: String,
}

impl TrialRecord {
    fn completed(&self) -> Option<(f64, f64, f64)> {
        Some((self.standard_ed_mm?, self.bae_ed_mm?, self.sigma_estimate?))
    }
}

/// Aggregates over completed trials of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub group: String,
    pub sigma_true: f64,
    pub source: Option<usize>,
    pub trials: usize,
    pub completed: usize,
    pub mean_ed_standard_mm: f64,
    pub mean_ed_bae_mm: f64,
    pub median_ed_standard_mm: f64,
    pub median_ed_bae_mm: f64,
    /// BAE error strictly below the standard one.
    pub bae_win_rate: f64,
    /// BAE error not above the standard one.
    pub bae_not_worse_rate: f64,
    /// `|sigma_hat - sigma_true| < |sigma_prior - sigma_true|`.
    pub sigma_closer_rate: f64,
    pub median_sigma_estimate: f64,
    /// Estimate on the same side of the prior mean as the truth.
    pub sigma_correct_side_rate: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize(
    group: String,
    sigma_true: f64,
    source: Option<usize>,
    records: &[&TrialRecord],
    prior_mean: f64,
) -> Summary {
    let done: Vec<(f64, f64, f64)> = records.iter().filter_map(|r| r.completed()).collect();
    let n = done.len() as f64;
    let rate = |f: &dyn Fn(&(f64, f64, f64)) -> bool| done.iter().filter(|d| f(d)).count() as f64 / n;
    let std_ed: Vec<f64> = done.iter().map(|d| d.0).collect();
    let bae_ed: Vec<f64> = done.iter().map(|d| d.1).collect();
    let sig: Vec<f64> = done.iter().map(|d| d.2).collect();
    let truth_side = (sigma_true - prior_mean).signum();
    Summary {
        group,
        sigma_true,
        source,
        trials: records.len(),
        completed: done.len(),
        mean_ed_standard_mm: std_ed.iter().sum::<f64>() / n,
        mean_ed_bae_mm: bae_ed.iter().sum::<f64>() / n,
        median_ed_standard_mm: median(&std_ed),
        median_ed_bae_mm: median(&bae_ed),
        bae_win_rate: rate(&|d| d.1 < d.0),
        bae_not_worse_rate: rate(&|d| d.1 <= d.0),
        sigma_closer_rate: rate(&|d| (d.2 - sigma_true).abs() < (prior_mean - sigma_true).abs()),
        median_sigma_estimate: median(&sig),
        sigma_correct_side_rate: rate(&|d| (d.2 - prior_mean).signum() == truth_side),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseInfo {
    pub sigma_true: f64,
    pub source: usize,
    pub true_index: usize,
    pub true_position: Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub prior_mean: f64,
    pub cases: Vec<CaseInfo>,
    pub records: Vec<TrialRecord>,
    /// Per (conductivity, source) case, then pooled per conductivity.
    pub summaries: Vec<Summary>,
    pub source_positions: Vec<Point>,
}

fn nearest(positions: &[Point], p: Point) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, q) in positions.iter().enumerate() {
        let d = (q[0] - p[0]).hypot(q[1] - p[1]);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn mm(p: Point) -> (f64, f64) {
    (p[0] * 1000.0, p[1] * 1000.0)
}

pub fn run_experiment(
    config: &ExperimentConfig,
    inputs: &ExperimentInputs,
    master_seed: u64,
) -> Result<ExperimentReport> {
    let standard = inputs.standard;
    let scanner = BaeScanner::new(standard, inputs.stats)?;
    let positions = &standard.source_positions;

    let true_points: Vec<(usize, Point)> = config
        .sources
        .iter()
        .map(|s| {
            let idx = nearest(positions, s.point());
            match config.placement {
                Placement::Grid => (idx, positions[idx]),
                Placement::OffGrid => (idx, s.point()),
            }
        })
        .collect();
    let space = SourceSpace {
        nodes: true_points.iter().map(|t| t.0).collect(),
        positions: true_points.iter().map(|t| t.1).collect(),
        radial_dirs: true_points.iter().map(|t| radial_direction(t.1)).collect(),
    };
    let builder = LeadFieldBuilder::with_model(
        inputs.forward_mesh,
        inputs.forward_electrodes,
        &space,
        inputs.dipole_model,
    )?;
    let accurate: Vec<LeadField> = config
        .skull_conductivities
        .par_iter()
        .map(|&s| builder.build(&inputs.base.with_skull(s)))
        .collect::<Result<_>>()?;
    if accurate[0].electrode_count() != standard.electrode_count() {
        return Err(Error::Dimension("forward and inverse montages differ".into()));
    }

    let mut cases = Vec::new();
    for &sigma_true in &config.skull_conductivities {
        for (s, &(true_index, true_position)) in true_points.iter().enumerate() {
            cases.push(CaseInfo {
                sigma_true,
                source: s,
                true_index,
                true_position,
            });
        }
    }
    let n_sources = config.sources.len();
    let jobs: Vec<(usize, usize)> = (0..cases.len())
        .flat_map(|c| (0..config.trials).map(move |t| (c, t)))
        .collect();

    let records: Vec<TrialRecord> = jobs
        .par_iter()
        .map(|&(c, t)| {
            let case = &cases[c];
            let lf = &accurate[c / n_sources];
            let dir = radial_direction(case.true_position);
            let dipole = Dipole {
                location: case.source,
                moment: [config.amplitude * dir[0], config.amplitude * dir[1]],
            };
            let global = (c * config.trials + t) as u64;
            let mut rng = substream(master_seed, Domain::Trial, global);
            let (tx, ty) = mm(case.true_position);
            let mut record = TrialRecord {
                case: c,
                sigma_true: case.sigma_true,
                source: case.source,
                trial: t,
                true_index: case.true_index,
                true_x_mm: tx,
                true_y_mm: ty,
                noise_std: 0.0,
                standard_index: None,
                standard_x_mm: None,
                standard_y_mm: None,
                standard_ed_mm: None,
                bae_index: None,
                bae_x_mm: None,
                bae_y_mm: None,
                bae_ed_mm: None,
                sigma_estimate: None,
                status: "ok".into(),
            };
            let outcome = (|| -> Result<(ScanResult, ScanResult)> {
                let data = simulate_measurements(lf, &dipole, config.snr_db, &mut rng)?;
                record.noise_std = data.noise_std;
                let zeta = noise_std_for_snr(&data.signal, config.snr_db.min(config.scan_noise_floor_db))?;
                let noise = NoiseModel::white(data.values.len(), zeta);
                Ok((
                    standard_scan(&data.values, standard, &noise)?,
                    scanner.scan(&data.values, &noise)?,
                ))
            })();
            match outcome {
                Ok((s, b)) => {
                    let (sx, sy) = mm(s.position);
                    let (bx, by) = mm(b.position);
                    record.standard_index = Some(s.winner);
                    record.standard_x_mm = Some(sx);
                    record.standard_y_mm = Some(sy);
                    record.standard_ed_mm = Some(euclidean_distance(case.true_position, s.position));
                    record.bae_index = Some(b.winner);
                    record.bae_x_mm = Some(bx);
                    record.bae_y_mm = Some(by);
                    record.bae_ed_mm = Some(euclidean_distance(case.true_position, b.position));
                    record.sigma_estimate = b.sigma_estimate;
                }
                Err(e) => {
                    log::warn!("case {c} trial {t} failed: {e}");
                    record.status = format!("failed: {e}");
                }
            }
            record
        })
        .collect();

    let prior_mean = inputs.stats.metadata.prior.mean;
    let mut summaries = Vec::new();
    for (c, case) in cases.iter().enumerate() {
        let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.case == c).collect();
        summaries.push(summarize(
            format!("sigma={} source={}", case.sigma_true, case.source),
            case.sigma_true,
            Some(case.source),
            &rs,
            prior_mean,
        ));
    }
    for &sigma in &config.skull_conductivities {
        let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.sigma_true == sigma).collect();
        summaries.push(summarize(format!("sigma={sigma} all"), sigma, None, &rs, prior_mean));
    }
    Ok(ExperimentReport {
        config: config.clone(),
        prior_mean,
        cases,
        records,
        summaries,
        source_positions: positions.clone(),
    })
}

fn write_csv<T: Serialize>(path: &Path, header_comment: Option<&str>, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    if let Some(c) = header_comment {
        for line in c.lines() {
            buf.extend_from_slice(format!("# {line}\n").as_bytes());
        }
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_trials_csv(path: &Path) -> Result<Vec<TrialRecord>> {
    read_csv(path)
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<Summary>> {
    read_csv(path)
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

impl ExperimentReport {
    fn header(&self) -> String {
        format!(
            "noise: zeta = rms(signal) / 10^(snr_db/20), snr_db = {}\nprior mean skull conductivity = {} S/m; positions in mm",
            self.config.snr_db, self.prior_mean
        )
    }

    /// Every trial, one row each.
    pub fn write_trials_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, Some(&self.header()), &self.records)
    }

    /// First trial of every case: the single-trial figure layout.
    pub fn write_cases_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<&TrialRecord> = self.records.iter().filter(|r| r.trial == 0).collect();
        write_csv(path, Some(&self.header()), &rows)
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, Some(&self.header()), &self.summaries)
    }

    pub fn pooled(&self, sigma_true: f64) -> Option<&Summary> {
        self.summaries
            .iter()
            .find(|s| s.source.is_none() && s.sigma_true == sigma_true)
    }

    /// True sources and both scans' estimates over the head outline for one
    /// skull conductivity.
    pub fn svg(&self, sigma_true: f64, geometry: &HeadGeometry) -> String {
        let size = 520.0;
        let c = size / 2.0;
        let scale = (size / 2.0 - 30.0) / geometry.scalp_radius;
        let xy = |p: Point| (c + p[0] * scale, c - p[1] * scale);
        let xy_mm = |x: f64, y: f64| xy([x / 1000.0, y / 1000.0]);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{h}" viewBox="0 0 {size} {h}" font-family="sans-serif" font-size="12">"#,
            h = size + 60.0
        );
        for (r, fill) in [
            (geometry.scalp_radius, "#f2dcc8"),
            (geometry.skull_radius, "#d9534f"),
            (geometry.brain_radius, "#f7f7f7"),
        ] {
            let _ = writeln!(
                s,
                r##"<circle cx="{c}" cy="{c}" r="{:.2}" fill="{fill}" stroke="#555" stroke-width="0.8"/>"##,
                r * scale
            );
        }
        for r in [geometry.gray_matter.0, geometry.gray_matter.1] {
            let _ = writeln!(
                s,
                r##"<circle cx="{c}" cy="{c}" r="{:.2}" fill="none" stroke="#999" stroke-dasharray="4 3"/>"##,
                r * scale
            );
        }
        for &p in &self.source_positions {
            let (x, y) = xy(p);
            let _ = writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="0.9" fill="#bbb"/>"##);
        }
        for r in self.records.iter().filter(|r| r.sigma_true == sigma_true) {
            if let (Some(x), Some(y)) = (r.standard_x_mm, r.standard_y_mm) {
                let (x, y) = xy_mm(x, y);
                let _ = writeln!(
                    s,
                    r##"<rect x="{:.2}" y="{:.2}" width="6" height="6" fill="none" stroke="#1f5fbf" stroke-width="1.2"/>"##,
                    x - 3.0,
                    y - 3.0
                );
            }
            if let (Some(x), Some(y)) = (r.bae_x_mm, r.bae_y_mm) {
                let (x, y) = xy_mm(x, y);
                let _ = writeln!(
                    s,
                    r##"<path d="M{:.2} {:.2}h8M{:.2} {:.2}v8" stroke="#178a3a" stroke-width="1.6"/>"##,
                    x - 4.0,
                    y,
                    x,
                    y - 4.0
                );
            }
        }
        for case in self.cases.iter().filter(|k| k.sigma_true == sigma_true) {
            let (x, y) = xy(case.true_position);
            let _ = writeln!(
                s,
                r##"<circle cx="{x:.2}" cy="{y:.2}" r="5" fill="none" stroke="#000" stroke-width="1.8"/>"##
            );
        }
        let mut y = size + 8.0;
        let line = |s: &mut String, y: &mut f64, text: String| {
            let _ = writeln!(s, r#"<text x="10" y="{:.0}">{text}</text>"#, *y + 8.0);
            *y += 16.0;
        };
        line(
            &mut s,
            &mut y,
            format!("true skull conductivity {sigma_true} S/m: circle true, square standard, cross BAE"),
        );
        if let Some(p) = self.pooled(sigma_true) {
            line(
                &mut s,
                &mut y,
                format!(
                    "mean ED standard {:.2} mm, BAE {:.2} mm; median estimate {:.5} S/m",
                    p.mean_ed_standard_mm, p.mean_ed_bae_mm, p.median_sigma_estimate
                ),
            );
        }
        s.push_str("</svg>\n");
        s
    }
}
