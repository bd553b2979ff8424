//! Configuration and the end-to-end commands: build the head models, sample
//! the error statistics, simulate data, scan, and run the two-conductivity
//! comparison experiment.
//!
//! All artifacts of one configuration live in a single output directory:
//!
//! ```text
//! config.toml        resolved configuration
//! forward.mesh       data-generation mesh
//! inverse.mesh       inversion mesh (source space = its gray-matter nodes)
//! standard.lf        A0, the inverse-mesh lead field at the standard skull conductivity
//! samples.slf        inverse-mesh lead fields for the sampled skull conductivities
//! stats.bin          per-location error statistics
//! report/            experiment CSVs and figures
//! ```

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::baestats::{
    build_stats_library, compute_sample_lead_fields, provenance_hash, sample_conductivities, ConductivityPrior,
    SampleLeadFields, SamplingConfig, StatsInputs, StatsLibrary,
};
use crate::error::{Error, Result};
use crate::fem::{Conductivity, Dipole, DipoleModel, LeadField, LeadFieldBuilder};
use crate::headmesh::{
    build_head_mesh, build_source_space, place_electrodes, radial_direction, HeadGeometry, Mesh, Point, SourceSpace,
};
use crate::rng::{substream, Domain};
use crate::scan::{bae_scan, standard_scan, NoiseModel, ScanMethod, ScanResult};
use crate::simharness::{
    noise_std_for_snr, run_experiment, simulate_measurements, ExperimentConfig, ExperimentInputs, ExperimentReport,
    SourcePreset,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConductivityConfig {
    pub brain: f64,
    pub scalp: f64,
    /// Skull conductivity of the standard model used for inversion.
    pub standard_skull: f64,
}

impl Default for ConductivityConfig {
    fn default() -> Self {
        Self {
            brain: 0.33,
            scalp: 0.43,
            standard_skull: 0.0085,
        }
    }
}

impl ConductivityConfig {
    pub fn standard(&self) -> Result<Conductivity> {
        Conductivity::new(self.brain, self.standard_skull, self.scalp)
            .map_err(|e| Error::Config(format!("conductivity: {e}")))
    }
}

/// Mesh the sample head models are discretized on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMesh {
    /// Same mesh as the standard model: the error is purely the skull
    /// conductivity effect and vanishes at the standard conductivity.
    #[default]
    Inverse,
    /// The data-generation mesh: the error also carries the discretization
    /// difference between the two meshes.
    Forward,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    /// Target node count of the data-generation mesh.
    pub forward_nodes: usize,
    /// Target node count of the inversion mesh.
    pub inverse_nodes: usize,
    pub dipole_model: DipoleModel,
    pub sample_mesh: SampleMesh,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            forward_nodes: 2518,
            inverse_nodes: 1780,
            dipole_model: DipoleModel::default(),
            sample_mesh: SampleMesh::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    /// K, number of sampled skull conductivities (head models).
    pub sample_models: usize,
    pub output_dir: PathBuf,
    pub geometry: HeadGeometry,
    pub conductivity: ConductivityConfig,
    pub mesh: MeshConfig,
    pub prior: ConductivityPrior,
    pub sampling: SamplingConfig,
    pub experiment: ExperimentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 20_160_101,
            sample_models: 400,
            output_dir: PathBuf::from("skullbae-out"),
            geometry: HeadGeometry::default(),
            conductivity: ConductivityConfig::default(),
            mesh: MeshConfig::default(),
            prior: ConductivityPrior::default(),
            sampling: SamplingConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let named = |section: &str, e: Error| match e {
            Error::Config(msg) => Error::Config(msg),
            other => Error::Config(format!("{section}: {other}")),
        };
        self.geometry.validate().map_err(|e| named("geometry", e))?;
        self.conductivity.standard()?;
        if self.mesh.forward_nodes < 100 || self.mesh.inverse_nodes < 100 {
            return Err(Error::Config("mesh: node targets must be at least 100".into()));
        }
        self.prior.validate()?;
        if self.sample_models < 2 {
            return Err(Error::Config("sample_models must be at least 2".into()));
        }
        self.sampling.validate()?;
        self.experiment.validate(&self.geometry)?;
        Ok(())
    }

    /// The configuration with everything that does not affect the model
    /// artifacts reset, used to detect stale artifacts.
    pub fn model_fingerprint(&self) -> String {
        let mut c = self.clone();
        c.experiment = ExperimentConfig::default();
        c.output_dir = PathBuf::new();
        c.to_toml()
    }
}

/// File names inside an output directory.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn forward_mesh(&self) -> PathBuf {
        self.dir.join("forward.mesh")
    }
    pub fn inverse_mesh(&self) -> PathBuf {
        self.dir.join("inverse.mesh")
    }
    pub fn standard(&self) -> PathBuf {
        self.dir.join("standard.lf")
    }
    pub fn samples(&self) -> PathBuf {
        self.dir.join("samples.slf")
    }
    pub fn stats(&self) -> PathBuf {
        self.dir.join("stats.bin")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.dir.join("report")
    }

    fn model_files(&self) -> [PathBuf; 4] {
        [
            self.forward_mesh(),
            self.inverse_mesh(),
            self.standard(),
            self.samples(),
        ]
    }

    fn ensure_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))
    }
}

fn refuse_overwrite(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    if let Some(p) = paths.iter().find(|p| p.exists()) {
        return Err(Error::Input(format!(
            "{} already exists; pass --force to overwrite",
            p.display()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSummary {
    pub forward_nodes: usize,
    pub inverse_nodes: usize,
    pub sources: usize,
    pub electrodes: usize,
    pub sample_models: usize,
    pub clipped_conductivities: usize,
}

/// In-memory model artifacts.
pub struct Models {
    pub forward_mesh: Mesh,
    pub inverse_mesh: Mesh,
    pub standard: LeadField,
    pub samples: SampleLeadFields,
    pub clipped_conductivities: usize,
}

pub fn compute_models(cfg: &PipelineConfig) -> Result<Models> {
    cfg.validate()?;
    let base = cfg.conductivity.standard()?;
    let forward_mesh = build_head_mesh(&cfg.geometry, cfg.mesh.forward_nodes)?;
    let inverse_mesh = build_head_mesh(&cfg.geometry, cfg.mesh.inverse_nodes)?;
    let forward_electrodes = place_electrodes(&forward_mesh, cfg.geometry.electrode_count)?;
    let electrodes = place_electrodes(&inverse_mesh, cfg.geometry.electrode_count)?;
    let sources = build_source_space(&inverse_mesh, &cfg.geometry)?;
    log::info!(
        "meshes: forward {} nodes, inverse {} nodes, {} sources",
        forward_mesh.node_count(),
        inverse_mesh.node_count(),
        sources.len()
    );
    let builder = LeadFieldBuilder::with_model(&inverse_mesh, &electrodes, &sources, cfg.mesh.dipole_model)?;
    let standard = builder.build(&base)?;
    let draws = sample_conductivities(&cfg.prior, cfg.sample_models, cfg.seed)?;
    if draws.clipped > 0 {
        log::warn!(
            "{} skull conductivity draws clipped at {}",
            draws.clipped,
            cfg.prior.lower_clip
        );
    }
    log::info!("computing {} sample lead fields", draws.values.len());
    let lead_fields = match cfg.mesh.sample_mesh {
        SampleMesh::Inverse => compute_sample_lead_fields(&builder, &base, &draws.values)?,
        SampleMesh::Forward => {
            let fine =
                LeadFieldBuilder::with_model(&forward_mesh, &forward_electrodes, &sources, cfg.mesh.dipole_model)?;
            compute_sample_lead_fields(&fine, &base, &draws.values)?
        }
    };
    let samples = SampleLeadFields {
        skull: draws.values,
        lead_fields,
        standard_provenance: provenance_hash(&standard, cfg.conductivity.standard_skull),
    };
    Ok(Models {
        forward_mesh,
        inverse_mesh,
        standard,
        samples,
        clipped_conductivities: draws.clipped,
    })
}

pub fn build_model(cfg: &PipelineConfig, artifacts: &Artifacts, force: bool) -> Result<ModelSummary> {
    cfg.validate()?;
    let mut outputs = artifacts.model_files().to_vec();
    outputs.push(artifacts.config());
    refuse_overwrite(&outputs, force)?;
    let models = compute_models(cfg)?;
    artifacts.ensure_dir()?;
    models.forward_mesh.save(&artifacts.forward_mesh())?;
    models.inverse_mesh.save(&artifacts.inverse_mesh())?;
    models.standard.save(&artifacts.standard())?;
    models.samples.save(&artifacts.samples())?;
    write_text(&artifacts.config(), &cfg.to_toml())?;
    // Statistics from an earlier model no longer apply.
    if artifacts.stats().exists() {
        std::fs::remove_file(artifacts.stats()).map_err(|e| Error::io(artifacts.stats(), e))?;
    }
    Ok(ModelSummary {
        forward_nodes: models.forward_mesh.node_count(),
        inverse_nodes: models.inverse_mesh.node_count(),
        sources: models.standard.source_count(),
        electrodes: models.standard.electrode_count(),
        sample_models: models.samples.skull.len(),
        clipped_conductivities: models.clipped_conductivities,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Input(format!("{} not found; {hint}", path.display())))
    }
}

pub fn compute_stats(
    cfg: &PipelineConfig,
    standard: &LeadField,
    samples: &SampleLeadFields,
    clipped: usize,
) -> Result<StatsLibrary> {
    let inputs = StatsInputs {
        standard,
        samples,
        sigma0: cfg.conductivity.standard_skull,
        prior: cfg.prior,
        clipped_conductivities: clipped,
        sampling: cfg.sampling,
        master_seed: cfg.seed,
    };
    let mut lib = build_stats_library(&inputs)?;
    lib.metadata.config = Some(cfg.model_fingerprint());
    let h = lib.p_histogram();
    log::info!(
        "statistics for {} locations; truncation orders {:?}",
        lib.entries.len(),
        h.iter().enumerate().filter(|(_, &c)| c > 0).collect::<Vec<_>>()
    );
    Ok(lib)
}

pub fn precompute_stats(cfg: &PipelineConfig, artifacts: &Artifacts, force: bool) -> Result<StatsLibrary> {
    cfg.validate()?;
    refuse_overwrite(&[artifacts.stats()], force)?;
    require(&artifacts.standard(), "run build-model first")?;
    require(&artifacts.samples(), "run build-model first")?;
    let standard = LeadField::load(&artifacts.standard())?;
    let samples = SampleLeadFields::load(&artifacts.samples())?;
    let clipped = samples.skull.iter().filter(|&&s| s == cfg.prior.lower_clip).count();
    let lib = compute_stats(cfg, &standard, &samples, clipped)?;
    lib.save(&artifacts.stats())?;
    Ok(lib)
}

/// A measurement vector with the information needed to scan it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFile {
    pub sigma_true: f64,
    pub true_position: Point,
    pub snr_db: f64,
    /// Standard deviation of the added noise, volts.
    pub noise_std: f64,
    /// Noise level the scan should assume.
    pub scan_noise_std: f64,
    pub values: Vec<f64>,
}

impl DataFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Input(e.to_string()))?;
        write_text(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub struct SimulateRequest {
    pub sigma_true: f64,
    pub source: SourcePreset,
    pub trial: u64,
}

/// One synthetic measurement from the forward mesh; grid placement snaps
/// the source to the nearest inverse source node as in the experiments.
pub fn simulate(cfg: &PipelineConfig, artifacts: &Artifacts, req: &SimulateRequest) -> Result<DataFile> {
    cfg.validate()?;
    if !(req.sigma_true.is_finite() && req.sigma_true > 0.0) {
        return Err(Error::Input(format!(
            "true skull conductivity must be positive, got {}",
            req.sigma_true
        )));
    }
    require(&artifacts.forward_mesh(), "run build-model first")?;
    require(&artifacts.standard(), "run build-model first")?;
    let mesh = Mesh::load(&artifacts.forward_mesh())?;
    let standard = LeadField::load(&artifacts.standard())?;
    let electrodes = place_electrodes(&mesh, cfg.geometry.electrode_count)?;
    let position = match cfg.experiment.placement {
        crate::simharness::Placement::Grid => {
            let p = req.source.point();
            let i = (0..standard.source_count())
                .min_by(|&a, &b| {
                    let da = dist(standard.source_positions[a], p);
                    let db = dist(standard.source_positions[b], p);
                    da.total_cmp(&db)
                })
                .ok_or_else(|| Error::Input("empty source space".into()))?;
            standard.source_positions[i]
        }
        crate::simharness::Placement::OffGrid => req.source.point(),
    };
    let space = SourceSpace {
        nodes: vec![0],
        positions: vec![position],
        radial_dirs: vec![radial_direction(position)],
    };
    let builder = LeadFieldBuilder::with_model(&mesh, &electrodes, &space, cfg.mesh.dipole_model)?;
    let lf = builder.build(&cfg.conductivity.standard()?.with_skull(req.sigma_true))?;
    let dir = radial_direction(position);
    let a = cfg.experiment.amplitude;
    let dipole = Dipole {
        location: 0,
        moment: [a * dir[0], a * dir[1]],
    };
    let mut rng = substream(cfg.seed, Domain::Trial, req.trial);
    let m = simulate_measurements(&lf, &dipole, cfg.experiment.snr_db, &mut rng)?;
    let scan_noise_std = noise_std_for_snr(&m.signal, cfg.experiment.snr_db.min(cfg.experiment.scan_noise_floor_db))?;
    Ok(DataFile {
        sigma_true: req.sigma_true,
        true_position: position,
        snr_db: cfg.experiment.snr_db,
        noise_std: m.noise_std,
        scan_noise_std,
        values: m.values.iter().copied().collect(),
    })
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn scan(artifacts: &Artifacts, data: &DataFile, method: ScanMethod) -> Result<ScanResult> {
    require(&artifacts.standard(), "run build-model first")?;
    let standard = LeadField::load(&artifacts.standard())?;
    let v = DVector::from_column_slice(&data.values);
    if v.len() != standard.electrode_count() {
        return Err(Error::Dimension(format!(
            "data has {} values but the model has {} electrodes",
            v.len(),
            standard.electrode_count()
        )));
    }
    if !(data.scan_noise_std > 0.0) {
        return Err(Error::Input("scan_noise_std must be positive".into()));
    }
    let noise = NoiseModel::white(v.len(), data.scan_noise_std);
    match method {
        ScanMethod::Standard => standard_scan(&v, &standard, &noise),
        ScanMethod::Bae => {
            require(
                &artifacts.stats(),
                "the bae method needs statistics; run precompute-stats first",
            )?;
            let stats = StatsLibrary::load(&artifacts.stats())?;
            bae_scan(&v, &standard, &stats, &noise)
        }
    }
}

/// Loads the artifacts for `cfg` from `artifacts`, building whatever is
/// missing. Existing artifacts from a different model configuration are an
/// error unless `force` is set, in which case everything is rebuilt.
pub fn ensure_artifacts(
    cfg: &PipelineConfig,
    artifacts: &Artifacts,
    force: bool,
) -> Result<(Mesh, LeadField, StatsLibrary)> {
    cfg.validate()?;
    let have_models = artifacts.model_files().iter().all(|p| p.exists());
    if have_models && !force {
        let stored = PipelineConfig::load(&artifacts.config())?;
        if stored.model_fingerprint() != cfg.model_fingerprint() {
            return Err(Error::Input(format!(
                "artifacts in {} were built with a different configuration; pass --force to rebuild",
                artifacts.dir.display()
            )));
        }
    } else {
        build_model(cfg, artifacts, true)?;
    }
    let stats = if artifacts.stats().exists() && !force {
        let s = StatsLibrary::load(&artifacts.stats())?;
        if s.metadata.config.as_deref() != Some(cfg.model_fingerprint().as_str()) {
            return Err(Error::Input(format!(
                "{} was built with a different configuration; pass --force to rebuild",
                artifacts.stats().display()
            )));
        }
        s
    } else {
        precompute_stats(cfg, artifacts, true)?
    };
    let mesh = Mesh::load(&artifacts.forward_mesh())?;
    let standard = LeadField::load(&artifacts.standard())?;
    Ok((mesh, standard, stats))
}

pub fn experiment(
    cfg: &PipelineConfig,
    forward_mesh: &Mesh,
    standard: &LeadField,
    stats: &StatsLibrary,
) -> Result<ExperimentReport> {
    let electrodes = place_electrodes(forward_mesh, cfg.geometry.electrode_count)?;
    let inputs = ExperimentInputs {
        forward_mesh,
        forward_electrodes: &electrodes,
        base: cfg.conductivity.standard()?,
        dipole_model: cfg.mesh.dipole_model,
        standard,
        stats,
    };
    run_experiment(&cfg.experiment, &inputs, cfg.seed)
}

/// Report files written by [`write_report`].
pub fn report_files(dir: &Path, cfg: &PipelineConfig) -> Vec<PathBuf> {
    let mut files = vec![dir.join("trials.csv"), dir.join("cases.csv"), dir.join("summary.csv")];
    for s in &cfg.experiment.skull_conductivities {
        files.push(dir.join(format!("fig2-sigma-{s}.svg")));
    }
    files.push(dir.join("config.toml"));
    files
}

pub fn write_report(report: &ExperimentReport, cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = report_files(dir, cfg);
    report.write_trials_csv(&files[0])?;
    report.write_cases_csv(&files[1])?;
    report.write_summary_csv(&files[2])?;
    for (k, s) in cfg.experiment.skull_conductivities.iter().enumerate() {
        write_text(&files[3 + k], &report.svg(*s, &cfg.geometry))?;
    }
    write_text(files.last().expect("config path"), &cfg.to_toml())?;
    Ok(files)
}

pub fn reproduce_fig2(cfg: &PipelineConfig, artifacts: &Artifacts, force: bool) -> Result<ExperimentReport> {
    let (mesh, standard, stats) = ensure_artifacts(cfg, artifacts, force)?;
    let report = experiment(cfg, &mesh, &standard, &stats)?;
    write_report(&report, cfg, &artifacts.report_dir())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back = PipelineConfig::from_toml(&cfg.to_toml(), Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.conductivity.standard_skull, 0.0085);
        assert_eq!(cfg.sample_models, 400);
        assert_eq!(cfg.sampling.amplitude_samples, 1000);
        assert_eq!(cfg.sampling.energy_threshold, 0.85);
        assert_eq!(cfg.geometry.electrode_count, 32);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg =
            PipelineConfig::from_toml("seed = 5\n[sampling]\namplitude_samples = 50\n", Path::new("mem")).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.sampling.amplitude_samples, 50);
        assert_eq!(cfg.prior, ConductivityPrior::default());
    }

    #[test]
    fn invalid_config_names_the_field() {
        let err = PipelineConfig::from_toml("[prior]\nstd = -1.0\n", Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("prior.std"), "{err}");
        let err = PipelineConfig::from_toml("[prior]\nsdt = 1.0\n", Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("sdt"), "{err}");
        let err = PipelineConfig::from_toml("[geometry]\nbrain_radius = 0.09\n", Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn infinite_snr_parses() {
        let cfg = PipelineConfig::from_toml("[experiment]\nsnr_db = inf\n", Path::new("mem")).unwrap();
        assert!(cfg.experiment.snr_db.is_infinite());
    }

    #[test]
    fn forward_sample_mesh_carries_discretization_error() {
        let mut cfg = PipelineConfig::default();
        cfg.sample_models = 2;
        cfg.mesh.forward_nodes = 900;
        cfg.mesh.inverse_nodes = 500;
        cfg.prior.std = 1e-12;
        cfg.prior.mean = cfg.conductivity.standard_skull;
        let inverse = compute_models(&cfg).unwrap();
        let same = (&inverse.samples.lead_fields[0].matrix - &inverse.standard.matrix).amax();
        assert!(same < 1e-6 * inverse.standard.matrix.amax(), "{same}");

        cfg.mesh.sample_mesh = SampleMesh::Forward;
        let forward = compute_models(&cfg).unwrap();
        let lf = &forward.samples.lead_fields[0];
        assert_eq!(lf.source_positions, forward.standard.source_positions);
        let diff = (&lf.matrix - &forward.standard.matrix).amax();
        assert!(diff > 1e-3 * forward.standard.matrix.amax(), "{diff}");
        // Statistics still build: only the source space has to match.
        cfg.sampling.amplitude_samples = 3;
        compute_stats(&cfg, &forward.standard, &forward.samples, 0).unwrap();
    }
}
