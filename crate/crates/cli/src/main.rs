use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use skullbae::pipeline::{
    build_model, precompute_stats, reproduce_fig2, scan, simulate, Artifacts, DataFile, PipelineConfig, SimulateRequest,
};
use skullbae::scan::ScanMethod;
use skullbae::simharness::SourcePreset;
use skullbae::{Error, ErrorKind, Result};

/// Radial-dipole EEG scanning in a layered disk head, with and without
/// approximation-error modelling of the skull conductivity.
#[derive(Parser, Debug)]
#[command(name = "skullbae", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration; defaults are used for anything it leaves out.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Artifact directory, overriding `output_dir` from the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the meshes, the standard lead field and the sample lead fields.
    BuildModel,
    /// Compute the per-location error statistics from the sample lead fields.
    PrecomputeStats {
        /// Eigenvalue energy fraction that fixes the truncation order.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Simulate one noisy measurement from the forward mesh.
    Simulate {
        /// Skull conductivity of the data-generating model, S/m.
        #[arg(long)]
        sigma_true: f64,
        /// Index into the configured source presets.
        #[arg(long, conflicts_with_all = ["radius", "angle"])]
        source: Option<usize>,
        /// Source radius in metres (with --angle).
        #[arg(long, requires = "angle")]
        radius: Option<f64>,
        /// Source polar angle in degrees (with --radius).
        #[arg(long, requires = "radius")]
        angle: Option<f64>,
        /// Noise realization index.
        #[arg(long, default_value_t = 0)]
        trial: u64,
        /// Signal-to-noise ratio in dB, overriding the configuration.
        #[arg(long)]
        snr: Option<f64>,
        /// Data file to write.
        output: PathBuf,
    },
    /// Scan a data file for the best-fitting radial dipole.
    Scan {
        /// Data file written by `simulate`.
        data: PathBuf,
        #[arg(long, default_value = "standard")]
        method: ScanMethod,
        /// Result file (default: next to the data file).
        #[arg(long)]
        result: Option<PathBuf>,
    },
    /// Run the two-conductivity comparison and write CSV and SVG reports.
    ReproduceFig2 {
        /// Trials per case, overriding the configuration.
        #[arg(long)]
        trials: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Validation => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::Io => 4,
    }
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = load_config(&cli.global)?;
    let force = cli.global.force;
    match cli.command {
        Command::BuildModel => {
            cfg.validate()?;
            let artifacts = Artifacts::new(&cfg.output_dir);
            let s = build_model(&cfg, &artifacts, force)?;
            log::info!(
                "wrote model to {}: forward {} nodes, inverse {} nodes, {} sources, {} electrodes, {} sample models ({} clipped)",
                artifacts.dir.display(),
                s.forward_nodes,
                s.inverse_nodes,
                s.sources,
                s.electrodes,
                s.sample_models,
                s.clipped_conductivities
            );
        }
        Command::PrecomputeStats { threshold } => {
            if let Some(t) = threshold {
                cfg.sampling.energy_threshold = t;
            }
            cfg.validate()?;
            let artifacts = Artifacts::new(&cfg.output_dir);
            let lib = precompute_stats(&cfg, &artifacts, force)?;
            let hist: Vec<String> = lib
                .p_histogram()
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(p, c)| format!("p={p}: {c}"))
                .collect();
            log::info!("wrote {}; {}", artifacts.stats().display(), hist.join(", "));
        }
        Command::Simulate {
            sigma_true,
            source,
            radius,
            angle,
            trial,
            snr,
            output,
        } => {
            if let Some(snr) = snr {
                cfg.experiment.snr_db = snr;
            }
            cfg.validate()?;
            let preset = match (radius, angle) {
                (Some(radius), Some(angle_deg)) => SourcePreset { radius, angle_deg },
                _ => {
                    let k = source.unwrap_or(0);
                    *cfg.experiment.sources.get(k).ok_or_else(|| {
                        Error::Input(format!(
                            "source {k} out of range; {} presets configured",
                            cfg.experiment.sources.len()
                        ))
                    })?
                }
            };
            refuse(&output, force)?;
            let artifacts = Artifacts::new(&cfg.output_dir);
            let data = simulate(
                &cfg,
                &artifacts,
                &SimulateRequest {
                    sigma_true,
                    source: preset,
                    trial,
                },
            )?;
            data.save(&output)?;
            log::info!(
                "wrote {}: source at ({:.4}, {:.4}) m, noise std {:.3e}",
                output.display(),
                data.true_position[0],
                data.true_position[1],
                data.noise_std
            );
        }
        Command::Scan { data, method, result } => {
            let result = result.unwrap_or_else(|| default_result_path(&data, method));
            refuse(&result, force)?;
            let artifacts = Artifacts::new(&cfg.output_dir);
            let input = DataFile::load(&data)?;
            let r = scan(&artifacts, &input, method)?;
            std::fs::write(&result, r.to_text()?).map_err(|e| Error::io(&result, e))?;
            let ed = skullbae::simharness::euclidean_distance(r.position, input.true_position);
            match r.sigma_estimate {
                Some(s) => log::info!(
                    "wrote {}: location {} (ED {ed:.2} mm), skull conductivity {s:.5}",
                    result.display(),
                    r.winner
                ),
                None => log::info!("wrote {}: location {} (ED {ed:.2} mm)", result.display(), r.winner),
            }
        }
        Command::ReproduceFig2 { trials } => {
            if let Some(t) = trials {
                cfg.experiment.trials = t;
            }
            cfg.validate()?;
            let artifacts = Artifacts::new(&cfg.output_dir);
            let report = reproduce_fig2(&cfg, &artifacts, force)?;
            for &s in &cfg.experiment.skull_conductivities {
                if let Some(p) = report.pooled(s) {
                    log::info!(
                        "sigma_true {s}: mean ED standard {:.2} mm, BAE {:.2} mm; BAE strictly better in {:.0}% of trials; median estimate {:.5}",
                        p.mean_ed_standard_mm,
                        p.mean_ed_bae_mm,
                        100.0 * p.bae_win_rate,
                        p.median_sigma_estimate
                    );
                }
            }
            log::info!("report written to {}", artifacts.report_dir().display());
        }
    }
    Ok(())
}

fn refuse(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Input(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn default_result_path(data: &Path, method: ScanMethod) -> PathBuf {
    let stem = data.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    data.with_file_name(format!("{stem}.{method}.scan.toml"))
}
