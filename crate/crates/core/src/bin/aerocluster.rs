use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use aerocluster::densify::serve_request;
use aerocluster::io::{self, MarkerPairRecord, MarkerRecord};
use aerocluster::metrics::quality_report;
use aerocluster::pipeline::{marker_pair_errors, run, validate_inputs, PipelineConfig};
use aerocluster::sim::{simulate, SimConfig};

#[derive(Parser)]
#[command(name = "aerocluster", version, about = "Cluster-based aerial mapping from pre-extracted feature tracks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process an input directory into point cloud, DSM, orthomosaic and report.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic mission (inputs, ground truth and a pipeline.toml).
    Simulate {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// TOML overrides for the simulator settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Quality indicators of a stored DSM, plus marker errors when given.
    Metrics {
        #[arg(long)]
        dsm: PathBuf,
        /// DSM header; defaults to the DSM path with a `.hdr` extension.
        #[arg(long)]
        header: Option<PathBuf>,
        /// Measured marker positions (`markers_measured.csv`).
        #[arg(long, requires = "pairs")]
        markers: Option<PathBuf>,
        /// Ground-truth separations (`marker_pairs.csv`).
        #[arg(long, requires = "markers")]
        pairs: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        window_k: usize,
    },
    /// Check an input directory and print line-numbered diagnostics.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Reference external densifier: answers one request directory with
    /// IDW depth times `scale`.
    DensifyWorker {
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        dir: PathBuf,
    },
}

const INPUT_ERROR: u8 = 1;
const CONFIG_ERROR: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => {
            let cfg = match PipelineConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    error!("{e}");
                    return ExitCode::from(CONFIG_ERROR);
                }
            };
            match run(&cfg) {
                Ok(summary) => {
                    let failed = summary.manifest.clusters.iter().filter(|c| c.status == "failed").count();
                    println!(
                        "{} clusters ({failed} failed), coverage {:.4}, output in {}",
                        summary.manifest.clusters.len(),
                        summary.report.coverage,
                        cfg.output.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    if let aerocluster::pipeline::PipelineError::Input(diags) = &e {
                        for d in diags {
                            eprintln!("{d}");
                        }
                    }
                    error!("{e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Simulate { seed, out, config } => {
            let cfg = match config.map(|p| load_sim_config(&p)).transpose() {
                Ok(c) => c.unwrap_or_default(),
                Err(e) => {
                    error!("{e}");
                    return ExitCode::from(CONFIG_ERROR);
                }
            };
            if let Err(e) = cfg.validate() {
                error!("simulator config: {e}");
                return ExitCode::from(CONFIG_ERROR);
            }
            let sim = simulate(seed, &cfg);
            match sim.write(&out) {
                Ok(()) => {
                    println!(
                        "{} frames, {} tracks, {} outliers written to {}",
                        sim.mission.frames.len(),
                        sim.tracks.tracks.len(),
                        sim.tracks.outliers.len(),
                        out.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    error!("{e}");
                    ExitCode::from(INPUT_ERROR)
                }
            }
        }
        Command::Metrics { dsm, header, markers, pairs, window_k } => {
            if window_k == 0 {
                error!("window_k must be at least 1");
                return ExitCode::from(CONFIG_ERROR);
            }
            match metrics(&dsm, header, markers.zip(pairs), window_k) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    error!("{e}");
                    ExitCode::from(INPUT_ERROR)
                }
            }
        }
        Command::Validate { input } => match validate_inputs(&input) {
            Ok(s) => {
                println!("ok: {} frames, {} tracks, {} markers", s.frames.len(), s.tracks.len(), s.markers.len());
                ExitCode::SUCCESS
            }
            Err(diags) => {
                for d in &diags {
                    println!("{d}");
                }
                ExitCode::from(INPUT_ERROR)
            }
        },
        Command::DensifyWorker { scale, dir } => match serve_request(&dir, scale) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                error!("{e}");
                ExitCode::from(INPUT_ERROR)
            }
        },
    }
}

fn load_sim_config(path: &Path) -> Result<SimConfig, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn metrics(dsm: &Path, header: Option<PathBuf>, markers: Option<(PathBuf, PathBuf)>, k: usize) -> Result<(), String> {
    let header = header.unwrap_or_else(|| dsm.with_extension("hdr"));
    let bytes = fs::read(dsm).map_err(|e| format!("{}: {e}", dsm.display()))?;
    let hdr = fs::File::open(&header).map_err(|e| format!("{}: {e}", header.display()))?;
    let raster = io::read_dsm(&bytes, BufReader::new(hdr)).map_err(|e| e.to_string())?;
    let report = quality_report(&raster, k).map_err(|e| e.to_string())?;
    let errors = match markers {
        Some((m, p)) => {
            let read = |path: &Path| fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()));
            let measured: Vec<MarkerRecord> = io::read_csv(read(&m)?, &m.display().to_string()).map_err(join)?;
            let gt: Vec<MarkerPairRecord> = io::read_csv(read(&p)?, &p.display().to_string()).map_err(join)?;
            Some(marker_pair_errors(&measured, &gt).ok_or("no marker pair could be evaluated")?.0)
        }
        None => None,
    };
    let mut out = std::io::stdout().lock();
    io::write_report(&mut out, &report, errors.as_ref()).map_err(|e| e.to_string())?;
    out.flush().map_err(|e| e.to_string())
}

fn join(diags: Vec<io::Diagnostic>) -> String {
    diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n")
}
