//! Command-line front end for the trap/cavity simulator.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cavtrap::experiments::{self, ExperimentConfig, PhaseChannel};

#[derive(Parser)]
#[command(name = "cavtrap", version, about = "Endcap trap + fibre cavity simulator")]
struct Cli {
    /// Path to a TOML run configuration. Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for CSV/JSON artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Also print the JSON summary to stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the unit-voltage basis potentials and export them as CSV.
    SolveFields {
        /// Grid spacing in micrometres.
        #[arg(long, default_value_t = 10.0)]
        spacing_um: f64,
        /// Relaxation tolerance.
        #[arg(long, default_value_t = 1e-8)]
        tolerance: f64,
    },
    /// Calibrate the trap model against the configured targets.
    Calibrate,
    /// Secular frequencies across the main-drive grid.
    SecularScan,
    /// Null position against the scanned rf amplitude.
    MinimumScan,
    /// Rf-correlation micromotion amplitude against auxiliary-source phase.
    PhaseScan {
        /// Detection channel: radial (fluorescence) or axial (cavity).
        #[arg(long, default_value = "radial")]
        channel: String,
    },
    /// Cavity standing-wave map via the differential inner voltage.
    AxialScan,
    /// Radial cavity-mode map from spectral areas.
    RadialMap,
    /// Camera displacement calibration against the generator amplitude.
    DisplacementCal,
    /// Cavity-length lock: margins, residual, Bode data.
    ServoSim,
    /// Run the whole experiment suite.
    RunAll,
}

fn load_config(cli: &Cli) -> cavtrap::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn print_summary(cli: &Cli, paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
    if cli.json {
        for p in paths.iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
            if let Ok(text) = std::fs::read_to_string(p) {
                println!("{text}");
            }
        }
    }
}

fn run(cli: &Cli) -> cavtrap::Result<()> {
    let cfg = load_config(cli)?;
    let out = cli.out.clone();
    let paths = match &cli.command {
        Command::SolveFields { spacing_um, tolerance } => {
            experiments::run_solve_fields(&cfg, spacing_um * 1e-6, *tolerance)?.write(&out)?
        }
        Command::Calibrate => {
            let (model, report) = experiments::calibrate(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let model_path = out.join("model.toml");
            std::fs::write(&model_path, model.to_toml()?)?;
            let meta = experiments::RunMeta {
                experiment: "calibrate".into(),
                seed: cfg.master_seed,
                config_hash: cfg.hash(),
            };
            let report_json = serde_json::to_value(&report)
                .map_err(|e| cavtrap::Error::Serialization(e.to_string()))?;
            let json = experiments::write_json_summary(&out, "calibration", &meta, report_json)?;
            vec![model_path, json]
        }
        Command::SecularScan => experiments::run_secular_slope_scan(&cfg)?.write(&out)?,
        Command::MinimumScan => experiments::run_minimum_scan(&cfg)?.write(&out)?,
        Command::PhaseScan { channel } => {
            let channel = match channel.as_str() {
                "radial" => PhaseChannel::Radial,
                "axial" => PhaseChannel::Axial,
                other => {
                    return Err(cavtrap::Error::Config(format!(
                        "unknown channel `{other}`; expected `radial` or `axial`"
                    )))
                }
            };
            experiments::run_phase_scan(&cfg, channel)?.write(&out)?
        }
        Command::AxialScan => experiments::run_axial_standing_wave_scan(&cfg)?.write(&out)?,
        Command::RadialMap => experiments::run_radial_mode_map(&cfg)?.write(&out)?,
        Command::DisplacementCal => experiments::run_displacement_calibration(&cfg)?.write(&out)?,
        Command::ServoSim => experiments::run_servo_sim(&cfg)?.write(&out)?,
        Command::RunAll => experiments::run_all(&cfg, &out)?,
    };
    print_summary(cli, &paths);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
