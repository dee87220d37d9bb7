//! Command-line interface: data synthesis, single identifications,
//! Monte-Carlo jobs, and fault reports, all driven by a JSON job config.
//!
//! Exit codes: 0 success, 2 configuration error, 3 all Monte-Carlo runs
//! failed. Logs go to stderr; results are written to files only.

use clap::{Args, Parser, Subcommand};
use dcnident::experiment::{
    export, fault_report, run, ExperimentError, RunConfig, RunMode,
};
use dcnident::netmodel::{dcn_to_components, default_open_threshold, rlc_to_dcn};
use dcnident::signalgen::{generate_excitation, select_band, synth_frequency_data};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dcnident", version, about = "Identification of diffusively \
coupled networks and their RLC component values from frequency-domain data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct JobArgs {
    /// JSON job configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the Monte-Carlo run count.
    #[arg(long)]
    runs: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the Monte-Carlo loop.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize one frequency-domain dataset and write it as CSV.
    Simulate(JobArgs),
    /// One full-network identification run.
    Identify(JobArgs),
    /// One subnetwork identification run.
    Subnet(JobArgs),
    /// The configured Monte-Carlo job (full or subnet mode).
    Montecarlo(JobArgs),
    /// Monte-Carlo job plus a fault report against the nominal network.
    Report(JobArgs),
}

const EXIT_CONFIG: u8 = 2;
const EXIT_ALL_FAILED: u8 = 3;

fn load_config(args: &JobArgs) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| format!("cannot read {}: {e}", args.config.display()))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| format!("invalid config: {e}"))?;
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(r) = args.runs {
        cfg.mc_runs = r;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = Some(out.clone());
    }
    if let Some(w) = args.workers {
        cfg.workers = Some(w);
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> Result<&Path, String> {
    cfg.output_dir
        .as_deref()
        .ok_or_else(|| "no output directory (set output_dir in the config or pass --out)".into())
}

fn simulate(cfg: &RunConfig) -> Result<(), String> {
    let dir = output_dir(cfg)?.to_path_buf();
    let model = rlc_to_dcn(&cfg.network).map_err(|e| e.to_string())?;
    let mut ec = cfg.experiment.clone();
    ec.seed = cfg.master_seed;
    let exc =
        generate_excitation(&ec, &cfg.network.excitation_nodes).map_err(|e| e.to_string())?;
    let full = synth_frequency_data(&model, &ec, &exc.dft).map_err(|e| e.to_string())?;
    let ds = select_band(&full, ec.band_hz).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;

    let mut csv = String::from("bin,freq_hz");
    for q in 0..ds.excitation_count() {
        csv.push_str(&format!(",r{q}_re,r{q}_im"));
    }
    for i in 0..ds.node_count() {
        csv.push_str(&format!(",w{i}_re,w{i}_im"));
    }
    csv.push('\n');
    for k in 0..ds.freq_count() {
        let f_hz = ds.grid[k] / (2.0 * std::f64::consts::PI);
        csv.push_str(&format!("{},{:.12e}", ds.band_indices[k], f_hz));
        for q in 0..ds.excitation_count() {
            csv.push_str(&format!(",{:.12e},{:.12e}", ds.r[q][k].re, ds.r[q][k].im));
        }
        for i in 0..ds.node_count() {
            csv.push_str(&format!(",{:.12e},{:.12e}", ds.w[i][k].re, ds.w[i][k].im));
        }
        csv.push('\n');
    }
    let path = dir.join("dataset.csv");
    std::fs::write(&path, csv).map_err(|e| e.to_string())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run_job(cfg: &RunConfig, with_fault_report: bool) -> Result<(), ExitCode> {
    let dir = match output_dir(cfg) {
        Ok(d) => d.to_path_buf(),
        Err(e) => {
            eprintln!("error: {e}");
            return Err(ExitCode::from(EXIT_CONFIG));
        }
    };
    eprintln!(
        "running {} run(s), mode {:?}, master seed {}",
        cfg.mc_runs * cfg.sweep_lengths.len().max(1),
        cfg.mode,
        cfg.master_seed
    );
    let result = match run(cfg) {
        Ok(r) => r,
        Err(ExperimentError::AllRunsFailed(n, first)) => {
            eprintln!("error: all {n} runs failed; first error: {first}");
            return Err(ExitCode::from(EXIT_ALL_FAILED));
        }
        Err(e) => {
            eprintln!("error: {e}");
            return Err(ExitCode::from(EXIT_CONFIG));
        }
    };
    eprintln!(
        "{} run(s) done in {:.1}s ({} failed, {} non-converged)",
        result.records.len(),
        result.wall_clock_secs,
        result.failed,
        result.non_converged
    );
    if let Err(e) = export(&result, cfg, &dir) {
        eprintln!("error: export failed: {e}");
        return Err(ExitCode::from(EXIT_CONFIG));
    }
    if with_fault_report {
        if let Err(e) = write_fault_report(cfg, &result, &dir) {
            eprintln!("error: fault report failed: {e}");
            return Err(ExitCode::from(EXIT_CONFIG));
        }
    }
    eprintln!("results written to {}", dir.display());
    Ok(())
}

fn write_fault_report(
    cfg: &RunConfig,
    result: &dcnident::experiment::RunResult,
    dir: &Path,
) -> Result<(), String> {
    let nominal_net = cfg.nominal_network.as_ref().unwrap_or(&cfg.network);
    let nominal_model = rlc_to_dcn(nominal_net).map_err(|e| e.to_string())?;
    let thr = default_open_threshold(&nominal_model, nominal_net);
    let nominal =
        dcn_to_components(&nominal_model, nominal_net, &thr).map_err(|e| e.to_string())?;
    // mean estimate per component, expressed as ComponentEstimate records
    let mean_estimates: Vec<_> = result
        .components
        .iter()
        .map(|c| dcnident::netmodel::ComponentEstimate {
            idx: c.idx,
            name: c.name.clone(),
            value: c.value_from_mean.unwrap_or(f64::INFINITY),
            unit: c.unit,
            coefficient: c.mean_coefficient,
        })
        .collect();
    let rep = fault_report(&mean_estimates, &nominal, cfg.rpe_threshold_percent);
    let json = serde_json::to_string_pretty(&rep).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("fault_report.json"), json + "\n").map_err(|e| e.to_string())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, forced_mode, single, with_report) = match &cli.cmd {
        Cmd::Simulate(a) => (a, None, false, false),
        Cmd::Identify(a) => (a, Some(RunMode::Full), true, false),
        Cmd::Subnet(a) => (a, Some(RunMode::Subnet), true, false),
        Cmd::Montecarlo(a) => (a, None, false, false),
        Cmd::Report(a) => (a, None, false, true),
    };
    let mut cfg = match load_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(mode) = forced_mode {
        cfg.mode = mode;
    }
    if single {
        cfg.mc_runs = 1;
        cfg.sweep_lengths.clear();
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }

    match &cli.cmd {
        Cmd::Simulate(_) => match simulate(&cfg) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
        _ => match run_job(&cfg, with_report) {
            Ok(()) => ExitCode::SUCCESS,
            Err(code) => code,
        },
    }
}
