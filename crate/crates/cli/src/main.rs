mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedsim_core::analysis::{disparity_profile, rank_change_profile, write_disparity_csv};
use fedsim_core::params::ParamVector;
use fedsim_core::simulation::{run_scenario, RoundLog, ScenarioConfig, Summary};

const VERSION: &str = env!("CARGO_PKG_VERSION");

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated-learning simulator with attack-tolerant aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's master_seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker thread count; never affects outputs.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the scenario once per value of a swept axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Importance-rank-change analysis over serialized checkpoints.
    Analyze {
        /// Previous-round global checkpoint.
        #[arg(long)]
        prev: PathBuf,
        /// Current global checkpoint.
        #[arg(long)]
        cur: PathBuf,
        /// Directory of local-model checkpoints (*.fpv). With benign/ and
        /// poisoned/ subdirectories, a disparity profile is emitted too.
        #[arg(long)]
        locals: PathBuf,
        #[arg(long, default_value_t = 50)]
        buckets: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepAxis {
    AttackerFraction,
    Beta,
    NClients,
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn report(self) -> ExitCode {
        match self {
            CliError::Config(msg) => {
                eprintln!("config error: {msg}");
                ExitCode::from(EXIT_CONFIG)
            }
            CliError::Runtime(msg) => {
                eprintln!("runtime error: {msg}");
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            workers,
        } => cmd_run(&config, &out, seed, workers),
        Command::Sweep {
            config,
            axis,
            values,
            out,
            seed,
            workers,
        } => cmd_sweep(&config, axis, &values, &out, seed, workers),
        Command::Analyze {
            prev,
            cur,
            locals,
            buckets,
            out,
        } => cmd_analyze(&prev, &cur, &locals, buckets, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}

fn init_workers(workers: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    config::parse_scenario(&text, seed).map_err(|e| CliError::Config(e.to_string()))
}

fn write_rounds_csv(path: &Path, logs: &[RoundLog]) -> Result<(), CliError> {
    let file = fs::File::create(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", RoundLog::CSV_HEADER)
        .and_then(|_| logs.iter().try_for_each(|l| writeln!(w, "{}", l.csv_row())))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_summary_csv(path: &Path, summary: &Summary) -> Result<(), CliError> {
    let asr = summary
        .mean_asr
        .map(|a| format!("{a:.6}"))
        .unwrap_or_default();
    fs::write(path, format!("mean_acc,mean_asr\n{:.6},{}\n", summary.mean_acc, asr))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_run(
    config_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    workers: Option<usize>,
) -> Result<(), CliError> {
    init_workers(workers)?;
    let scenario = load_scenario(config_path, seed)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;
    // manifest lands before the first round so a crashed run is replayable
    let manifest = config::manifest(&scenario, config_path, VERSION);
    fs::write(out_dir.join("manifest.txt"), manifest)
        .map_err(|e| CliError::Runtime(format!("manifest: {e}")))?;
    let (logs, summary) =
        run_scenario(&scenario).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_rounds_csv(&out_dir.join("rounds.csv"), &logs)?;
    write_summary_csv(&out_dir.join("summary.csv"), &summary)?;
    Ok(())
}

fn cmd_sweep(
    config_path: &Path,
    axis: SweepAxis,
    values: &[String],
    out_dir: &Path,
    seed: Option<u64>,
    workers: Option<usize>,
) -> Result<(), CliError> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    init_workers(workers)?;
    let base = load_scenario(config_path, seed)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;
    let mut rows = String::from("axis_value,acc,asr\n");
    for value in values {
        let mut scenario = base.clone();
        match axis {
            SweepAxis::AttackerFraction => {
                scenario.attacker_fraction = value
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad attacker_fraction '{value}'")))?;
            }
            SweepAxis::Beta => {
                scenario.beta = value
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad beta '{value}'")))?;
            }
            SweepAxis::NClients => {
                scenario.n_clients = value
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad n_clients '{value}'")))?;
            }
        }
        scenario
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let (_, summary) =
            run_scenario(&scenario).map_err(|e| CliError::Runtime(e.to_string()))?;
        let asr = summary
            .mean_asr
            .map(|a| format!("{a:.6}"))
            .unwrap_or_default();
        rows.push_str(&format!("{value},{:.6},{asr}\n", summary.mean_acc));
    }
    fs::write(out_dir.join("sweep.csv"), rows)
        .map_err(|e| CliError::Runtime(format!("sweep.csv: {e}")))?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<ParamVector, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    ParamVector::read_from(&mut std::io::BufReader::new(file))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_checkpoint_dir(dir: &Path) -> Result<Vec<ParamVector>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "fpv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!(
            "{}: no .fpv checkpoints found",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_checkpoint(p)).collect()
}

fn cmd_analyze(
    prev: &Path,
    cur: &Path,
    locals: &Path,
    buckets: usize,
    out_dir: &Path,
) -> Result<(), CliError> {
    let phi_prev = load_checkpoint(prev)?;
    let phi = load_checkpoint(cur)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;

    let benign_dir = locals.join("benign");
    let poisoned_dir = locals.join("poisoned");
    if benign_dir.is_dir() && poisoned_dir.is_dir() {
        let benign = load_checkpoint_dir(&benign_dir)?;
        let poisoned = load_checkpoint_dir(&poisoned_dir)?;
        let p_benign = rank_change_profile(&phi_prev, &phi, &benign, buckets)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let p_poisoned = rank_change_profile(&phi_prev, &phi, &poisoned, buckets)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let disparity = disparity_profile(&p_benign, &p_poisoned)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        write_profile(&out_dir.join("profile_benign.csv"), &p_benign)?;
        write_profile(&out_dir.join("profile_poisoned.csv"), &p_poisoned)?;
        let mut buf = Vec::new();
        write_disparity_csv(&mut buf, &p_benign.bucket_centers, &disparity)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(out_dir.join("disparity.csv"), buf)
            .map_err(|e| CliError::Runtime(format!("disparity.csv: {e}")))?;
    } else {
        let locals = load_checkpoint_dir(locals)?;
        let profile = rank_change_profile(&phi_prev, &phi, &locals, buckets)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        write_profile(&out_dir.join("profile.csv"), &profile)?;
    }
    Ok(())
}

fn write_profile(
    path: &Path,
    profile: &fedsim_core::analysis::RankChangeProfile,
) -> Result<(), CliError> {
    let mut buf = Vec::new();
    profile
        .write_csv(&mut buf)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, buf).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}
