use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gossipq::compression::{Compression, Compressor};
use gossipq::config::{parse_config, resolve, run_config, sweep, ConfigError, RunConfig, SweepAxis};
use gossipq::costmodel::{self, Workload, BANDWIDTH_GRID, LATENCY_GRID};
use gossipq::engine::RunStatus;

const CONFIG_HELP: &str = "\
Config file (TOML). Required keys: algorithm, gamma, T, [topology], [problem].

  algorithm     dpsgd | naive | dcd | ecd | centralized
  gamma         step size, or \"theory\" for the theory-suggested value
  T             number of iterations
  seed          master seed for sampling and compression            [0]
  seeds         seed list used by sweeps                            [[seed]]
  problem_seed  seed of the problem instance                        [0]
  trace_every   trace subsampling interval                          [1]
  init_scale    std. dev. of the shared Gaussian starting point     [1.0]
  threshold     grad_norm2 level for time_to_threshold              [1e-6]
  parallel      run node computations on a thread pool              [false]
  out           trace CSV path; stdout when absent

  [topology]    kind = ring | complete | custom, n, edges = [[i, j], ...] for custom
  [problem]     kind = quadratic: dim, heterogeneity [0], noise [0], condition [10], smoothness [1]
                kind = logistic: dim, samples_per_node [32], separation [0], reg [0.1],
                                 split = mixed | bynode [mixed]
  [compressor]  kind = identity (default) | quantize: levels, norm = inf | l2 [inf]
                | sparsify: keep_prob | synthetic: noise_bound
  [network]     bandwidth bits/s [1.4e9], latency s [0.13e-3], compute_s per step [0]

Exit codes: 0 completed, 2 diverged, 1 configuration or I/O error.";

#[derive(Parser, Debug)]
#[command(name = "gossipq", version, about = "Decentralized SGD with compressed gossip", after_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one simulation and write its trace CSV.
    Run(RunArgs),
    /// Print spectral quantities, feasibility verdicts, rate constants and suggested step sizes.
    Theory(ConfigArgs),
    /// Print the epoch wall-clock grid for allreduce and gossip.
    Cost(CostArgs),
    /// Run a config over a list of values for one axis, one summary row per value and seed.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Path to the TOML config.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output CSV path; overrides `out` in the config. Stdout when neither is set.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// gamma | levels | n | seed | bandwidth | latency
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Output CSV path. Stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single master seed; overrides `seed` and `seeds` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CostArgs {
    /// Model dimension.
    #[arg(long, default_value_t = Workload::default().dim)]
    dim: usize,
    /// Worker count.
    #[arg(long, default_value_t = Workload::default().nodes)]
    nodes: usize,
    /// Gossip neighbors per worker.
    #[arg(long, default_value_t = Workload::default().degree)]
    degree: usize,
    /// Steps per epoch.
    #[arg(long, default_value_t = Workload::default().steps_per_epoch)]
    steps: usize,
    /// Compute seconds per step.
    #[arg(long, default_value_t = Workload::default().compute_per_step)]
    compute: f64,
    /// Quantizer levels used for the compressed message size.
    #[arg(long, default_value_t = 127)]
    levels: u32,
    /// Comma-separated bandwidths in bits/s.
    #[arg(long, value_delimiter = ',', default_values_t = BANDWIDTH_GRID)]
    bandwidths: Vec<f64>,
    /// Comma-separated latencies in seconds.
    #[arg(long, value_delimiter = ',', default_values_t = LATENCY_GRID)]
    latencies: Vec<f64>,
    /// Output CSV path. Stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Config(ConfigError),
    Io(PathBuf, io::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

fn load(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(path.to_path_buf(), e))?;
    Ok(parse_config(&text)?)
}

fn with_output<F>(path: Option<&Path>, f: F) -> Result<(), Failure>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    let io_err = |e| Failure::Io(path.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf), e);
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(io_err)?);
            f(&mut w).and_then(|_| w.flush()).map_err(io_err)
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            match f(&mut w).and_then(|_| w.flush()) {
                Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
                r => r.map_err(io_err),
            }
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, Failure> {
    let mut cfg = load(&args.config.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out_path = args.out.or_else(|| cfg.out.as_ref().map(PathBuf::from));
    let (resolved, output) = run_config(&cfg)?;
    for w in &resolved.warnings {
        eprintln!("warning: {w}");
    }
    with_output(out_path.as_deref(), |w| resolved.write_trace_csv(&output, w))?;
    let s = &output.summary;
    eprintln!(
        "{}: {} steps, final loss {:e}, final grad_norm2 {:e}, gamma {}",
        s.status.label(),
        s.steps_completed,
        s.final_loss,
        s.final_grad_norm2,
        resolved.gamma
    );
    Ok(match s.status {
        RunStatus::Completed => ExitCode::SUCCESS,
        RunStatus::Diverged { .. } => ExitCode::from(2),
    })
}

fn cmd_theory(args: ConfigArgs) -> Result<ExitCode, Failure> {
    let cfg = load(&args.config)?;
    let resolved = resolve(&cfg)?;
    for w in &resolved.warnings {
        eprintln!("warning: {w}");
    }
    let report = resolved.theory_report()?;
    println!("algorithm = {}", cfg.algorithm);
    println!("compressor = {}", cfg.compressor.label());
    println!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_cost(args: CostArgs) -> Result<ExitCode, Failure> {
    let compressor = Compressor::quantize(args.levels);
    compressor.validate().map_err(|e| ConfigError::new("levels", e))?;
    let work = Workload {
        dim: args.dim,
        nodes: args.nodes,
        degree: args.degree,
        steps_per_epoch: args.steps,
        compute_per_step: args.compute,
        compression_ratio: compressor.bits_transmitted(args.dim) as f64
            / (gossipq::compression::FULL_PRECISION_BITS * args.dim as u64) as f64,
    };
    if work.nodes < 2 {
        return Err(ConfigError::new("nodes", "need at least 2 workers").into());
    }
    for &b in &args.bandwidths {
        if !(b > 0.0 && b.is_finite()) {
            return Err(ConfigError::new("bandwidths", format!("bandwidth must be positive, got {b}")).into());
        }
    }
    for &l in &args.latencies {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(ConfigError::new("latencies", format!("latency must be nonnegative, got {l}")).into());
        }
    }
    let rows = costmodel::grid(&work, &args.bandwidths, &args.latencies);
    let report = costmodel::check_orderings(&work, &rows);
    eprintln!("orderings hold: {} ({report:?})", report.all());
    with_output(args.out.as_deref(), |w| {
        writeln!(
            w,
            "# dim = {}, nodes = {}, degree = {}, steps_per_epoch = {}, compute_per_step = {}, compression_ratio = {}",
            work.dim, work.nodes, work.degree, work.steps_per_epoch, work.compute_per_step, work.compression_ratio
        )?;
        writeln!(w, "{}", costmodel::CSV_HEADER)?;
        for r in &rows {
            writeln!(w, "{}", costmodel::csv_line(r))?;
        }
        Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode, Failure> {
    let mut cfg = load(&args.config.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.seeds.clear();
    }
    let axis: SweepAxis = args.axis.parse()?;
    let table = sweep(&cfg, axis, &args.values)?;
    with_output(args.out.as_deref(), |w| table.write_csv(w))?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Theory(a) => cmd_theory(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Io(path, e)) => {
            eprintln!("error: {}: {e}", path.display());
            ExitCode::from(1)
        }
    }
}
