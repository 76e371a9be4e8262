//! `cciv`: combined Wald / jackknife inference for clustered IV data.
//!
//! Exit codes: 0 success, 2 invalid input (bad flags, unreadable or invalid
//! data, bad config), 3 numerical failure.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cciv::oracle::{mc_limit_experiment, LimitExperimentSpec};
use cciv::simulator::{gen_dataset, power_curve, power_svg, DGPConfig};
use cciv::{load_csv, run_inference, validate, CcivError, InferenceConfig, Weighting};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cciv", version, about = "Combined inference for clustered IV regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Test H0: beta = beta0 on a dataset and print the report.
    Infer(InferArgs),
    /// Check the regularity conditions of a dataset.
    Validate(ValidateArgs),
    /// Write one simulated dataset as CSV.
    Simulate(SimulateArgs),
    /// Rejection-rate curves of the Wald, LM, AR and combined tests.
    Power(PowerArgs),
    /// Monte Carlo comparison in the trivariate normal limit experiment.
    LimitExperiment(LimitArgs),
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Dataset with columns cluster_id,y,x,w_*,zl_*,z_*.
    #[arg(long)]
    data: PathBuf,
    /// Null value of the coefficient.
    #[arg(long, allow_negative_numbers = true)]
    beta0: f64,
    /// Significance level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weighting of the low-dimensional GMM estimator: tsls or gmm.
    #[arg(long, value_parser = parse_weighting)]
    weighting: Option<Weighting>,
    /// Inference settings as key = value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Demean every column within clusters before estimation.
    #[arg(long)]
    demean: bool,
    /// Print the one-row CSV form (with header) instead of the text block.
    #[arg(long)]
    csv: bool,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Dataset with columns cluster_id,y,x,w_*,zl_*,z_*.
    #[arg(long)]
    data: PathBuf,
    /// Demean every column within clusters first.
    #[arg(long)]
    demean: bool,
}

#[derive(Args, Debug)]
struct SimulationSource {
    /// Named design, e.g. paper-fig3-desk.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Design as key = value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; falls back to CCIV_SEED, then to the design's seed.
    #[arg(long, env = "CCIV_SEED")]
    seed: Option<u64>,
}

impl SimulationSource {
    fn load(&self) -> Result<DGPConfig, CcivError> {
        let mut config = match (&self.preset, &self.config) {
            (Some(name), _) => DGPConfig::preset(name)?,
            (None, Some(path)) => DGPConfig::from_file(path)?,
            (None, None) => DGPConfig::preset("paper-fig3-desk")?,
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    source: SimulationSource,
    /// Replication index of the dataset to write.
    #[arg(long, default_value_t = 0)]
    rep: u64,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PowerArgs {
    #[command(flatten)]
    source: SimulationSource,
    /// Number of replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Significance level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weighting of the low-dimensional GMM estimator: tsls or gmm.
    #[arg(long, value_parser = parse_weighting)]
    weighting: Option<Weighting>,
    /// Write the table as CSV to stdout (the default when --out is absent).
    #[arg(long)]
    csv: bool,
    /// Write the table as CSV to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a line chart to this file.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LimitArgs {
    /// Slope of the Wald mean in delta.
    #[arg(long, default_value_t = 1.0)]
    a1: f64,
    /// Slope of the LM mean in delta.
    #[arg(long, default_value_t = 1.0)]
    a2: f64,
    /// Correlation of the Wald and LM components.
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    rho1: f64,
    /// Correlation of the LM and AR components.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    rho2: f64,
    /// Comma-separated local alternatives.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true,
          default_value = "-2,-1,-0.5,0,0.5,1,2")]
    deltas: Vec<f64>,
    /// Number of draws.
    #[arg(long, default_value_t = 100_000)]
    reps: usize,
    /// Seed; falls back to CCIV_SEED.
    #[arg(long, env = "CCIV_SEED", default_value_t = 20_240_601)]
    seed: u64,
    /// Significance level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Write the table to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_weighting(s: &str) -> Result<Weighting, String> {
    s.parse().map_err(|e: CcivError| e.to_string())
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn infer(args: &InferArgs) -> Result<(), CcivError> {
    let mut config = match &args.config {
        Some(path) => InferenceConfig::parse(&std::fs::read_to_string(path)?)?,
        None => InferenceConfig::default(),
    };
    if let Some(a) = args.alpha {
        if !(a > 0.0 && a < 1.0) {
            return Err(CcivError::InvalidInput(format!("--alpha must lie in (0, 1), got {a}")));
        }
        config.alpha_level = a;
    }
    if let Some(w) = args.weighting {
        config.weighting = w;
    }
    let mut data = load_csv(&args.data, None)?;
    if args.demean {
        data = data.demean_within_clusters();
    }
    let report = run_inference(&data, args.beta0, &config)?;
    let mut out = output(args.out.as_deref())?;
    if args.csv {
        writeln!(out, "{}", cciv::combiner::REPORT_CSV_HEADER)?;
        writeln!(out, "{}", report.csv_row())?;
    } else {
        write!(out, "{report}")?;
    }
    out.flush()?;
    Ok(())
}

fn validate_cmd(args: &ValidateArgs) -> Result<(), CcivError> {
    let mut data = load_csv(&args.data, None)?;
    if args.demean {
        data = data.demean_within_clusters();
    }
    let report = validate(&data);
    print!("{report}");
    println!("summary: {}", report.summary());
    report.into_result().map(|_| ())
}

fn simulate(args: &SimulateArgs) -> Result<(), CcivError> {
    let config = args.source.load()?;
    let (data, _) = gen_dataset(&config, args.rep)?;
    let mut out = output(args.out.as_deref())?;
    cciv::data::write_csv(&data, &mut out)?;
    out.flush()?;
    Ok(())
}

fn power(args: &PowerArgs) -> Result<(), CcivError> {
    let mut config = args.source.load()?;
    if let Some(r) = args.reps {
        config.replications = r;
    }
    if let Some(a) = args.alpha {
        config.alpha_level = a;
    }
    if let Some(w) = args.weighting {
        config.weighting = w;
    }
    config.validate()?;
    let table = power_curve(&config, args.workers)?;
    if let Some(path) = &args.out {
        let mut f = BufWriter::new(File::create(path)?);
        table.write_csv(&mut f)?;
        f.flush()?;
    }
    if args.csv || args.out.is_none() {
        let stdout = io::stdout();
        let mut lock = stdout.lock();
        table.write_csv(&mut lock)?;
    }
    if let Some(path) = &args.svg {
        let title = format!(
            "K = {}, phi = {}, psi = {}, n = {}, G = {}",
            config.num_many_iv, config.phi, config.psi, config.n, config.clusters
        );
        std::fs::write(path, power_svg(&table, &title))?;
    }
    eprintln!(
        "max power gap combined - wald: {:.4}; invalid replications: {}",
        table.max_gap_combined_wald(),
        table.invalid_count()
    );
    Ok(())
}

fn limit(args: &LimitArgs) -> Result<(), CcivError> {
    let spec = LimitExperimentSpec {
        a1: args.a1,
        a2: args.a2,
        rho1: args.rho1,
        rho2: args.rho2,
        deltas: args.deltas.clone(),
        replications: args.reps,
        seed: args.seed,
        alpha_level: args.alpha,
    };
    let pool = rayon_pool(args.workers)?;
    let table = pool.install(|| mc_limit_experiment(&spec))?;
    let mut out = output(args.out.as_deref())?;
    table.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn rayon_pool(workers: Option<usize>) -> Result<rayon::ThreadPool, CcivError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| CcivError::InvalidInput(format!("cannot build worker pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Infer(a) => infer(a),
        Command::Validate(a) => validate_cmd(a),
        Command::Simulate(a) => simulate(a),
        Command::Power(a) => power(a),
        Command::LimitExperiment(a) => limit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
