use std::path::PathBuf;
use std::process::ExitCode;

use apc::models::Distribution;
use apc_cli::commands::{cmd_analyze, cmd_basis, cmd_doe, cmd_fit};
use apc_cli::config::{parse_inputs, read_config_file, ExperimentConfig, Method};
use apc_cli::error::CliError;
use apc_cli::minsamples::write_min_samples;
use apc_cli::pipeline::{plan_sample_counts, run_convergence_table, run_dir, run_pipeline};
use apc_cli::study::{run_topopt_study, TopOptStudyConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "apc", version, about = "Arbitrary polynomial chaos with gradient-enhanced regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Experiment settings. Fields present in `--config` take precedence over flags.
#[derive(Args, Clone)]
struct ExperimentArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Test function: cubic or sinusoidal.
    #[arg(long)]
    model: Option<String>,
    /// Input law: multimodal, gev, or a JSON distribution object.
    #[arg(long, value_parser = parse_inputs)]
    inputs: Option<Distribution>,
    #[arg(long)]
    n_u: Option<usize>,
    /// Comma-separated expansion orders.
    #[arg(long, value_delimiter = ',')]
    orders: Option<Vec<usize>>,
    #[arg(long)]
    n_o: Option<usize>,
    /// Monte Carlo pool size.
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<Method>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let d = ExperimentConfig::default();
        let cfg = ExperimentConfig {
            model: self.model.clone().unwrap_or(d.model),
            inputs: self.inputs.clone().unwrap_or(d.inputs),
            n_u: self.n_u.unwrap_or(d.n_u),
            orders: self.orders.clone().unwrap_or(d.orders),
            n_o: self.n_o.unwrap_or(d.n_o),
            pool_size: self.pool_size.unwrap_or(d.pool_size),
            seed: self.seed.unwrap_or(d.seed),
            output_dir: self.output_dir.clone().unwrap_or(d.output_dir),
            method: self.method.unwrap_or(d.method),
        };
        let cfg = match &self.config {
            Some(path) => cfg.overridden_by(read_config_file(path)?)?,
            None => cfg,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the moment-based basis of one order.
    Basis {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        order: usize,
        /// Defaults to <output-dir>/<method>-p<order>/basis.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select the design of experiments for a stored basis.
    Doe {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also evaluate the model at the design and write JSON lines here.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Fit a surrogate from a basis, a design and evaluation records.
    Fit {
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        doe: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum, default_value = "sear-pc")]
        method: Method,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a stored surrogate with Monte Carlo over the pool.
    Analyze {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        basis: PathBuf,
        /// model.json written by `fit`.
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// File caching the model values over the pool.
        #[arg(long)]
        mc_cache: Option<PathBuf>,
    },
    /// Run every configured order end to end and write all artifacts.
    Pipeline {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        mc_cache: Option<PathBuf>,
    },
    /// Error table over methods and orders, written to table.csv.
    Table {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Repeat to compare several methods; defaults to both.
        #[arg(long = "compare", value_enum)]
        methods: Vec<Method>,
        #[arg(long)]
        mc_cache: Option<PathBuf>,
    },
    /// Print the evaluation counts implied by the configuration.
    Counts {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Optimize the MBB half-beam and propagate density uncertainty.
    Topopt {
        /// JSON study config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        nelx: Option<usize>,
        #[arg(long)]
        nely: Option<usize>,
        #[arg(long)]
        pool_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluation counts per method over a range of input dimensions.
    Minsamples {
        #[arg(long, default_value_t = 1)]
        n_u_min: usize,
        #[arg(long, default_value_t = 100)]
        n_u_max: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        orders: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        n_o: usize,
        #[arg(long, default_value = "out/min_samples.csv")]
        out: PathBuf,
    },
}

fn topopt_config(
    config: Option<PathBuf>,
    nelx: Option<usize>,
    nely: Option<usize>,
    pool_size: Option<usize>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
) -> Result<TopOptStudyConfig, CliError> {
    let mut cfg: TopOptStudyConfig = match config {
        Some(path) => serde_json::from_value(read_config_file(&path)?).map_err(|e| CliError::Config(e.to_string()))?,
        None => TopOptStudyConfig::default(),
    };
    if let Some(v) = nelx {
        cfg.topopt.nelx = v;
    }
    if let Some(v) = nely {
        cfg.topopt.nely = v;
    }
    if let Some(v) = pool_size {
        cfg.uq.pool_size = v;
    }
    if let Some(v) = seed {
        cfg.uq.seed = v;
    }
    if let Some(v) = output_dir {
        cfg.output_dir = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Basis { exp, order, out } => {
            let cfg = exp.resolve()?;
            let out = out.unwrap_or_else(|| run_dir(&cfg, cfg.method, order).join("basis.json"));
            let n = cmd_basis(&cfg, order, &out)?;
            println!("P+1={n} -> {}", out.display());
        }
        Command::Doe { exp, basis, out, records } => {
            let cfg = exp.resolve()?;
            let (q, q_a) = cmd_doe(&cfg, &basis, &out, records.as_deref())?;
            println!("q={q} q_a={q_a} -> {}", out.display());
        }
        Command::Fit {
            basis,
            doe,
            records,
            method,
            out,
        } => {
            let model = cmd_fit(&basis, &doe, &records, method, &out)?;
            let d = model.diagnostics();
            println!(
                "rows={} rank={} condition={:.3e} -> {}",
                d.rows,
                d.rank,
                d.condition_estimate,
                out.display()
            );
        }
        Command::Analyze {
            exp,
            basis,
            surrogate,
            out_dir,
            mc_cache,
        } => {
            let cfg = exp.resolve()?;
            let r = cmd_analyze(&cfg, &basis, &surrogate, &out_dir, mc_cache.as_deref())?;
            println!(
                "mu={} sigma={} delta_mu_pct={} delta_sigma_pct={} ks={}",
                r.mean, r.std_dev, r.delta_mu_pct, r.delta_sigma_pct, r.ks
            );
        }
        Command::Pipeline { exp, mc_cache } => {
            let cfg = exp.resolve()?;
            for r in run_pipeline(&cfg, mc_cache.as_deref())? {
                println!(
                    "{} p={} q={} delta_mu_pct={:.3e} delta_sigma_pct={:.3e} ks={:.4}",
                    r.method.name(),
                    r.p,
                    r.q,
                    r.delta_mu_pct,
                    r.delta_sigma_pct,
                    r.ks
                );
            }
        }
        Command::Table { exp, methods, mc_cache } => {
            let cfg = exp.resolve()?;
            let methods = if methods.is_empty() {
                vec![Method::SearPc, Method::WlsqApc]
            } else {
                methods
            };
            let reports = run_convergence_table(&cfg, &methods, mc_cache.as_deref())?;
            println!("{} rows -> {}", reports.len(), cfg.output_dir.join("table.csv").display());
        }
        Command::Counts { exp } => {
            let cfg = exp.resolve()?;
            println!("method,p,n_terms,q,q_a");
            for c in plan_sample_counts(&cfg, &[Method::SearPc, Method::WlsqApc])? {
                println!("{},{},{},{},{}", c.method.name(), c.p, c.n_terms, c.q, c.q_a);
            }
        }
        Command::Topopt {
            config,
            nelx,
            nely,
            pool_size,
            seed,
            output_dir,
        } => {
            let cfg = topopt_config(config, nelx, nely, pool_size, seed, output_dir)?;
            let out = run_topopt_study(&cfg)?;
            let mc = &out.study.reference;
            println!("mc n={} mu={} sigma={}", mc.samples, mc.mean, mc.std_dev);
            for r in &out.study.rows {
                println!("{} q={} mu={} sigma={}", r.method, r.q, r.mean, r.std_dev);
            }
            println!(
                "top-{}% overlap: grid {:.3}, uncertain elements {:.3}",
                cfg.top_fraction * 100.0,
                out.overlap_grid,
                out.overlap_uncertain
            );
        }
        Command::Minsamples {
            n_u_min,
            n_u_max,
            orders,
            n_o,
            out,
        } => {
            if n_u_min == 0 || n_u_min > n_u_max || n_o == 0 || orders.is_empty() {
                return Err(CliError::Config("need 1 <= n_u_min <= n_u_max, n_o >= 1 and some orders".into()));
            }
            let rows = write_min_samples(&out, n_u_min..=n_u_max, &orders, n_o)?;
            println!("{} rows -> {}", rows, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.stage() {
                Some(stage) => eprintln!("error [{stage}]: {}", e_source(&e)),
                None => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn e_source(e: &CliError) -> String {
    match e {
        CliError::Stage { source, .. } => source.to_string(),
        other => other.to_string(),
    }
}
