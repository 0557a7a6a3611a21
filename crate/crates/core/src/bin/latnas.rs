use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use latnas::coordinator::{
    checkpoint::CheckpointStore, run_client, run_lockstep, serve, ClientConfig, CoordinatorConfig, ServerOptions,
    ServerState,
};
use latnas::evaluators;
use latnas::latency::{
    build_table, layer_keys_of, AnalyticCostModel, ExternalCommandBackend, LatencyBackend, LatencyEstimator,
    LatencyTable, TableMetadata,
};
use latnas::report::{build_report, write_report, ResultSet};
use latnas::sampler::{sample_encodings, stratify, write_encodings, write_stratification, DEFAULT_SKIP};
use latnas::search_space::SearchSpaceSpec;

#[derive(Parser)]
#[command(name = "latnas", version, about = "Latency-stratified neural architecture search")]
struct Cli {
    /// Search space as JSON; defaults to the built-in 41-digit space.
    #[arg(long, global = true)]
    space: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write Sobol-quantized encodings, one CSV row per network.
    Sample {
        #[arg(long, default_value_t = 1024)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_SKIP)]
        skip: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark every layer used by a set of sampled networks.
    BuildTable {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_SKIP)]
        skip: u64,
        /// `analytic`, or `command:<program and args>` reading a key on stdin.
        #[arg(long, default_value = "analytic")]
        backend: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Existing table to extend; its entries are not re-measured.
        #[arg(long)]
        existing: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partition sampled networks into latency buckets.
    Stratify {
        /// Bucket upper bounds in ms, e.g. `0.5,1,2`.
        #[arg(long, value_delimiter = ',', required = true)]
        bounds: Vec<f64>,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_SKIP)]
        skip: u64,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the search server for one bucket.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Evaluate proposals from a server until it shuts down.
    Client {
        #[arg(long)]
        server: String,
        #[arg(long, default_value = "surrogate")]
        evaluator: String,
        #[arg(long)]
        noise_seed: Option<u64>,
        #[arg(long)]
        client_id: Option<String>,
    },
    /// Server and clients in one process, fully deterministic.
    Search {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "surrogate")]
        evaluator: String,
        #[arg(long)]
        noise_seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        clients: usize,
        /// Directory for report CSVs; defaults to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Model-hub table, Pareto frontier and plot data from result logs.
    Report {
        /// Checkpoint directories or result logs.
        #[arg(long, value_delimiter = ',', required = true)]
        logs: Vec<PathBuf>,
        /// Rows per bucket in the model-hub table.
        #[arg(long, default_value_t = 1)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Latency bucket `lo:hi` in ms; `hi` may be `inf`.
    #[arg(long)]
    bucket: String,
    #[arg(long)]
    budget: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    checkpoint_dir: PathBuf,
    /// Coordinator settings as JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    table: Option<PathBuf>,
}

/// Failure kinds mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn parse_bucket(text: &str) -> Result<(f64, Option<f64>), Failure> {
    let bad = || Failure::Usage(format!("--bucket expects lo:hi, got {text:?}"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi = match hi.trim() {
        "inf" | "" => None,
        v => Some(v.parse::<f64>().map_err(|_| bad())?),
    };
    if !(lo >= 0.0 && hi.is_none_or(|h| h > lo)) {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn load_space(path: Option<&Path>) -> Result<SearchSpaceSpec, Failure> {
    match path {
        None => Ok(SearchSpaceSpec::table1()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn load_table(path: &Path) -> Result<LatencyTable, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    LatencyTable::parse(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn estimator(space: &SearchSpaceSpec, table: Option<&Path>) -> Result<LatencyEstimator, Failure> {
    Ok(match table {
        Some(p) => LatencyEstimator::new(space.clone(), load_table(p)?),
        None => LatencyEstimator::analytic(space.clone()),
    })
}

fn coordinator_config(run: &RunArgs) -> Result<CoordinatorConfig, Failure> {
    let mut cfg = match &run.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => CoordinatorConfig::default(),
    };
    let (lo, hi) = parse_bucket(&run.bucket)?;
    cfg.bucket_lower_ms = lo;
    cfg.bucket_upper_ms = hi;
    cfg.budget = run.budget;
    cfg.seed = run.seed;
    cfg.check().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn evaluator(name: &str, space: &SearchSpaceSpec, noise_seed: Option<u64>) -> Result<Box<dyn evaluators::Evaluator>, Failure> {
    evaluators::by_name(name, space.clone(), noise_seed)
        .ok_or_else(|| Failure::Usage(format!("unknown evaluator {name:?}; expected ackley or surrogate")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let space = load_space(cli.space.as_deref())?;
    match cli.command {
        Cmd::Sample { samples, skip, out } => {
            let encodings = sample_encodings(&space, samples, skip).map_err(runtime)?;
            write_encodings(&out, &encodings).map_err(runtime)?;
        }
        Cmd::BuildTable {
            samples,
            skip,
            backend,
            workers,
            existing,
            out,
        } => {
            let backend: Box<dyn LatencyBackend> = match backend.as_str() {
                "analytic" => Box::new(AnalyticCostModel::default()),
                other => {
                    let line = other
                        .strip_prefix("command:")
                        .ok_or_else(|| Failure::Usage(format!("unknown backend {other:?}")))?;
                    Box::new(
                        ExternalCommandBackend::from_command_line(line)
                            .ok_or_else(|| Failure::Usage("empty backend command".into()))?,
                    )
                }
            };
            let existing = match existing {
                Some(p) => load_table(&p)?,
                None => LatencyTable::new(TableMetadata::for_backend(backend.as_ref())),
            };
            let mut keys = BTreeSet::new();
            for e in sample_encodings(&space, samples, skip).map_err(runtime)? {
                keys.extend(layer_keys_of(&space.decode(&e).map_err(runtime)?));
            }
            match build_table(keys, backend.as_ref(), workers, existing) {
                Ok(table) => fs::write(&out, table.serialize()).map_err(runtime)?,
                Err(e) => {
                    fs::write(&out, e.partial.serialize()).map_err(runtime)?;
                    let failures = out.with_extension("failures");
                    fs::write(&failures, e.failure_manifest()).map_err(runtime)?;
                    return Err(Failure::Runtime(format!(
                        "{} layers failed; see {}",
                        e.failures.len(),
                        failures.display()
                    )));
                }
            }
        }
        Cmd::Stratify {
            bounds,
            samples,
            skip,
            table,
            out,
        } => {
            let est = estimator(&space, table.as_deref())?;
            let encodings = sample_encodings(&space, samples, skip).map_err(runtime)?;
            let buckets = stratify(&encodings, &est, &bounds).map_err(|e| match e {
                e @ latnas::sampler::SamplerError::InvalidBounds => Failure::Usage(e.to_string()),
                other => runtime(other),
            })?;
            write_stratification(&out, &buckets).map_err(runtime)?;
        }
        Cmd::Serve { run, port, host } => {
            let cfg = coordinator_config(&run)?;
            let est = estimator(&space, run.table.as_deref())?;
            let mut opts = ServerOptions::new(cfg, space, &run.checkpoint_dir);
            opts.bind = format!("{host}:{port}");
            let handle = serve(opts, est).map_err(runtime)?;
            eprintln!("listening on {}", handle.local_addr());
            let summary = handle.wait().map_err(runtime)?;
            eprintln!("{} results recorded", summary.results);
        }
        Cmd::Client {
            server,
            evaluator: name,
            noise_seed,
            client_id,
        } => {
            let eval = evaluator(&name, &space, noise_seed)?;
            let id = client_id.unwrap_or_else(|| format!("client-{}", std::process::id()));
            let mut cfg = ClientConfig::new(server, id);
            cfg.give_up_after = Duration::from_secs(300);
            let report = run_client(&cfg, eval.as_ref()).map_err(runtime)?;
            eprintln!("{} jobs completed", report.completed.len());
            if !report.shutdown {
                return Err(Failure::Runtime("server unreachable".into()));
            }
        }
        Cmd::Search {
            run,
            evaluator: name,
            noise_seed,
            clients,
            out,
        } => {
            let cfg = coordinator_config(&run)?;
            let est = estimator(&space, run.table.as_deref())?;
            let eval = evaluator(&name, &space, noise_seed)?;
            let (mut store, recovered) =
                CheckpointStore::open(&run.checkpoint_dir, cfg.manifest()).map_err(runtime)?;
            let mut state = ServerState::restore(cfg, space, recovered.snapshot, recovered.results);
            run_lockstep(&mut state, &est, eval.as_ref(), clients, Some(&mut store)).map_err(runtime)?;
            let set = ResultSet::load(&run.checkpoint_dir).map_err(runtime)?;
            let report = build_report(&[set], 1).map_err(runtime)?;
            write_report(out.as_deref().unwrap_or(&run.checkpoint_dir), &report).map_err(runtime)?;
            if let Some(best) = report.hub.first() {
                println!("{} {} ms {}", best.name, best.estimated_latency_ms, best.objective);
            }
        }
        Cmd::Report { logs, top, out } => {
            let sets = logs
                .iter()
                .map(|p| ResultSet::load(p))
                .collect::<Result<Vec<_>, _>>()
                .map_err(runtime)?;
            let report = build_report(&sets, top.max(1)).map_err(runtime)?;
            write_report(&out, &report).map_err(runtime)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {}", m.lines().next().unwrap_or_default());
            ExitCode::from(2)
        }
    }
}
