use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use irg_core::branching::{mean_progeny, sample_batch, tail_fit, DEFAULT_CAP};
use irg_core::experiment::{emit_report, load_config, run_experiment, ConfigFile};
use irg_core::fixed_point::{negative_solution, r_kappa, survival_prob, IterationConfig};
use irg_core::graph::{assign_types, generate_graph, largest_component, AssignmentMode};
use irg_core::kernel::{check_conditions, operator_stats, Kernel};
use irg_core::rng::{stream, tag};
use irg_core::Error;

#[derive(Parser)]
#[command(
    name = "irglab",
    version,
    about = "Kernel analysis and random graph experiments"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Kernel document or experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Norms, r_κ, ρ_κ, conditions and the negative-solution probe.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-9)]
        bis_tol: f64,
    },
    /// Condition report only.
    Check {
        #[command(flatten)]
        common: Common,
    },
    /// One graph sample and its component statistics.
    SimulateGraph {
        #[command(flatten)]
        common: Common,
        /// Vertex count; defaults to the first n_grid entry of an experiment config.
        #[arg(long)]
        n: Option<u64>,
        #[arg(long)]
        iid: bool,
    },
    /// A batch of branching-process progenies.
    SimulateBranching {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: u64,
        /// Root label; defaults to the smallest label.
        #[arg(long)]
        root: Option<u32>,
    },
    /// Runs an experiment config and writes report.json and runs.csv.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

fn print_json(v: &Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(v)?;
    println!("{text}");
    Ok(())
}

fn write_json(dir: &Path, name: &str, v: &Value) -> Result<(), Error> {
    create_dir(dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn io_err(path: &Path, source: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_kernel(config: &ConfigFile) -> Result<Kernel, Error> {
    config
        .kernel_doc()
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

fn iteration(config: &ConfigFile) -> IterationConfig {
    match config {
        ConfigFile::Experiment(cfg) => cfg.iteration,
        ConfigFile::Kernel(_) => IterationConfig::default(),
    }
}

fn analyze(common: &Common, bis_tol: f64) -> Result<(), Error> {
    let config = load_config(&common.config)?;
    let kernel = load_kernel(&config)?;
    let cfg = iteration(&config);
    let r = r_kappa(&kernel, &cfg, bis_tol)?;
    let out = json!({
        "operator": operator_stats(&kernel)?,
        "conditions": check_conditions(&kernel),
        "r_kappa": r,
        "prediction": (r.excludes_one(bis_tol) && !r.saturated).then(|| 1.0 / r.midpoint().ln()),
        "rho": survival_prob(&kernel, &cfg)?,
        "negative_solution": negative_solution(&kernel, &cfg)?,
    });
    print_json(&out)?;
    if let Some(dir) = &common.out {
        write_json(dir, "analysis.json", &out)?;
    }
    Ok(())
}

fn check(common: &Common) -> Result<(), Error> {
    let config = load_config(&common.config)?;
    let kernel = load_kernel(&config)?;
    let out = json!({
        "conditions": check_conditions(&kernel),
        "c3": check_conditions(&kernel).c3(),
    });
    print_json(&out)?;
    if let Some(dir) = &common.out {
        write_json(dir, "conditions.json", &out)?;
    }
    Ok(())
}

fn simulate_graph(common: &Common, n: Option<u64>, iid: bool) -> Result<(), Error> {
    let config = load_config(&common.config)?;
    let kernel = load_kernel(&config)?;
    let n = match (n, &config) {
        (Some(n), _) => n,
        (None, ConfigFile::Experiment(cfg)) if !cfg.n_grid.is_empty() => cfg.n_grid[0],
        _ => {
            return Err(Error::Config(
                "--n is required for a kernel document".into(),
            ))
        }
    };
    let seed = common.seed.unwrap_or(0);
    let mode = if iid {
        AssignmentMode::Iid
    } else {
        AssignmentMode::Deterministic
    };
    let assignment = assign_types(kernel.space(), n, mode, &mut stream(seed, &[tag::ASSIGN]))?;
    let graph = generate_graph(&assignment, &kernel, seed)?;
    let stats = largest_component(&graph);
    let out = json!({
        "n": n,
        "seed": seed,
        "counts": assignment.counts,
        "edges": graph.edges.len(),
        "c1": stats.c1,
        "c2": stats.c2,
        "components": stats.histogram.values().sum::<u64>(),
        "histogram": stats.histogram,
    });
    print_json(&out)?;
    if let Some(dir) = &common.out {
        write_json(dir, "graph.json", &out)?;
        let path = dir.join("edges.txt");
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = BufWriter::new(file);
        graph
            .write_edge_list(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

fn simulate_branching(
    common: &Common,
    samples: usize,
    cap: u64,
    root: Option<u32>,
) -> Result<(), Error> {
    let config = load_config(&common.config)?;
    let kernel = load_kernel(&config)?;
    if samples == 0 || cap == 0 {
        return Err(Error::Config("samples and cap must be ≥ 1".into()));
    }
    let root = root.unwrap_or(kernel.space().labels()[0]);
    let root_idx = kernel
        .space()
        .index_of(root)
        .ok_or_else(|| Error::Config(format!("root label {root} is not in the type space")))?;
    let seed = common.seed.unwrap_or(0);
    let batch = sample_batch(&kernel, root, samples, cap, seed)?;
    let (mean, stderr) = batch.size_mean();
    let tail = match tail_fit(&batch, None) {
        Ok(fit) => json!(fit),
        Err(e) => json!({ "refused": e.to_string() }),
    };
    let out = json!({
        "root": root,
        "samples": batch.len(),
        "cap": cap,
        "seed": seed,
        "censored_fraction": batch.censored_fraction(),
        "mean_size": mean,
        "mean_size_stderr": stderr,
        "mean_progeny": mean_progeny(&kernel).ok().map(|m| m[root_idx]),
        "tail_fit": tail,
    });
    print_json(&out)?;
    if let Some(dir) = &common.out {
        write_json(dir, "branching.json", &out)?;
        let path = dir.join("batch.csv");
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        batch.write_csv(BufWriter::new(file))?;
    }
    Ok(())
}

fn experiment(common: &Common) -> Result<(), Error> {
    let ConfigFile::Experiment(mut cfg) = load_config(&common.config)? else {
        return Err(Error::Config(
            "experiment needs an experiment config (with a `mode` field)".into(),
        ));
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    let report = run_experiment(&cfg)?;
    emit_report(&report, &dir)?;
    let out = json!({
        "experiment_id": cfg.experiment_id,
        "output_dir": dir,
        "prediction": report.prediction,
        "warnings": report.warnings,
        "per_n": report.per_n,
        "scaling_fit": report.scaling_fit,
        "fraction": report.fraction,
        "branching_all_passed": report.branching.as_ref().map(|b| b.all_passed),
    });
    print_json(&out)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Refused(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(k) = cli.threads {
        if k == 0 {
            eprintln!("error: --threads must be ≥ 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Analyze { common, bis_tol } => analyze(common, *bis_tol),
        Command::Check { common } => check(common),
        Command::SimulateGraph { common, n, iid } => simulate_graph(common, *n, *iid),
        Command::SimulateBranching {
            common,
            samples,
            cap,
            root,
        } => simulate_branching(common, *samples, *cap, *root),
        Command::Experiment { common } => experiment(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
