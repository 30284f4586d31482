use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use prune_core::bench::{bench_network, BenchSettings};
use prune_core::config::{load_config, ExperimentConfig};
use prune_core::experiment::{compare_runs, load_datasets, read_summary, run_experiment, RunStatus};
use prune_core::gemm::set_threads;
use prune_core::groups::GroupType;
use prune_core::nn::{grad_check, init_params};
use prune_core::theorem::{standard_suite, suite_family, write_traces_csv};

#[derive(Parser)]
#[command(name = "prune", version, about = "Structured pruning with incremental group regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune, finalize and retrain one configuration.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate finished runs (directories holding summary.json).
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time dense vs. compacted GEMMs for every conv layer of a config's network.
    Bench {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
        sparsities: Vec<f64>,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        /// Row or column; defaults to the config's group type.
        #[arg(long)]
        mode: Option<GroupType>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Track loss minima under a growing L2 factor for the built-in loss families.
    Theorem {
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of backprop on a config's network in float64.
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = load_config(path).with_context(|| format!("loading {}", path.display()))?;
    if let Ok(v) = std::env::var("PRUNE_SEED_OVERRIDE") {
        cfg.seed = v.trim().parse().with_context(|| format!("PRUNE_SEED_OVERRIDE={v}"))?;
    }
    Ok(cfg)
}

fn apply_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PRUNE_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("PRUNE_THREADS={v}"))?;
        if !set_threads(n) {
            bail!("could not configure {n} GEMM threads");
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    apply_threads()?;
    match cli.command {
        Command::Run { config, out } => {
            let mut cfg = load(&config)?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            let rec = run_experiment(&cfg)?;
            let s = &rec.summary;
            match &s.status {
                RunStatus::Complete { all_reached_at } => println!("complete: all layers reached at iteration {all_reached_at}"),
                RunStatus::Incomplete { shortfall } => {
                    println!("incomplete after {} pruning iterations", s.prune_iterations_run);
                    for (layer, missing) in shortfall {
                        println!("  layer {layer}: {missing} group(s) short of target");
                    }
                }
            }
            for l in &s.layers {
                println!("  layer {}: {}/{} groups pruned (target {})", l.layer, l.pruned_count, l.groups, l.target_count);
            }
            println!(
                "accuracy ({}): {:.4} before pruning, {:.4} before retraining, {:.4} after retraining",
                s.eval_split, s.accuracy_before_prune, s.accuracy_before_retrain, s.accuracy_after_retrain
            );
            if let Some(e) = &s.compact_error {
                println!("compaction skipped: {e}");
            }
            if let Some(dir) = &cfg.output_dir {
                println!("artifacts written to {}", dir.display());
            }
        }
        Command::Compare { runs, csv } => {
            let summaries = runs
                .iter()
                .map(|d| Ok((d.display().to_string(), read_summary(d).with_context(|| format!("reading {}", d.display()))?)))
                .collect::<Result<Vec<_>>>()?;
            let table = compare_runs(&summaries)?.to_csv()?;
            match csv {
                Some(p) => fs::write(&p, table).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{table}"),
            }
        }
        Command::Bench { config, sparsities, reps, mode, out } => {
            let cfg = load(&config)?;
            let settings = BenchSettings { reps, seed: cfg.seed, ..Default::default() };
            let report = bench_network(&cfg.network, cfg.batch_size, &sparsities, mode.unwrap_or(cfg.group_type), settings)?;
            let path = out.or_else(|| cfg.output_dir.as_ref().map(|d| d.join("bench.csv")));
            match path {
                Some(p) => {
                    if let Some(parent) = p.parent() {
                        fs::create_dir_all(parent)?;
                    }
                    report.write_csv(fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?)?;
                    println!("{} rows written to {} ({})", report.rows.len(), p.display(), report.environment);
                }
                None => report.write_csv(std::io::stdout())?,
            }
        }
        Command::Theorem { family, csv } => {
            let cases = match &family {
                Some(f) => suite_family(f),
                None => standard_suite(),
            };
            if cases.is_empty() {
                bail!("no loss family matches `{}`", family.unwrap_or_default());
            }
            let mut traces = Vec::new();
            let mut failed = false;
            for c in &cases {
                let t = c.run()?;
                let bad = t.non_decreasing_steps();
                failed |= !bad.is_empty() || t.max_identity_gap() >= 1e-8;
                println!(
                    "{:<32} points {:>3}  |ω| strictly decreasing: {}  identity gap {:.1e}{}",
                    t.family,
                    t.points.len(),
                    bad.is_empty(),
                    t.max_identity_gap(),
                    t.truncated.as_ref().map(|x| format!("  truncated at λ={}: {}", x.lambda, x.reason)).unwrap_or_default()
                );
                traces.push(t);
            }
            if let Some(p) = csv {
                write_traces_csv(&traces, fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?)?;
            }
            if failed {
                bail!("a sweep violated the expected behaviour");
            }
        }
        Command::Gradcheck { config, samples, step, tol } => {
            let cfg = load(&config)?;
            let data = load_datasets(&cfg)?;
            let idx: Vec<usize> = (0..samples.min(data.train.len())).collect();
            let (x, labels) = data.train.batch::<f64>(&idx);
            let params = init_params::<f64>(&cfg.network, cfg.seed)?;
            let report = grad_check(&cfg.network, &params, &x, &labels, step, tol)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passed() {
                bail!("gradient check failed in layers {:?}", report.flagged_layers());
            }
        }
    }
    Ok(())
}
