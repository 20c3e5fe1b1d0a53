use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use rbp::analysis::{contraction_report, report_csv, AlphaMode};
use rbp::bench::{
    format_row, parse_variant, run_one, run_suite, GraphKind, GridSpec, SuiteConfig, CSV_HEADER,
};
use rbp::model::{load_model, save_model};
use rbp::oracle::{brute_force_marginals, variable_elimination_marginals, ExactMarginals};
use rbp::schedulers::{RunConfig, Scheduler};

#[derive(Parser)]
#[command(name = "rbp", about = "Belief propagation with pluggable message schedulers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded Ising grid and write it as a MODEL file.
    GenGrid {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        c: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one scheduler on a model and print a CSV row.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = ["sbp", "rr", "abp", "trp", "rbp"])]
        scheduler: String,
        #[arg(long, default_value = "sum", value_parser = ["sum", "max"])]
        variant: String,
        #[arg(long, default_value_t = 0.2)]
        damping: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 10_000_000)]
        max_updates: u64,
        #[arg(long)]
        max_seconds: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bethe", value_parser = ["bethe", "pairwise"])]
        graph: String,
        #[arg(long)]
        out_beliefs: Option<PathBuf>,
    },
    /// Run a suite file and write the combined CSV.
    Bench {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print exact per-variable marginals.
    Exact {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "ve", value_parser = ["brute", "ve"])]
        method: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contraction-rate pipeline: fixed point, local factors, rate report.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        orders: usize,
        #[arg(long, default_value = "pairwise", value_parser = ["bethe", "pairwise"])]
        graph: String,
        #[arg(long, default_value = "single", value_parser = ["single", "joint"])]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn model_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string())
}

fn write_marginals(exact: &ExactMarginals) -> String {
    let mut out = String::new();
    for (v, marg) in exact.marginals.iter().enumerate() {
        out.push_str(&format!("{v} {}", marg.len()));
        for x in marg {
            out.push_str(&format!(" {x:.16e}"));
        }
        out.push('\n');
    }
    out.push_str(&format!("log_z {:.16e}\n", exact.log_z));
    out
}

fn emit(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenGrid { n, c, seed, out } => {
            let model = rbp::bench::gen_ising_grid(&GridSpec { n, c, seed });
            std::fs::write(&out, save_model(&model))
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Run {
            model,
            scheduler,
            variant,
            damping,
            tol,
            max_updates,
            max_seconds,
            seed,
            graph,
            out_beliefs,
        } => {
            let text = std::fs::read_to_string(&model)
                .with_context(|| format!("reading {}", model.display()))?;
            let parsed = load_model(&text)?;
            let graph = GraphKind::parse(&graph)?.build(&parsed)?;
            let mut cfg = RunConfig::new(
                Scheduler::parse(&scheduler).expect("validated by clap"),
                parse_variant(&variant)?,
            );
            cfg.gamma = damping;
            cfg.tol = tol;
            cfg.max_updates = max_updates;
            cfg.max_seconds = max_seconds.unwrap_or(f64::INFINITY);
            cfg.seed = seed;
            let (record, state, _) = run_one(&graph, &model_id_from_path(&model), &cfg, None)?;
            println!("{CSV_HEADER}");
            println!("{}", format_row(&record, None));
            if let Some(path) = out_beliefs {
                let beliefs = rbp::propagation::compute_beliefs(&graph, &state, cfg.variant);
                let mut out = String::new();
                for (v, marg) in beliefs.var_marginals.iter().enumerate() {
                    out.push_str(&format!("{v} {}", marg.len()));
                    for x in marg {
                        out.push_str(&format!(" {x:.16e}"));
                    }
                    out.push('\n');
                }
                std::fs::write(&path, out)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Bench { suite, out, jobs } => {
            let text = std::fs::read_to_string(&suite)
                .with_context(|| format!("reading {}", suite.display()))?;
            let mut config: SuiteConfig =
                serde_json::from_str(&text).context("parsing suite file")?;
            if let Some(jobs) = jobs {
                config.jobs = jobs;
            }
            let csv = run_suite(&config)?;
            std::fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Exact { model, method, out } => {
            let text = std::fs::read_to_string(&model)
                .with_context(|| format!("reading {}", model.display()))?;
            let parsed = load_model(&text)?;
            let exact = match method.as_str() {
                "brute" => brute_force_marginals(&parsed)?,
                _ => variable_elimination_marginals(&parsed, None)?,
            };
            emit(out.as_deref(), &write_marginals(&exact))?;
        }
        Command::Analyze {
            model,
            samples,
            seed,
            orders,
            graph,
            mode,
            out,
        } => {
            let text = std::fs::read_to_string(&model)
                .with_context(|| format!("reading {}", model.display()))?;
            let parsed = load_model(&text)?;
            let graph = GraphKind::parse(&graph)?.build(&parsed)?;
            let mode = match mode.as_str() {
                "joint" => AlphaMode::JointRandom,
                _ => AlphaMode::SingleCoordinate,
            };
            let (estimate, rates) = contraction_report(
                &graph,
                rbp::propagation::Variant::SumProduct,
                samples,
                seed,
                orders,
                mode,
            )?;
            let mut report = report_csv(&estimate);
            let mean = estimate.rho_a;
            let sd = if rates.len() > 1 {
                (rates.iter().map(|r| (r.rho_a - mean).powi(2)).sum::<f64>()
                    / (rates.len() - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            report.push_str(&format!("mean_rho_a,,,{mean:.16e}\n"));
            report.push_str(&format!("sd_rho_a,,,{sd:.16e}\n"));
            emit(out.as_deref(), &report)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, anything else is a usage
            // error (exit 1)
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
