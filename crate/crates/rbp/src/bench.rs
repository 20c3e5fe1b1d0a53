//! Seeded Ising-grid generation, experiment orchestration, and CSV emission.
//!
//! Grid generation is a pure function of its spec: the RNG recurrence and the
//! draw order (all node tables row-major, then all edge couplings right
//! before down) are normative, so the same spec yields byte-identical model
//! files everywhere.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{build_bethe_graph, build_pairwise_loop_graph, ClusterGraph, Factor, Model};
use crate::oracle::{avg_kl, variable_elimination_marginals};
use crate::propagation::{compute_beliefs, MessageState, Variant};
use crate::rng::Rng;
use crate::schedulers::{
    make_snake_trees, random_spanning_trees, run, RunConfig, RunRecord, Scheduler, TreeSchedule,
};

/// Largest grid side for which the suite fills the avg_kl column (exact
/// marginals via variable elimination stay cheap).
pub const KL_ORACLE_MAX_N: usize = 12;

/// Node potential entries are drawn from this open-at-zero range; factors
/// must stay strictly positive.
pub const NODE_POTENTIAL_MIN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("malformed CSV: {0}")]
    MalformedCsv(String),
    #[error("baseline scheduler {0:?} not found in CSV")]
    BaselineNotFound(String),
    #[error("unknown scheduler name {0:?}")]
    UnknownScheduler(String),
    #[error("unknown variant name {0:?} (expected sum or max)")]
    UnknownVariant(String),
    #[error("unknown graph construction {0:?} (expected bethe or pairwise)")]
    UnknownGraphKind(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Sched(#[from] crate::schedulers::SchedError),
    #[error(transparent)]
    Oracle(#[from] crate::oracle::OracleError),
}

/// An N x N binary Ising grid with difficulty C and generation seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub c: f64,
    pub seed: u64,
}

impl GridSpec {
    pub fn model_id(&self) -> String {
        format!("grid-{}-{}-{}", self.n, self.c, self.seed)
    }
}

/// Generates the grid model: per-variable univariate potentials uniform in
/// (1e-6, 1), per-edge Ising tables (e^{lC}, e^{-lC}, e^{-lC}, e^{lC}) with
/// l ~ uniform[-0.5, 0.5]. Edges run right-then-down in row-major order.
pub fn gen_ising_grid(spec: &GridSpec) -> Model {
    let n = spec.n;
    let vars = n * n;
    let mut rng = Rng::new(spec.seed);
    let mut factors = Vec::with_capacity(vars + 2 * n * (n - 1));
    for v in 0..vars {
        let draw = |rng: &mut Rng| NODE_POTENTIAL_MIN + rng.next_f64() * (1.0 - NODE_POTENTIAL_MIN);
        let e0 = draw(&mut rng);
        let e1 = draw(&mut rng);
        factors.push(Factor::new(vec![v], vec![e0, e1]));
    }
    for r in 0..n {
        for c in 0..n {
            let v = r * n + c;
            let mut edge = |other: usize, rng: &mut Rng| {
                let lambda = rng.next_f64() - 0.5;
                let agree = (lambda * spec.c).exp();
                let disagree = (-lambda * spec.c).exp();
                factors.push(Factor::new(vec![v, other], vec![agree, disagree, disagree, agree]));
            };
            if c + 1 < n {
                edge(v + 1, &mut rng);
            }
            if r + 1 < n {
                edge(v + n, &mut rng);
            }
        }
    }
    Model::new(vec![2; vars], factors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Bethe,
    Pairwise,
}

impl GraphKind {
    pub fn parse(s: &str) -> Result<Self, BenchError> {
        match s {
            "bethe" => Ok(GraphKind::Bethe),
            "pairwise" => Ok(GraphKind::Pairwise),
            other => Err(BenchError::UnknownGraphKind(other.to_string())),
        }
    }

    pub fn build(&self, model: &Model) -> Result<ClusterGraph, BenchError> {
        Ok(match self {
            GraphKind::Bethe => build_bethe_graph(model)?,
            GraphKind::Pairwise => build_pairwise_loop_graph(model)?,
        })
    }
}

/// One scheduler configuration of a suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSpec {
    pub scheduler: String,
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_updates")]
    pub max_updates: u64,
    #[serde(default)]
    pub max_seconds: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_variant() -> String {
    "sum".into()
}
fn default_damping() -> f64 {
    0.2
}
fn default_tol() -> f64 {
    1e-5
}
fn default_max_updates() -> u64 {
    10_000_000
}

pub fn parse_variant(s: &str) -> Result<Variant, BenchError> {
    match s {
        "sum" => Ok(Variant::SumProduct),
        "max" => Ok(Variant::MaxProduct),
        other => Err(BenchError::UnknownVariant(other.to_string())),
    }
}

impl RunSpec {
    pub fn to_config(&self) -> Result<RunConfig, BenchError> {
        let scheduler = Scheduler::parse(&self.scheduler)
            .ok_or_else(|| BenchError::UnknownScheduler(self.scheduler.clone()))?;
        let mut cfg = RunConfig::new(scheduler, parse_variant(&self.variant)?);
        cfg.gamma = self.damping;
        cfg.tol = self.tol;
        cfg.max_updates = self.max_updates;
        cfg.max_seconds = self.max_seconds.unwrap_or(f64::INFINITY);
        cfg.seed = self.seed;
        Ok(cfg)
    }
}

/// A benchmark suite: grids crossed with scheduler configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub grids: Vec<GridSpec>,
    pub runs: Vec<RunSpec>,
    #[serde(default = "default_graph_kind")]
    pub graph: GraphKind,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_graph_kind() -> GraphKind {
    GraphKind::Bethe
}
fn default_jobs() -> usize {
    1
}

/// Fills TRP trees for a config: snake trees when the graph is a generator
/// grid, random spanning trees otherwise.
pub fn default_trees(graph: &ClusterGraph, seed: u64) -> Vec<TreeSchedule> {
    let vars = graph.cardinalities.len();
    let n = (vars as f64).sqrt().round() as usize;
    if n >= 2 && n * n == vars {
        if let Ok(trees) = make_snake_trees(graph, n) {
            return trees;
        }
    }
    random_spanning_trees(graph, seed)
}

pub const CSV_HEADER: &str = "model_id,scheduler,variant,damping,tol,seed,converged,updates,sweeps,wall_ms,final_max_residual,floored_entries,avg_kl";

pub fn format_row(record: &RunRecord, kl: Option<f64>) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{:.3},{:e},{},{}",
        record.model_id,
        record.scheduler.name(),
        record.variant.name(),
        record.gamma,
        record.tol,
        record.seed,
        record.converged,
        record.updates,
        record.sweeps,
        record.wall_ms,
        record.final_max_residual,
        record.floored_entries,
        kl.map_or(String::new(), |k| format!("{k:e}")),
    )
}

/// Runs one (graph, config) pair from the uniform initialization and fills
/// the avg_kl column when an exact oracle is supplied.
pub fn run_one(
    graph: &ClusterGraph,
    model_id: &str,
    cfg: &RunConfig,
    exact: Option<&crate::oracle::ExactMarginals>,
) -> Result<(RunRecord, MessageState, Option<f64>), BenchError> {
    let mut cfg = cfg.clone();
    if cfg.scheduler == Scheduler::Trp && cfg.trees.is_none() {
        cfg.trees = Some(default_trees(graph, cfg.seed));
    }
    let out = run(graph, model_id, MessageState::uniform(graph), &cfg)?;
    let kl = match exact {
        Some(exact) => {
            let beliefs = compute_beliefs(graph, &out.state, cfg.variant);
            Some(avg_kl(&beliefs.var_marginals, exact)?)
        }
        None => None,
    };
    Ok((out.record, out.state, kl))
}

/// Executes every (grid, run) pair and returns the CSV text, rows sorted by
/// (model_id, scheduler, variant) so output is deterministic regardless of
/// the worker pool.
pub fn run_suite(suite: &SuiteConfig) -> Result<String, BenchError> {
    let work: Vec<(usize, usize)> = (0..suite.grids.len())
        .flat_map(|g| (0..suite.runs.len()).map(move |r| (g, r)))
        .collect();

    let execute = |&(gi, ri): &(usize, usize)| -> Result<String, BenchError> {
        let spec = &suite.grids[gi];
        let model = gen_ising_grid(spec);
        let graph = suite.graph.build(&model)?;
        let exact = if spec.n <= KL_ORACLE_MAX_N {
            Some(variable_elimination_marginals(&model, None)?)
        } else {
            None
        };
        let cfg = suite.runs[ri].to_config()?;
        let (record, _, kl) = run_one(&graph, &spec.model_id(), &cfg, exact.as_ref())?;
        Ok(format_row(&record, kl))
    };

    let mut rows: Vec<String> = if suite.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(suite.jobs)
            .build()
            .expect("worker pool");
        pool.install(|| work.par_iter().map(execute).collect::<Result<_, _>>())?
    } else {
        work.iter().map(execute).collect::<Result<_, _>>()?
    };

    rows.sort_by(|a, b| {
        let key = |row: &str| {
            let mut it = row.split(',');
            (
                it.next().unwrap_or("").to_string(),
                it.next().unwrap_or("").to_string(),
                it.next().unwrap_or("").to_string(),
            )
        };
        key(a).cmp(&key(b))
    });

    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    Ok(out)
}

/// One parsed CSV data row.
#[derive(Debug, Clone)]
pub struct CsvRow {
    pub model_id: String,
    pub scheduler: String,
    pub variant: String,
    pub converged: bool,
    pub updates: u64,
    pub avg_kl: Option<f64>,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, BenchError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| BenchError::MalformedCsv("empty input".into()))?;
    if header != CSV_HEADER {
        return Err(BenchError::MalformedCsv(format!("bad header: {header}")));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(BenchError::MalformedCsv(format!(
                "line {}: expected 13 fields, got {}",
                ln + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| BenchError::MalformedCsv(format!("line {}: bad {what}", ln + 2));
        rows.push(CsvRow {
            model_id: fields[0].to_string(),
            scheduler: fields[1].to_string(),
            variant: fields[2].to_string(),
            converged: fields[6].parse().map_err(|_| bad("converged"))?,
            updates: fields[7].parse().map_err(|_| bad("updates"))?,
            avg_kl: if fields[12].is_empty() {
                None
            } else {
                Some(fields[12].parse().map_err(|_| bad("avg_kl"))?)
            },
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct SchedulerSummary {
    pub scheduler: String,
    pub runs: usize,
    pub converged: usize,
    pub convergence_pct: f64,
    /// Median updates over instances where every scheduler converged.
    pub median_updates: Option<f64>,
    /// Median of per-instance updates ratio against the baseline, over
    /// instances where both converged.
    pub ratio_vs_baseline: Option<f64>,
    pub mean_avg_kl: Option<f64>,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = xs.len() / 2;
    Some(if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2.0
    })
}

/// Per-scheduler convergence and cost summary of a suite CSV.
pub fn summarize(csv: &str, baseline: &str) -> Result<Vec<SchedulerSummary>, BenchError> {
    let rows = parse_csv(csv)?;
    let mut schedulers: Vec<String> = Vec::new();
    for r in &rows {
        if !schedulers.contains(&r.scheduler) {
            schedulers.push(r.scheduler.clone());
        }
    }
    if !schedulers.iter().any(|s| s == baseline) {
        return Err(BenchError::BaselineNotFound(baseline.to_string()));
    }

    let lookup = |model: &str, sched: &str| -> Option<&CsvRow> {
        rows.iter()
            .find(|r| r.model_id == model && r.scheduler == sched)
    };
    let mut models: Vec<String> = Vec::new();
    for r in &rows {
        if !models.contains(&r.model_id) {
            models.push(r.model_id.clone());
        }
    }
    let mutually_convergent: Vec<&String> = models
        .iter()
        .filter(|m| {
            schedulers
                .iter()
                .all(|s| lookup(m, s).is_some_and(|r| r.converged))
        })
        .collect();

    let mut out = Vec::new();
    for sched in &schedulers {
        let mine: Vec<&CsvRow> = rows.iter().filter(|r| &r.scheduler == sched).collect();
        let converged = mine.iter().filter(|r| r.converged).count();
        let median_updates = median(
            mutually_convergent
                .iter()
                .filter_map(|m| lookup(m, sched))
                .map(|r| r.updates as f64)
                .collect(),
        );
        let ratios: Vec<f64> = models
            .iter()
            .filter_map(|m| {
                let a = lookup(m, sched)?;
                let b = lookup(m, baseline)?;
                (a.converged && b.converged && b.updates > 0)
                    .then(|| a.updates as f64 / b.updates as f64)
            })
            .collect();
        let kls: Vec<f64> = mine
            .iter()
            .filter(|r| r.converged)
            .filter_map(|r| r.avg_kl)
            .collect();
        out.push(SchedulerSummary {
            scheduler: sched.clone(),
            runs: mine.len(),
            converged,
            convergence_pct: 100.0 * converged as f64 / mine.len().max(1) as f64,
            median_updates,
            ratio_vs_baseline: median(ratios),
            mean_avg_kl: if kls.is_empty() {
                None
            } else {
                Some(kls.iter().sum::<f64>() / kls.len() as f64)
            },
        });
    }
    Ok(out)
}

pub fn render_summary(summary: &[SchedulerSummary], baseline: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:>5} {:>9} {:>8} {:>14} {:>12} {:>12}",
        "sched", "runs", "converged", "conv%", "median_updates", "ratio", "mean_kl"
    );
    for s in summary {
        let fmt_opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{:<6} {:>5} {:>9} {:>8.1} {:>14} {:>12} {:>12}",
            s.scheduler,
            s.runs,
            s.converged,
            s.convergence_pct,
            s.median_updates.map_or("-".to_string(), |v| format!("{v:.0}")),
            fmt_opt(s.ratio_vs_baseline),
            s.mean_avg_kl.map_or("-".to_string(), |v| format!("{v:.3e}")),
        );
    }
    let _ = writeln!(out, "(update-count ratios are against {baseline})");
    out
}
