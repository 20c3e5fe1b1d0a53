//! The five message-scheduling strategies and the run loop.
//!
//! All schedulers share one update primitive (damped single-message install)
//! and one convergence criterion: max damped residual over all edges at or
//! below `tol`. A run is single-threaded and fully deterministic given
//! (graph, initial state, config).

use std::collections::VecDeque;
use std::time::Instant;

use thiserror::Error;

use crate::heap::ResidualQueue;
use crate::model::{ClusterGraph, EdgeId};
use crate::propagation::{
    compute_message, damp, max_residual, message_distance, residual, MessageState, PropError,
    Variant,
};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum SchedError {
    #[error(transparent)]
    Prop(#[from] PropError),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("round-robin order is not a permutation of the directed edges")]
    OrderNotPermutation,
    #[error("tree schedule list is empty")]
    NoTrees,
    #[error("model is not an {0}x{0} grid built by the benchmark generator")]
    NotAGrid(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheduler {
    Synchronous,
    RoundRobin,
    NaiveAsync,
    Trp,
    Residual,
}

impl Scheduler {
    pub const ALL: [Scheduler; 5] = [
        Scheduler::Synchronous,
        Scheduler::RoundRobin,
        Scheduler::NaiveAsync,
        Scheduler::Trp,
        Scheduler::Residual,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scheduler::Synchronous => "sbp",
            Scheduler::RoundRobin => "rr",
            Scheduler::NaiveAsync => "abp",
            Scheduler::Trp => "trp",
            Scheduler::Residual => "rbp",
        }
    }

    pub fn parse(s: &str) -> Option<Scheduler> {
        match s {
            "sbp" => Some(Scheduler::Synchronous),
            "rr" => Some(Scheduler::RoundRobin),
            "abp" => Some(Scheduler::NaiveAsync),
            "trp" => Some(Scheduler::Trp),
            "rbp" => Some(Scheduler::Residual),
            _ => None,
        }
    }
}

/// Forward pass over a spanning tree: directed edges ordered leaf-to-root.
/// The backward pass is the reverse list with every edge flipped.
#[derive(Debug, Clone)]
pub struct TreeSchedule {
    pub forward: Vec<EdgeId>,
}

impl TreeSchedule {
    /// Checks the tree invariants: acyclic undirected support spanning one
    /// connected component, and leaf-to-root consistent forward order.
    pub fn validate(&self, graph: &ClusterGraph) -> Result<(), SchedError> {
        let mut clusters: Vec<usize> = Vec::new();
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for &e in &self.forward {
            let edge = &graph.edges[e];
            let (a, b) = (edge.source.min(edge.target), edge.source.max(edge.target));
            if pairs.contains(&(a, b)) {
                return Err(SchedError::BadConfig(format!(
                    "tree edge between clusters {a} and {b} listed twice"
                )));
            }
            pairs.push((a, b));
            for c in [a, b] {
                if !clusters.contains(&c) {
                    clusters.push(c);
                }
            }
        }
        if pairs.len() + 1 != clusters.len() {
            return Err(SchedError::BadConfig(
                "tree support is cyclic or disconnected".into(),
            ));
        }
        // leaf-to-root order: each edge appears after every tree edge feeding
        // its source, except the flip of itself
        for (i, &e) in self.forward.iter().enumerate() {
            let source = graph.edges[e].source;
            let target = graph.edges[e].target;
            for &other in &self.forward[i..] {
                let oe = &graph.edges[other];
                if oe.target == source && oe.source != target {
                    return Err(SchedError::BadConfig(format!(
                        "forward order not leaf-to-root: edge {other} feeds edge {e} but comes later"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Builds the horizontal and vertical boustrophedon spanning paths of an
/// `n` x `n` grid expressed over the Bethe graph produced by the benchmark
/// generator (variable clusters 0..n*n row-major, edge-factor clusters
/// following in right-then-down row-major order).
pub fn make_snake_trees(graph: &ClusterGraph, n: usize) -> Result<Vec<TreeSchedule>, SchedError> {
    let vars = n * n;
    let grid_edges = 2 * n * (n - 1);
    if graph.clusters.len() != vars + grid_edges
        || graph.cardinalities.len() != vars
        || (0..vars).any(|v| graph.clusters[v].scope != vec![v])
    {
        return Err(SchedError::NotAGrid(n));
    }
    // factor cluster holding the grid edge between two variables
    let mut edge_cluster = std::collections::HashMap::new();
    let mut k = vars;
    for r in 0..n {
        for c in 0..n {
            let v = r * n + c;
            if c + 1 < n {
                edge_cluster.insert((v, v + 1), k);
                k += 1;
            }
            if r + 1 < n {
                edge_cluster.insert((v, v + n), k);
                k += 1;
            }
        }
    }

    let snake = |path: Vec<usize>| -> Result<TreeSchedule, SchedError> {
        let mut forward = Vec::with_capacity(2 * (path.len() - 1));
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            let key = (a.min(b), a.max(b));
            let f = *edge_cluster.get(&key).ok_or(SchedError::NotAGrid(n))?;
            forward.push(graph.edge_between(a, f).ok_or(SchedError::NotAGrid(n))?);
            forward.push(graph.edge_between(f, b).ok_or(SchedError::NotAGrid(n))?);
        }
        Ok(TreeSchedule { forward })
    };

    let mut horizontal = Vec::with_capacity(vars);
    for r in 0..n {
        if r % 2 == 0 {
            horizontal.extend((0..n).map(|c| r * n + c));
        } else {
            horizontal.extend((0..n).rev().map(|c| r * n + c));
        }
    }
    let mut vertical = Vec::with_capacity(vars);
    for c in 0..n {
        if c % 2 == 0 {
            vertical.extend((0..n).map(|r| r * n + c));
        } else {
            vertical.extend((0..n).rev().map(|r| r * n + c));
        }
    }

    Ok(vec![snake(horizontal)?, snake(vertical)?])
}

/// Random spanning trees whose union covers every edge of the cluster graph.
///
/// The first pass grows one tree per connected component; further trees are
/// rooted at a still-uncovered edge (which each new tree is guaranteed to
/// cover, so the loop terminates) until no edge is left out. DFS prefers
/// uncovered edges so few extra trees are needed. Forward order is a DFS
/// post-order (children before the edge to the parent), which is leaf-to-root
/// consistent.
pub fn random_spanning_trees(graph: &ClusterGraph, seed: u64) -> Vec<TreeSchedule> {
    let mut rng = Rng::new(seed);
    let n = graph.clusters.len();
    let mut covered = vec![false; graph.num_edges()];
    let mut trees = Vec::new();

    let mut visited = vec![false; n];
    let mut roots: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut roots);
    for &root in &roots {
        if visited[root] {
            continue;
        }
        let mut forward = Vec::new();
        visit(graph, root, None, &mut visited, &mut rng, &mut forward, &mut covered);
        if !forward.is_empty() {
            trees.push(TreeSchedule { forward });
        }
    }

    while let Some(e0) = covered.iter().position(|&c| !c) {
        let mut visited = vec![false; n];
        let mut forward = Vec::new();
        let root = graph.edges[e0].target;
        visited[root] = true;
        visit(
            graph,
            graph.edges[e0].source,
            Some(e0),
            &mut visited,
            &mut rng,
            &mut forward,
            &mut covered,
        );
        let mut out = graph.out_edges[root].clone();
        rng.shuffle(&mut out);
        for e in out {
            let child = graph.edges[e].target;
            if !visited[child] {
                visit(
                    graph,
                    child,
                    Some(graph.edges[e].reverse),
                    &mut visited,
                    &mut rng,
                    &mut forward,
                    &mut covered,
                );
            }
        }
        trees.push(TreeSchedule { forward });
    }
    return trees;

    #[allow(clippy::too_many_arguments)]
    fn visit(
        graph: &ClusterGraph,
        node: usize,
        parent_edge: Option<EdgeId>,
        visited: &mut [bool],
        rng: &mut Rng,
        forward: &mut Vec<EdgeId>,
        covered: &mut [bool],
    ) {
        visited[node] = true;
        let (mut fresh, mut seen): (Vec<EdgeId>, Vec<EdgeId>) = graph.out_edges[node]
            .iter()
            .partition(|&&e| !covered[e]);
        rng.shuffle(&mut fresh);
        rng.shuffle(&mut seen);
        for e in fresh.into_iter().chain(seen) {
            let child = graph.edges[e].target;
            if !visited[child] {
                visit(
                    graph,
                    child,
                    Some(graph.edges[e].reverse),
                    visited,
                    rng,
                    forward,
                    covered,
                );
            }
        }
        if let Some(up) = parent_edge {
            covered[up] = true;
            covered[graph.edges[up].reverse] = true;
            forward.push(up);
        }
    }
}

/// Run parameters shared by all schedulers.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scheduler: Scheduler,
    pub variant: Variant,
    pub gamma: f64,
    pub tol: f64,
    pub max_updates: u64,
    pub max_seconds: f64,
    pub seed: u64,
    /// Explicit round-robin order; defaults to lexicographic edge order.
    pub order: Option<Vec<EdgeId>>,
    /// Tree schedules for TRP; callers fill this (snakes for grids, random
    /// spanning trees otherwise).
    pub trees: Option<Vec<TreeSchedule>>,
}

impl RunConfig {
    pub fn new(scheduler: Scheduler, variant: Variant) -> Self {
        RunConfig {
            scheduler,
            variant,
            gamma: 0.2,
            tol: 1e-5,
            max_updates: 10_000_000,
            max_seconds: f64::INFINITY,
            seed: 0,
            order: None,
            trees: None,
        }
    }

    fn validate(&self) -> Result<(), SchedError> {
        if !(self.tol > 0.0) {
            return Err(SchedError::BadConfig(format!("tol {} must be > 0", self.tol)));
        }
        if self.max_updates < 1 {
            return Err(SchedError::BadConfig("max_updates must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(SchedError::BadConfig(format!(
                "gamma {} outside [0, 1)",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Outcome summary of a run; `wall_ms` is the only nondeterministic field.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub model_id: String,
    pub scheduler: Scheduler,
    pub variant: Variant,
    pub gamma: f64,
    pub tol: f64,
    pub seed: u64,
    pub converged: bool,
    pub updates: u64,
    pub sweeps: u64,
    pub wall_ms: f64,
    pub final_max_residual: f64,
    pub floored_entries: u64,
}

/// Run result: record, final state, and per-edge installed-update counts
/// (for fairness and starvation inspection).
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub state: MessageState,
    pub per_edge_updates: Vec<u64>,
}

struct Runner<'a> {
    graph: &'a ClusterGraph,
    cfg: &'a RunConfig,
    state: MessageState,
    updates: u64,
    per_edge_updates: Vec<u64>,
    floored: u64,
    start: Instant,
    clock_check: u32,
    out_of_time: bool,
}

impl<'a> Runner<'a> {
    fn new(graph: &'a ClusterGraph, cfg: &'a RunConfig, state0: MessageState) -> Self {
        Runner {
            graph,
            cfg,
            state: state0,
            updates: 0,
            per_edge_updates: vec![0; graph.num_edges()],
            floored: 0,
            start: Instant::now(),
            clock_check: 0,
            out_of_time: false,
        }
    }

    /// True when no further update may be installed.
    fn exhausted(&mut self) -> bool {
        if self.updates >= self.cfg.max_updates {
            return true;
        }
        self.clock_check += 1;
        if self.out_of_time || (self.clock_check % 1024 == 0 && self.cfg.max_seconds.is_finite()) {
            self.out_of_time = self.start.elapsed().as_secs_f64() >= self.cfg.max_seconds;
        }
        self.out_of_time
    }

    /// Computes, damps, and installs the update for edge `m`.
    /// Returns the applied change (the damped residual at the pre-state).
    fn install(&mut self, m: EdgeId) -> Result<f64, SchedError> {
        let (raw, fl) = compute_message(self.graph, &self.state, m, self.cfg.variant)?;
        let new = damp(&self.state.tables[m], &raw, self.cfg.gamma)?;
        let change = message_distance(&new, &self.state.tables[m]);
        self.state.tables[m] = new;
        self.updates += 1;
        self.per_edge_updates[m] += 1;
        self.floored += fl;
        Ok(change)
    }

    fn fresh_max_residual(&self) -> Result<f64, SchedError> {
        Ok(max_residual(self.graph, &self.state, self.cfg.variant, self.cfg.gamma)?)
    }

    fn finish(self, model_id: &str, converged: bool, sweeps: u64, final_max_residual: f64) -> RunOutcome {
        RunOutcome {
            record: RunRecord {
                model_id: model_id.to_string(),
                scheduler: self.cfg.scheduler,
                variant: self.cfg.variant,
                gamma: self.cfg.gamma,
                tol: self.cfg.tol,
                seed: self.cfg.seed,
                converged,
                updates: self.updates,
                sweeps,
                wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
                final_max_residual,
                floored_entries: self.floored,
            },
            state: self.state,
            per_edge_updates: self.per_edge_updates,
        }
    }
}

/// Runs the configured scheduler from `state0`.
pub fn run(
    graph: &ClusterGraph,
    model_id: &str,
    state0: MessageState,
    cfg: &RunConfig,
) -> Result<RunOutcome, SchedError> {
    cfg.validate()?;
    if graph.num_edges() == 0 {
        let runner = Runner::new(graph, cfg, state0);
        return Ok(runner.finish(model_id, true, 0, 0.0));
    }
    match cfg.scheduler {
        Scheduler::Synchronous => run_synchronous(graph, model_id, state0, cfg),
        Scheduler::RoundRobin => run_round_robin(graph, model_id, state0, cfg),
        Scheduler::NaiveAsync => run_naive_async(graph, model_id, state0, cfg),
        Scheduler::Trp => run_trp(graph, model_id, state0, cfg),
        Scheduler::Residual => run_residual(graph, model_id, state0, cfg),
    }
}

/// Jacobi-style sweeps: all messages recomputed from the previous state and
/// installed at once.
fn run_synchronous(
    graph: &ClusterGraph,
    model_id: &str,
    state0: MessageState,
    cfg: &RunConfig,
) -> Result<RunOutcome, SchedError> {
    let m_count = graph.num_edges() as u64;
    let mut runner = Runner::new(graph, cfg, state0);
    let mut sweeps = 0u64;
    let mut converged = false;
    let mut final_res = None;
    loop {
        if runner.updates + m_count > cfg.max_updates || runner.exhausted() {
            break;
        }
        let mut new_tables = Vec::with_capacity(graph.num_edges());
        let mut worst = 0.0f64;
        for m in 0..graph.num_edges() {
            let (raw, fl) = compute_message(graph, &runner.state, m, cfg.variant)?;
            let new = damp(&runner.state.tables[m], &raw, cfg.gamma)?;
            worst = worst.max(message_distance(&new, &runner.state.tables[m]));
            runner.floored += fl;
            new_tables.push(new);
        }
        runner.state = MessageState { tables: new_tables };
        runner.updates += m_count;
        for c in runner.per_edge_updates.iter_mut() {
            *c += 1;
        }
        sweeps += 1;
        if worst <= cfg.tol {
            let fresh = runner.fresh_max_residual()?;
            if fresh <= cfg.tol {
                converged = true;
                final_res = Some(fresh);
                break;
            }
        }
    }
    let final_res = match final_res {
        Some(r) => r,
        None => runner.fresh_max_residual()?,
    };
    Ok(runner.finish(model_id, converged, sweeps, final_res))
}

/// Gauss-Seidel-style sweeps in a fixed order; each installed update is
/// immediately visible to the rest of the sweep.
fn run_round_robin(
    graph: &ClusterGraph,
    model_id: &str,
    state0: MessageState,
    cfg: &RunConfig,
) -> Result<RunOutcome, SchedError> {
    let order: Vec<EdgeId> = match &cfg.order {
        Some(o) => {
            let mut seen = vec![false; graph.num_edges()];
            if o.len() != graph.num_edges() {
                return Err(SchedError::OrderNotPermutation);
            }
            for &e in o {
                if e >= graph.num_edges() || seen[e] {
                    return Err(SchedError::OrderNotPermutation);
                }
                seen[e] = true;
            }
            o.clone()
        }
        None => (0..graph.num_edges()).collect(),
    };

    let mut runner = Runner::new(graph, cfg, state0);
    let mut sweeps = 0u64;
    let mut converged = false;
    let mut final_res = None;
    'outer: loop {
        let mut worst = 0.0f64;
        for &m in &order {
            if runner.exhausted() {
                break 'outer;
            }
            worst = worst.max(runner.install(m)?);
        }
        sweeps += 1;
        if worst <= cfg.tol {
            let fresh = runner.fresh_max_residual()?;
            if fresh <= cfg.tol {
                converged = true;
                final_res = Some(fresh);
                break;
            }
        }
    }
    let final_res = match final_res {
        Some(r) => r,
        None => runner.fresh_max_residual()?,
    };
    Ok(runner.finish(model_id, converged, sweeps, final_res))
}

/// FIFO discipline: pop, update, and re-enqueue dependents whose input
/// changed by more than `tol`. A membership bitmap prevents duplicates.
fn run_naive_async(
    graph: &ClusterGraph,
    model_id: &str,
    state0: MessageState,
    cfg: &RunConfig,
) -> Result<RunOutcome, SchedError> {
    let mut runner = Runner::new(graph, cfg, state0);
    let mut queue: VecDeque<EdgeId> = (0..graph.num_edges()).collect();
    let mut in_queue = vec![true; graph.num_edges()];
    let mut converged = false;
    let mut final_res = None;
    loop {
        match queue.pop_front() {
            Some(m) => {
                in_queue[m] = false;
                if runner.exhausted() {
                    break;
                }
                let change = runner.install(m)?;
                if change > cfg.tol {
                    for &d in &graph.dependents[m] {
                        if !in_queue[d] {
                            in_queue[d] = true;
                            queue.push_back(d);
                        }
                    }
                }
            }
            None => {
                // drained: verify, and re-seed if stale inputs left residuals
                // above tol
                let mut worst = 0.0f64;
                let mut stale = Vec::new();
                for m in 0..graph.num_edges() {
                    let r = residual(graph, &runner.state, m, cfg.variant, cfg.gamma)?;
                    worst = worst.max(r);
                    if r > cfg.tol {
                        stale.push(m);
                    }
                }
                if stale.is_empty() {
                    converged = true;
                    final_res = Some(worst);
                    break;
                }
                for m in stale {
                    in_queue[m] = true;
                    queue.push_back(m);
                }
            }
        }
    }
    let final_res = match final_res {
        Some(r) => r,
        None => runner.fresh_max_residual()?,
    };
    Ok(runner.finish(model_id, converged, 0, final_res))
}

/// Greedy residual scheduling over an indexed max-heap: always update the
/// edge with the largest residual, then re-key only its dependents.
fn run_residual(
    graph: &ClusterGraph,
    model_id: &str,
    state0: MessageState,
    cfg: &RunConfig,
) -> Result<RunOutcome, SchedError> {
    let mut runner = Runner::new(graph, cfg, state0);
    let mut keys = Vec::with_capacity(graph.num_edges());
    for m in 0..graph.num_edges() {
        keys.push(residual(graph, &runner.state, m, cfg.variant, cfg.gamma)?);
    }
    let mut queue = ResidualQueue::new(keys);
    let mut converged = false;
    let final_res = loop {
        let (m, r) = queue.peek().expect("nonempty edge set");
        if r <= cfg.tol {
            let fresh = runner.fresh_max_residual()?;
            if fresh <= cfg.tol {
                converged = true;
                break fresh;
            }
            for e in 0..graph.num_edges() {
                queue.update(e, residual(graph, &runner.state, e, cfg.variant, cfg.gamma)?);
            }
            continue;
        }
        if runner.exhausted() {
            break r;
        }
        runner.install(m)?;
        queue.update(m, residual(graph, &runner.state, m, cfg.variant, cfg.gamma)?);
        for &d in &graph.dependents[m] {
            queue.update(d, residual(graph, &runner.state, d, cfg.variant, cfg.gamma)?);
        }
    };
    Ok(runner.finish(model_id, converged, 0, final_res))
}

/// Tree passes: each cycle runs every tree's forward pass then its backward
/// pass as damped single-message updates; non-tree messages are held fixed.
fn run_trp(
    graph: &ClusterGraph,
    model_id: &str,
    state0: MessageState,
    cfg: &RunConfig,
) -> Result<RunOutcome, SchedError> {
    let trees = match &cfg.trees {
        Some(t) if !t.is_empty() => t,
        _ => return Err(SchedError::NoTrees),
    };
    let mut runner = Runner::new(graph, cfg, state0);
    let mut cycles = 0u64;
    let mut converged = false;
    let mut final_res = None;
    'outer: loop {
        for tree in trees {
            for &e in &tree.forward {
                if runner.exhausted() {
                    break 'outer;
                }
                runner.install(e)?;
            }
            for &e in tree.forward.iter().rev() {
                if runner.exhausted() {
                    break 'outer;
                }
                runner.install(graph.edges[e].reverse)?;
            }
        }
        cycles += 1;
        let fresh = runner.fresh_max_residual()?;
        if fresh <= cfg.tol {
            converged = true;
            final_res = Some(fresh);
            break;
        }
    }
    let final_res = match final_res {
        Some(r) => r,
        None => runner.fresh_max_residual()?,
    };
    Ok(runner.finish(model_id, converged, cycles, final_res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{gen_ising_grid, GridSpec};
    use crate::model::{build_bethe_graph, build_pairwise_loop_graph, four_cycle_model, Factor, Model};
    use crate::propagation::global_distance;

    fn chain3() -> Model {
        Model::new(
            vec![2, 2, 2],
            vec![
                Factor::new(vec![0], vec![0.3, 0.7]),
                Factor::new(vec![0, 1], vec![1.0, 2.0, 3.0, 1.0]),
                Factor::new(vec![1, 2], vec![2.0, 1.0, 1.0, 4.0]),
            ],
        )
    }

    fn cfg(s: Scheduler) -> RunConfig {
        let mut c = RunConfig::new(s, Variant::SumProduct);
        c.tol = 1e-8;
        c
    }

    fn run_to_convergence(graph: &ClusterGraph, c: &RunConfig) -> RunOutcome {
        let out = run(graph, "test", MessageState::uniform(graph), c).unwrap();
        assert!(out.record.converged, "{:?} did not converge", c.scheduler);
        out
    }

    #[test]
    fn synchronous_on_converged_state_one_sweep() {
        let g = build_bethe_graph(&chain3()).unwrap();
        let c = cfg(Scheduler::Synchronous);
        let first = run_to_convergence(&g, &c);
        let again = run(&g, "test", first.state.clone(), &c).unwrap();
        assert!(again.record.converged);
        assert_eq!(again.record.sweeps, 1);
        assert_eq!(again.record.updates, g.num_edges() as u64);
    }

    #[test]
    fn round_robin_two_pass_tree_order_converges_in_two_sweeps() {
        let g = build_bethe_graph(&chain3()).unwrap();
        let trees = random_spanning_trees(&g, 1);
        assert_eq!(trees.len(), 1);
        let mut order = trees[0].forward.clone();
        order.extend(trees[0].forward.iter().rev().map(|&e| g.edges[e].reverse));
        let mut c = cfg(Scheduler::RoundRobin);
        c.gamma = 0.0;
        c.order = Some(order);
        let out = run_to_convergence(&g, &c);
        assert_eq!(out.record.sweeps, 2);
    }

    #[test]
    fn round_robin_rejects_bad_order() {
        let g = build_bethe_graph(&chain3()).unwrap();
        let mut c = cfg(Scheduler::RoundRobin);
        c.order = Some(vec![0; g.num_edges()]);
        let err = run(&g, "test", MessageState::uniform(&g), &c).unwrap_err();
        assert!(matches!(err, SchedError::OrderNotPermutation));
    }

    #[test]
    fn all_schedulers_agree_on_four_cycle() {
        let g = build_pairwise_loop_graph(&four_cycle_model()).unwrap();
        let reference = run_to_convergence(&g, &cfg(Scheduler::Residual));
        for s in [Scheduler::Synchronous, Scheduler::RoundRobin, Scheduler::NaiveAsync, Scheduler::Trp] {
            let mut c = cfg(s);
            if s == Scheduler::Trp {
                c.trees = Some(random_spanning_trees(&g, 7));
            }
            let out = run_to_convergence(&g, &c);
            assert!(
                global_distance(&out.state, &reference.state) <= 1e-6,
                "{s:?} fixed point differs"
            );
        }
    }

    #[test]
    fn hundred_random_orders_converge_on_four_cycle() {
        let g = build_pairwise_loop_graph(&four_cycle_model()).unwrap();
        let mut rng = Rng::new(2024);
        for _ in 0..100 {
            let mut order: Vec<EdgeId> = (0..g.num_edges()).collect();
            rng.shuffle(&mut order);
            let mut c = cfg(Scheduler::RoundRobin);
            c.order = Some(order);
            run_to_convergence(&g, &c);
        }
    }

    #[test]
    fn naive_async_converged_state_no_reenqueues() {
        let g = build_bethe_graph(&chain3()).unwrap();
        let fixed = run_to_convergence(&g, &cfg(Scheduler::Residual));
        let out = run(&g, "test", fixed.state, &cfg(Scheduler::NaiveAsync)).unwrap();
        assert!(out.record.converged);
        assert_eq!(out.record.updates, g.num_edges() as u64);
    }

    #[test]
    fn single_cluster_graph_converges_immediately() {
        let m = Model::new(vec![2], vec![Factor::new(vec![0], vec![0.4, 0.6])]);
        let g = build_bethe_graph(&m).unwrap();
        assert_eq!(g.num_edges(), 0);
        let out = run(&g, "test", MessageState::uniform(&g), &cfg(Scheduler::NaiveAsync)).unwrap();
        assert!(out.record.converged);
        assert_eq!(out.record.updates, 0);
    }

    #[test]
    fn trp_tree_model_single_cycle() {
        let g = build_bethe_graph(&chain3()).unwrap();
        let mut c = cfg(Scheduler::Trp);
        c.gamma = 0.0;
        c.trees = Some(random_spanning_trees(&g, 3));
        let out = run_to_convergence(&g, &c);
        assert_eq!(out.record.sweeps, 1);
    }

    #[test]
    fn trp_requires_trees() {
        let g = build_bethe_graph(&chain3()).unwrap();
        let err = run(&g, "test", MessageState::uniform(&g), &cfg(Scheduler::Trp)).unwrap_err();
        assert!(matches!(err, SchedError::NoTrees));
    }

    #[test]
    fn trp_update_accounting_per_cycle() {
        let model = gen_ising_grid(&GridSpec { n: 4, c: 1.0, seed: 5 });
        let g = build_bethe_graph(&model).unwrap();
        let trees = make_snake_trees(&g, 4).unwrap();
        let tree_edges = trees[0].forward.len() as u64;
        let mut c = cfg(Scheduler::Trp);
        c.trees = Some(trees);
        c.tol = 1e-12; // force at least a few full cycles
        c.max_updates = 2 * 2 * tree_edges * 3;
        let out = run(&g, "test", MessageState::uniform(&g), &c).unwrap();
        assert_eq!(out.record.updates % (2 * 2 * tree_edges), 0);
        assert_eq!(out.record.sweeps, out.record.updates / (2 * 2 * tree_edges));
    }

    #[test]
    fn snake_trees_structure() {
        for n in [2usize, 3] {
            let model = gen_ising_grid(&GridSpec { n, c: 7.0, seed: 1 });
            let g = build_bethe_graph(&model).unwrap();
            let trees = make_snake_trees(&g, n).unwrap();
            assert_eq!(trees.len(), 2);
            for t in &trees {
                assert_eq!(t.forward.len(), 2 * (n * n - 1));
                t.validate(&g).unwrap();
            }
        }
    }

    #[test]
    fn snake_visits_boustrophedon_order() {
        let model = gen_ising_grid(&GridSpec { n: 3, c: 7.0, seed: 1 });
        let g = build_bethe_graph(&model).unwrap();
        let trees = make_snake_trees(&g, 3).unwrap();
        // horizontal snake: variable clusters appear as the sources of the
        // even-position forward edges
        let visited: Vec<usize> = trees[0]
            .forward
            .iter()
            .step_by(2)
            .map(|&e| g.edges[e].source)
            .collect();
        assert_eq!(visited, vec![0, 1, 2, 5, 4, 3, 6, 7]);
    }

    #[test]
    fn snake_rejects_non_grid() {
        let g = build_bethe_graph(&chain3()).unwrap();
        assert!(matches!(make_snake_trees(&g, 2), Err(SchedError::NotAGrid(2))));
    }

    #[test]
    fn fairness_per_edge_counts_at_sweep_boundaries() {
        let g = build_pairwise_loop_graph(&four_cycle_model()).unwrap();
        for s in [Scheduler::Synchronous, Scheduler::RoundRobin] {
            let out = run_to_convergence(&g, &cfg(s));
            let min = out.per_edge_updates.iter().min().unwrap();
            let max = out.per_edge_updates.iter().max().unwrap();
            assert!(max - min <= 1, "{s:?}: per-edge counts {min}..{max}");
        }
    }

    #[test]
    fn residual_incremental_matches_full_recompute() {
        // from-scratch oracle over a 3x3 grid for 1000 steps
        let model = gen_ising_grid(&GridSpec { n: 3, c: 7.0, seed: 2 });
        let g = build_bethe_graph(&model).unwrap();
        let variant = Variant::SumProduct;
        let gamma = 0.0;
        let mut state = MessageState::uniform(&g);
        let mut keys = Vec::new();
        for m in 0..g.num_edges() {
            keys.push(residual(&g, &state, m, variant, gamma).unwrap());
        }
        let mut queue = ResidualQueue::new(keys);
        for _ in 0..1000 {
            let (m, top) = queue.peek().unwrap();
            // popped edge carries the maximal residual
            for e in 0..g.num_edges() {
                assert!(queue.key(e) <= top || (queue.key(e) == top && m <= e));
            }
            let (raw, _) = compute_message(&g, &state, m, variant).unwrap();
            state.tables[m] = damp(&state.tables[m], &raw, gamma).unwrap();
            queue.update(m, residual(&g, &state, m, variant, gamma).unwrap());
            assert_eq!(queue.key(m), 0.0);
            for &d in &g.dependents[m] {
                queue.update(d, residual(&g, &state, d, variant, gamma).unwrap());
            }
            for e in 0..g.num_edges() {
                let full = residual(&g, &state, e, variant, gamma).unwrap();
                assert!(
                    (queue.key(e) - full).abs() <= 1e-12,
                    "edge {e}: incremental {} vs full {}",
                    queue.key(e),
                    full
                );
            }
        }
    }

    #[test]
    fn determinism_identical_runs() {
        let model = gen_ising_grid(&GridSpec { n: 4, c: 7.0, seed: 9 });
        let g = build_bethe_graph(&model).unwrap();
        for s in Scheduler::ALL {
            let mut c = RunConfig::new(s, Variant::SumProduct);
            c.max_updates = 200_000;
            if s == Scheduler::Trp {
                c.trees = Some(make_snake_trees(&g, 4).unwrap());
            }
            let a = run(&g, "m", MessageState::uniform(&g), &c).unwrap();
            let b = run(&g, "m", MessageState::uniform(&g), &c).unwrap();
            assert_eq!(a.record.updates, b.record.updates);
            assert_eq!(a.record.converged, b.record.converged);
            assert_eq!(a.state, b.state, "{s:?} states differ");
        }
    }

    #[test]
    fn budget_exhaustion_is_not_an_error() {
        let model = gen_ising_grid(&GridSpec { n: 4, c: 13.0, seed: 1 });
        let g = build_bethe_graph(&model).unwrap();
        let mut c = RunConfig::new(Scheduler::Synchronous, Variant::SumProduct);
        c.max_updates = 3 * g.num_edges() as u64;
        c.tol = 1e-15;
        let out = run(&g, "m", MessageState::uniform(&g), &c).unwrap();
        assert!(!out.record.converged);
        assert!(out.record.updates <= c.max_updates);
    }
}
