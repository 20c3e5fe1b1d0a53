//! Message update operators, damping, norms, residuals, and belief
//! extraction.
//!
//! Messages are kept normalized (sum 1) at all times. The per-message norm is
//! L-infinity over table entries; the global norm is the max over edges of the
//! per-message norm.

use thiserror::Error;

use crate::model::{scope_strides, ClusterGraph, EdgeId, VarId};

/// Entries below this are floored after normalization and the table
/// renormalized; a counter of floored events is surfaced in run records.
pub const FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum PropError {
    #[error("degenerate message on edge {edge}: table sums to zero or non-finite")]
    DegenerateMessage { edge: EdgeId },
    #[error("damping factor {0} outside [0, 1]")]
    BadDamping(f64),
}

/// Sum-product computes marginals; max-product computes max-marginals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    SumProduct,
    MaxProduct,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::SumProduct => "sum",
            Variant::MaxProduct => "max",
        }
    }
}

/// The joint message vector: one normalized table per directed edge.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    pub tables: Vec<Vec<f64>>,
}

impl MessageState {
    /// All messages uniform.
    pub fn uniform(graph: &ClusterGraph) -> Self {
        let tables = (0..graph.num_edges())
            .map(|m| {
                let len = graph.sepset_len(m);
                vec![1.0 / len as f64; len]
            })
            .collect();
        MessageState { tables }
    }

    /// Each message drawn entrywise uniform(0,1) then normalized.
    pub fn random(graph: &ClusterGraph, rng: &mut crate::rng::Rng) -> Self {
        let tables = (0..graph.num_edges())
            .map(|m| {
                let len = graph.sepset_len(m);
                let mut t: Vec<f64> = (0..len).map(|_| rng.next_f64()).collect();
                let _ = normalize(&mut t).expect("positive random table");
                t
            })
            .collect();
        MessageState { tables }
    }
}

/// Normalizes in place; floors tiny entries and renormalizes. Returns the
/// number of floored entries, or None if the table is degenerate.
fn normalize(table: &mut [f64]) -> Option<u64> {
    let sum: f64 = table.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return None;
    }
    for x in table.iter_mut() {
        *x /= sum;
    }
    let mut floored = 0u64;
    for x in table.iter_mut() {
        if *x < FLOOR {
            *x = FLOOR;
            floored += 1;
        }
    }
    if floored > 0 {
        let sum: f64 = table.iter().sum();
        for x in table.iter_mut() {
            *x /= sum;
        }
    }
    Some(floored)
}

/// Evaluates the update for edge `m = (s -> t)`: the cluster potential of `s`
/// times all incoming messages except the one from `t`, marginalized onto the
/// sepset (sum or max) and normalized. Pure in `state`.
///
/// Returns the new table together with the floored-entry count.
pub fn compute_message(
    graph: &ClusterGraph,
    state: &MessageState,
    m: EdgeId,
    variant: Variant,
) -> Result<(Vec<f64>, u64), PropError> {
    let edge = &graph.edges[m];
    let cluster = &graph.clusters[edge.source];
    let mut acc = cluster.potential.clone();
    let strides = scope_strides(&cluster.scope, &graph.cardinalities);
    let card = |pos: usize| graph.cardinalities[cluster.scope[pos]];

    for &input in &graph.inputs[m] {
        let in_edge = &graph.edges[input];
        let msg = &state.tables[input];
        let sep_strides = scope_strides(&in_edge.sepset, &graph.cardinalities);
        for (idx, slot) in acc.iter_mut().enumerate() {
            let mut mi = 0usize;
            for (j, &pos) in in_edge.sep_pos_in_target.iter().enumerate() {
                mi += ((idx / strides[pos]) % card(pos)) * sep_strides[j];
            }
            *slot *= msg[mi];
        }
    }

    let out_len = graph.sepset_len(m);
    let mut out = vec![
        match variant {
            Variant::SumProduct => 0.0,
            Variant::MaxProduct => f64::NEG_INFINITY,
        };
        out_len
    ];
    let sep_strides = scope_strides(&edge.sepset, &graph.cardinalities);
    for (idx, &value) in acc.iter().enumerate() {
        let mut oi = 0usize;
        for (j, &pos) in edge.sep_pos_in_source.iter().enumerate() {
            oi += ((idx / strides[pos]) % card(pos)) * sep_strides[j];
        }
        match variant {
            Variant::SumProduct => out[oi] += value,
            Variant::MaxProduct => out[oi] = out[oi].max(value),
        }
    }

    let floored = normalize(&mut out).ok_or(PropError::DegenerateMessage { edge: m })?;
    Ok((out, floored))
}

/// The normalized pre-marginalization product behind message `m`: the source
/// potential times all input messages, over the full source-cluster scope.
/// This is the message representation carried over cluster scopes rather
/// than sepsets (used by the joint-random contraction estimator).
pub fn cluster_product(
    graph: &ClusterGraph,
    state: &MessageState,
    m: EdgeId,
) -> Result<Vec<f64>, PropError> {
    let edge = &graph.edges[m];
    let cluster = &graph.clusters[edge.source];
    let mut acc = cluster.potential.clone();
    let strides = scope_strides(&cluster.scope, &graph.cardinalities);
    let card = |pos: usize| graph.cardinalities[cluster.scope[pos]];

    for &input in &graph.inputs[m] {
        let in_edge = &graph.edges[input];
        let msg = &state.tables[input];
        let sep_strides = scope_strides(&in_edge.sepset, &graph.cardinalities);
        for (idx, slot) in acc.iter_mut().enumerate() {
            let mut mi = 0usize;
            for (j, &pos) in in_edge.sep_pos_in_target.iter().enumerate() {
                mi += ((idx / strides[pos]) % card(pos)) * sep_strides[j];
            }
            *slot *= msg[mi];
        }
    }
    normalize(&mut acc).ok_or(PropError::DegenerateMessage { edge: m })?;
    Ok(acc)
}

/// Marginalizes a table over `m`'s source-cluster scope onto `m`'s sepset
/// and normalizes, turning a cluster-scope message back into the engine's
/// sepset representation.
pub fn project_onto_sepset(
    graph: &ClusterGraph,
    table: &[f64],
    m: EdgeId,
    variant: Variant,
) -> Result<Vec<f64>, PropError> {
    let edge = &graph.edges[m];
    let cluster = &graph.clusters[edge.source];
    let strides = scope_strides(&cluster.scope, &graph.cardinalities);
    let card = |pos: usize| graph.cardinalities[cluster.scope[pos]];
    let mut out = vec![
        match variant {
            Variant::SumProduct => 0.0,
            Variant::MaxProduct => f64::NEG_INFINITY,
        };
        graph.sepset_len(m)
    ];
    let sep_strides = scope_strides(&edge.sepset, &graph.cardinalities);
    for (idx, &value) in table.iter().enumerate() {
        let mut oi = 0usize;
        for (j, &pos) in edge.sep_pos_in_source.iter().enumerate() {
            oi += ((idx / strides[pos]) % card(pos)) * sep_strides[j];
        }
        match variant {
            Variant::SumProduct => out[oi] += value,
            Variant::MaxProduct => out[oi] = out[oi].max(value),
        }
    }
    normalize(&mut out).ok_or(PropError::DegenerateMessage { edge: m })?;
    Ok(out)
}

/// Linear blend `(1-gamma)*raw + gamma*old`, renormalized.
pub fn damp(old: &[f64], raw: &[f64], gamma: f64) -> Result<Vec<f64>, PropError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(PropError::BadDamping(gamma));
    }
    // At the endpoints the blend is an identity; skip the renormalization so
    // it cannot perturb an already-normalized message by an ulp.
    if gamma == 0.0 {
        return Ok(raw.to_vec());
    }
    if gamma == 1.0 {
        return Ok(old.to_vec());
    }
    let mut out: Vec<f64> = old
        .iter()
        .zip(raw)
        .map(|(&o, &r)| (1.0 - gamma) * r + gamma * o)
        .collect();
    let sum: f64 = out.iter().sum();
    for x in out.iter_mut() {
        *x /= sum;
    }
    Ok(out)
}

/// Per-message norm: L-infinity over entries.
pub fn message_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Global norm: max over edges of the per-message distance.
pub fn global_distance(a: &MessageState, b: &MessageState) -> f64 {
    a.tables
        .iter()
        .zip(&b.tables)
        .map(|(x, y)| message_distance(x, y))
        .fold(0.0, f64::max)
}

/// Residual of the damped operator for edge `m`: the distance between the
/// current message and what a damped update would install. Equals (1-gamma)
/// times the undamped residual.
pub fn residual(
    graph: &ClusterGraph,
    state: &MessageState,
    m: EdgeId,
    variant: Variant,
    gamma: f64,
) -> Result<f64, PropError> {
    let (raw, _) = compute_message(graph, state, m, variant)?;
    let damped = damp(&state.tables[m], &raw, gamma)?;
    Ok(message_distance(&damped, &state.tables[m]))
}

/// Max residual over all edges.
pub fn max_residual(
    graph: &ClusterGraph,
    state: &MessageState,
    variant: Variant,
    gamma: f64,
) -> Result<f64, PropError> {
    let mut worst = 0.0f64;
    for m in 0..graph.num_edges() {
        worst = worst.max(residual(graph, state, m, variant, gamma)?);
    }
    Ok(worst)
}

/// Normalized cluster beliefs and per-variable marginals.
#[derive(Debug, Clone)]
pub struct Beliefs {
    pub cluster_beliefs: Vec<Vec<f64>>,
    pub var_marginals: Vec<Vec<f64>>,
}

/// Cluster belief = potential times all incoming messages, normalized.
/// A variable's marginal comes from the smallest-scope cluster containing it
/// (ties broken by lowest cluster index), marginalized per the variant.
pub fn compute_beliefs(
    graph: &ClusterGraph,
    state: &MessageState,
    variant: Variant,
) -> Beliefs {
    let cluster_beliefs: Vec<Vec<f64>> = graph
        .clusters
        .iter()
        .enumerate()
        .map(|(c, cluster)| {
            let mut acc = cluster.potential.clone();
            let strides = scope_strides(&cluster.scope, &graph.cardinalities);
            for &input in &graph.in_edges[c] {
                let in_edge = &graph.edges[input];
                let msg = &state.tables[input];
                let sep_strides = scope_strides(&in_edge.sepset, &graph.cardinalities);
                for (idx, slot) in acc.iter_mut().enumerate() {
                    let mut mi = 0usize;
                    for (j, &pos) in in_edge.sep_pos_in_target.iter().enumerate() {
                        let card = graph.cardinalities[cluster.scope[pos]];
                        mi += ((idx / strides[pos]) % card) * sep_strides[j];
                    }
                    *slot *= msg[mi];
                }
            }
            normalize(&mut acc).expect("positive belief table");
            acc
        })
        .collect();

    let num_vars = graph.cardinalities.len();
    let var_marginals: Vec<Vec<f64>> = (0..num_vars)
        .map(|v| {
            let host = graph
                .clusters
                .iter()
                .enumerate()
                .filter(|(_, c)| c.scope.contains(&v))
                .min_by_key(|(idx, c)| (c.scope.len(), *idx))
                .map(|(idx, _)| idx)
                .expect("every variable appears in some cluster");
            marginalize_onto(graph, &cluster_beliefs[host], host, v, variant)
        })
        .collect();

    Beliefs {
        cluster_beliefs,
        var_marginals,
    }
}

/// Marginalizes a cluster table onto a single variable (sum or max),
/// normalized.
pub fn marginalize_onto(
    graph: &ClusterGraph,
    table: &[f64],
    cluster: usize,
    var: VarId,
    variant: Variant,
) -> Vec<f64> {
    let scope = &graph.clusters[cluster].scope;
    let strides = scope_strides(scope, &graph.cardinalities);
    let pos = scope.iter().position(|&w| w == var).expect("var in scope");
    let card = graph.cardinalities[var];
    let mut out = vec![
        match variant {
            Variant::SumProduct => 0.0,
            Variant::MaxProduct => f64::NEG_INFINITY,
        };
        card
    ];
    for (idx, &value) in table.iter().enumerate() {
        let state = (idx / strides[pos]) % card;
        match variant {
            Variant::SumProduct => out[state] += value,
            Variant::MaxProduct => out[state] = out[state].max(value),
        }
    }
    normalize(&mut out).expect("positive marginal");
    out
}
