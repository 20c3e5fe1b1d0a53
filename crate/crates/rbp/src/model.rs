//! Discrete factor-graph representation, cluster-graph construction, and the
//! on-disk MODEL text format.
//!
//! Tables are stored flat in row-major order with the **last** scope variable
//! varying fastest. All factor entries are strictly positive.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

pub type VarId = usize;
pub type ClusterId = usize;
pub type EdgeId = usize;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty factor list")]
    EmptyFactorList,
    #[error("factor {factor} references unknown variable id {var}")]
    UnknownVariable { factor: usize, var: VarId },
    #[error("factor {factor} repeats variable {var} in its scope")]
    DuplicateScopeVariable { factor: usize, var: VarId },
    #[error("factor {factor}: table length mismatch (expected {expected}, got {got})")]
    TableLengthMismatch {
        factor: usize,
        expected: usize,
        got: usize,
    },
    #[error("factor {factor}: non-positive table entry {value}")]
    NonPositiveEntry { factor: usize, value: f64 },
    #[error("variable {var}: cardinality {card} below 2")]
    BadCardinality { var: VarId, card: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unexpected end of input while reading {0}")]
    UnexpectedEof(&'static str),
    #[error("invalid token {token:?} while reading {context}")]
    InvalidToken { token: String, context: &'static str },
    #[error("factor {factor} has scope size {size}, expected pairwise (or absorbable univariate)")]
    NotPairwise { factor: usize, size: usize },
    #[error("univariate factor {factor} over variable {var} has no pairwise cluster to absorb it")]
    Unabsorbable { factor: usize, var: VarId },
    #[error("clusters {a} and {b} share more than one variable")]
    SharedPairOfVariables { a: ClusterId, b: ClusterId },
}

/// A strictly positive table over an ordered scope of distinct variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub scope: Vec<VarId>,
    pub table: Vec<f64>,
}

impl Factor {
    pub fn new(scope: Vec<VarId>, table: Vec<f64>) -> Self {
        Factor { scope, table }
    }
}

/// A model: variable cardinalities plus a list of factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cardinalities: Vec<usize>,
    pub factors: Vec<Factor>,
}

impl Model {
    pub fn new(cardinalities: Vec<usize>, factors: Vec<Factor>) -> Self {
        Model {
            cardinalities,
            factors,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.cardinalities.len()
    }

    /// Validates cardinalities, scopes, table lengths and positivity.
    pub fn validate(&self) -> Result<(), ModelError> {
        for (v, &card) in self.cardinalities.iter().enumerate() {
            if card < 2 {
                return Err(ModelError::BadCardinality { var: v, card });
            }
        }
        if self.factors.is_empty() {
            return Err(ModelError::EmptyFactorList);
        }
        for (fi, f) in self.factors.iter().enumerate() {
            let mut seen = vec![false; self.num_vars()];
            for &v in &f.scope {
                if v >= self.num_vars() {
                    return Err(ModelError::UnknownVariable { factor: fi, var: v });
                }
                if seen[v] {
                    return Err(ModelError::DuplicateScopeVariable { factor: fi, var: v });
                }
                seen[v] = true;
            }
            let expected: usize = f.scope.iter().map(|&v| self.cardinalities[v]).product();
            if f.table.len() != expected {
                return Err(ModelError::TableLengthMismatch {
                    factor: fi,
                    expected,
                    got: f.table.len(),
                });
            }
            for &x in &f.table {
                if !(x > 0.0) || !x.is_finite() {
                    return Err(ModelError::NonPositiveEntry { factor: fi, value: x });
                }
            }
        }
        Ok(())
    }
}

/// Strides for a flat table over `scope`, last variable fastest.
pub fn scope_strides(scope: &[VarId], cardinalities: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; scope.len()];
    for j in (0..scope.len().saturating_sub(1)).rev() {
        strides[j] = strides[j + 1] * cardinalities[scope[j + 1]];
    }
    strides
}

pub fn table_len(scope: &[VarId], cardinalities: &[usize]) -> usize {
    scope.iter().map(|&v| cardinalities[v]).product()
}

/// A cluster: scope plus its assigned potential (product of mapped factors).
#[derive(Debug, Clone)]
pub struct Cluster {
    pub scope: Vec<VarId>,
    pub potential: Vec<f64>,
}

/// One directed message slot. The reverse edge always exists.
#[derive(Debug, Clone)]
pub struct DirectedEdge {
    pub source: ClusterId,
    pub target: ClusterId,
    pub sepset: Vec<VarId>,
    pub reverse: EdgeId,
    /// Positions of the sepset variables inside the source cluster's scope.
    pub sep_pos_in_source: Vec<usize>,
    /// Positions of the sepset variables inside the target cluster's scope.
    pub sep_pos_in_target: Vec<usize>,
}

/// Cluster graph with directed message slots and precomputed adjacency.
///
/// Edge ids are assigned in lexicographic (source, target) order, which is
/// also the default round-robin order.
#[derive(Debug, Clone)]
pub struct ClusterGraph {
    pub cardinalities: Vec<usize>,
    pub clusters: Vec<Cluster>,
    pub edges: Vec<DirectedEdge>,
    /// Per cluster: incoming edge ids.
    pub in_edges: Vec<Vec<EdgeId>>,
    /// Per cluster: outgoing edge ids.
    pub out_edges: Vec<Vec<EdgeId>>,
    /// Per edge m = (s -> t): in-edges of s excluding the reverse of m.
    /// These are exactly the messages the update of m reads.
    pub inputs: Vec<Vec<EdgeId>>,
    /// Per edge m = (s -> t): out-edges of t excluding the reverse of m.
    /// These are the messages whose update reads m.
    pub dependents: Vec<Vec<EdgeId>>,
    edge_lookup: HashMap<(ClusterId, ClusterId), EdgeId>,
}

impl ClusterGraph {
    /// Builds the graph from clusters and undirected connections
    /// (pair of cluster ids plus sepset).
    fn assemble(
        cardinalities: Vec<usize>,
        clusters: Vec<Cluster>,
        connections: Vec<(ClusterId, ClusterId, Vec<VarId>)>,
    ) -> Self {
        let mut directed: Vec<(ClusterId, ClusterId, Vec<VarId>)> = Vec::new();
        for (a, b, sep) in connections {
            directed.push((a, b, sep.clone()));
            directed.push((b, a, sep));
        }
        directed.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));

        let mut edge_lookup = HashMap::new();
        for (id, (s, t, _)) in directed.iter().enumerate() {
            edge_lookup.insert((*s, *t), id);
        }

        let pos_of = |scope: &[VarId], vars: &[VarId]| -> Vec<usize> {
            vars.iter()
                .map(|v| scope.iter().position(|w| w == v).expect("sepset var in scope"))
                .collect()
        };

        let edges: Vec<DirectedEdge> = directed
            .iter()
            .map(|(s, t, sep)| DirectedEdge {
                source: *s,
                target: *t,
                sepset: sep.clone(),
                reverse: edge_lookup[&(*t, *s)],
                sep_pos_in_source: pos_of(&clusters[*s].scope, sep),
                sep_pos_in_target: pos_of(&clusters[*t].scope, sep),
            })
            .collect();

        let mut in_edges = vec![Vec::new(); clusters.len()];
        let mut out_edges = vec![Vec::new(); clusters.len()];
        for (id, e) in edges.iter().enumerate() {
            out_edges[e.source].push(id);
            in_edges[e.target].push(id);
        }
        let inputs: Vec<Vec<EdgeId>> = edges
            .iter()
            .map(|e| {
                in_edges[e.source]
                    .iter()
                    .copied()
                    .filter(|&i| i != e.reverse)
                    .collect()
            })
            .collect();
        let dependents: Vec<Vec<EdgeId>> = edges
            .iter()
            .map(|e| {
                out_edges[e.target]
                    .iter()
                    .copied()
                    .filter(|&d| d != e.reverse)
                    .collect()
            })
            .collect();

        ClusterGraph {
            cardinalities,
            clusters,
            edges,
            in_edges,
            out_edges,
            inputs,
            dependents,
            edge_lookup,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_between(&self, source: ClusterId, target: ClusterId) -> Option<EdgeId> {
        self.edge_lookup.get(&(source, target)).copied()
    }

    /// Flat table length of the message carried by edge `m`.
    pub fn sepset_len(&self, m: EdgeId) -> usize {
        table_len(&self.edges[m].sepset, &self.cardinalities)
    }
}

/// Bethe construction: one cluster per variable and one per multi-variable
/// factor. Univariate factors are multiplied into their variable's cluster;
/// variables with no univariate factor get an all-ones cluster. Each factor
/// cluster connects to every variable cluster in its scope with a singleton
/// sepset.
pub fn build_bethe_graph(model: &Model) -> Result<ClusterGraph, ModelError> {
    model.validate()?;
    let n = model.num_vars();

    let mut clusters: Vec<Cluster> = (0..n)
        .map(|v| Cluster {
            scope: vec![v],
            potential: vec![1.0; model.cardinalities[v]],
        })
        .collect();

    let mut connections = Vec::new();
    for f in &model.factors {
        if f.scope.len() == 1 {
            let v = f.scope[0];
            for (slot, &x) in clusters[v].potential.iter_mut().zip(&f.table) {
                *slot *= x;
            }
        } else {
            let id = clusters.len();
            clusters.push(Cluster {
                scope: f.scope.clone(),
                potential: f.table.clone(),
            });
            for &v in &f.scope {
                connections.push((id, v, vec![v]));
            }
        }
    }

    Ok(ClusterGraph::assemble(
        model.cardinalities.clone(),
        clusters,
        connections,
    ))
}

/// Pairwise-loop construction: one cluster per pairwise factor, clusters
/// sharing a variable connected directly with that variable as the sepset.
/// Univariate factors are absorbed into the lexicographically first pairwise
/// cluster containing their variable. Two clusters sharing two variables is
/// an error.
pub fn build_pairwise_loop_graph(model: &Model) -> Result<ClusterGraph, ModelError> {
    model.validate()?;

    let mut clusters: Vec<Cluster> = Vec::new();
    for (fi, f) in model.factors.iter().enumerate() {
        match f.scope.len() {
            2 => clusters.push(Cluster {
                scope: f.scope.clone(),
                potential: f.table.clone(),
            }),
            1 => {} // absorbed below
            size => return Err(ModelError::NotPairwise { factor: fi, size }),
        }
    }
    for (fi, f) in model.factors.iter().enumerate() {
        if f.scope.len() != 1 {
            continue;
        }
        let v = f.scope[0];
        let host = clusters
            .iter()
            .position(|c| c.scope.contains(&v))
            .ok_or(ModelError::Unabsorbable { factor: fi, var: v })?;
        let cluster = &mut clusters[host];
        let pos = cluster.scope.iter().position(|&w| w == v).unwrap();
        let strides = scope_strides(&cluster.scope, &model.cardinalities);
        for (idx, slot) in cluster.potential.iter_mut().enumerate() {
            let state = (idx / strides[pos]) % model.cardinalities[v];
            *slot *= f.table[state];
        }
    }

    let mut connections = Vec::new();
    for a in 0..clusters.len() {
        for b in (a + 1)..clusters.len() {
            let shared: Vec<VarId> = clusters[a]
                .scope
                .iter()
                .copied()
                .filter(|v| clusters[b].scope.contains(v))
                .collect();
            match shared.len() {
                0 => {}
                1 => connections.push((a, b, shared)),
                _ => return Err(ModelError::SharedPairOfVariables { a, b }),
            }
        }
    }

    Ok(ClusterGraph::assemble(
        model.cardinalities.clone(),
        clusters,
        connections,
    ))
}

/// The 4-cycle binary model with clusters {X0,X1}, {X1,X2}, {X2,X3}, {X3,X0}
/// used throughout the contraction-analysis tests. It has a unique BP fixed
/// point under the pairwise-loop construction (8 messages).
pub fn four_cycle_model() -> Model {
    Model::new(
        vec![2, 2, 2, 2],
        vec![
            Factor::new(vec![0, 1], vec![0.25, 0.25, 0.5, 0.25]),
            Factor::new(vec![1, 2], vec![1.0, 0.5, 0.5, 0.5]),
            Factor::new(vec![2, 3], vec![1.0, 0.5, 0.5, 0.5]),
            Factor::new(vec![3, 0], vec![1.0, 0.5, 0.5, 1.0]),
        ],
    )
}

// ---------------------------------------------------------------------------
// MODEL text format
// ---------------------------------------------------------------------------

struct Tokens<'a> {
    iter: std::str::SplitWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    fn next_usize(&mut self, context: &'static str) -> Result<usize, ModelError> {
        let tok = self
            .iter
            .next()
            .ok_or(ModelError::UnexpectedEof(context))?;
        tok.parse()
            .map_err(|_| ModelError::InvalidToken {
                token: tok.to_string(),
                context,
            })
    }

    fn next_f64(&mut self, context: &'static str) -> Result<f64, ModelError> {
        let tok = self
            .iter
            .next()
            .ok_or(ModelError::UnexpectedEof(context))?;
        tok.parse()
            .map_err(|_| ModelError::InvalidToken {
                token: tok.to_string(),
                context,
            })
    }
}

/// Parses the MODEL text format (whitespace-separated tokens):
/// `MARKOV n card*n F (k id*k)*F (L real*L)*F`.
pub fn load_model(text: &str) -> Result<Model, ModelError> {
    let mut toks = Tokens {
        iter: text.split_whitespace(),
    };
    let header = toks
        .iter
        .next()
        .ok_or(ModelError::UnexpectedEof("header"))?;
    if header != "MARKOV" {
        return Err(ModelError::MalformedHeader(header.to_string()));
    }
    let n = toks.next_usize("variable count")?;
    let cardinalities: Vec<usize> = (0..n)
        .map(|_| toks.next_usize("cardinality"))
        .collect::<Result<_, _>>()?;
    let f = toks.next_usize("factor count")?;
    let mut scopes = Vec::with_capacity(f);
    for _ in 0..f {
        let k = toks.next_usize("scope size")?;
        let scope: Vec<VarId> = (0..k)
            .map(|_| toks.next_usize("scope variable id"))
            .collect::<Result<_, _>>()?;
        scopes.push(scope);
    }
    let mut factors = Vec::with_capacity(f);
    for scope in scopes {
        let len = toks.next_usize("table length")?;
        let table: Vec<f64> = (0..len)
            .map(|_| toks.next_f64("table entry"))
            .collect::<Result<_, _>>()?;
        factors.push(Factor::new(scope, table));
    }
    let model = Model::new(cardinalities, factors);
    model.validate()?;
    Ok(model)
}

/// Emits the canonical MODEL text. Reals carry 17 significant digits so the
/// save/load round trip is an identity.
pub fn save_model(model: &Model) -> String {
    let mut out = String::new();
    out.push_str("MARKOV\n");
    let _ = writeln!(out, "{}", model.num_vars());
    let cards: Vec<String> = model.cardinalities.iter().map(|c| c.to_string()).collect();
    out.push_str(&cards.join(" "));
    out.push('\n');
    let _ = writeln!(out, "{}", model.factors.len());
    for f in &model.factors {
        let mut line = f.scope.len().to_string();
        for v in &f.scope {
            let _ = write!(line, " {v}");
        }
        out.push_str(&line);
        out.push('\n');
    }
    for f in &model.factors {
        let _ = writeln!(out, "{}", f.table.len());
        let entries: Vec<String> = f.table.iter().map(|x| format!("{x:.16e}")).collect();
        out.push_str(&entries.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain3() -> Model {
        Model::new(
            vec![2, 2, 2],
            vec![
                Factor::new(vec![0, 1], vec![1.0, 2.0, 3.0, 1.0]),
                Factor::new(vec![1, 2], vec![2.0, 1.0, 1.0, 4.0]),
            ],
        )
    }

    #[test]
    fn bethe_single_pairwise_factor() {
        let m = Model::new(
            vec![2, 2],
            vec![Factor::new(vec![0, 1], vec![1.0, 2.0, 3.0, 4.0])],
        );
        let g = build_bethe_graph(&m).unwrap();
        assert_eq!(g.clusters.len(), 3);
        assert_eq!(g.num_edges(), 4);
        for e in &g.edges {
            assert_eq!(g.edges[e.reverse].source, e.target);
            assert_eq!(g.edges[e.reverse].target, e.source);
        }
    }

    #[test]
    fn bethe_ising_3x3_counts() {
        let model = crate::bench::gen_ising_grid(&crate::bench::GridSpec {
            n: 3,
            c: 7.0,
            seed: 1,
        });
        let g = build_bethe_graph(&model).unwrap();
        assert_eq!(g.clusters.len(), 9 + 12);
        assert_eq!(g.num_edges(), 48);
    }

    #[test]
    fn bethe_absorbs_univariate() {
        let m = Model::new(
            vec![2, 2],
            vec![
                Factor::new(vec![0], vec![0.5, 1.5]),
                Factor::new(vec![0, 1], vec![1.0, 1.0, 1.0, 1.0]),
            ],
        );
        let g = build_bethe_graph(&m).unwrap();
        assert_eq!(g.clusters.len(), 3);
        assert_eq!(g.clusters[0].potential, vec![0.5, 1.5]);
        assert_eq!(g.clusters[1].potential, vec![1.0, 1.0]);
    }

    #[test]
    fn bethe_tree_has_no_cycles() {
        // edges = clusters - components on a tree-structured factor set
        let g = build_bethe_graph(&chain3()).unwrap();
        assert_eq!(g.num_edges() / 2, g.clusters.len() - 1);
    }

    #[test]
    fn bethe_rejects_unknown_variable() {
        let m = Model::new(
            vec![2],
            vec![Factor::new(vec![0, 5], vec![1.0, 1.0, 1.0, 1.0])],
        );
        assert!(matches!(
            build_bethe_graph(&m),
            Err(ModelError::UnknownVariable { .. })
        ));
    }

    #[test]
    fn bethe_rejects_empty_factor_list() {
        let m = Model::new(vec![2], vec![]);
        assert!(matches!(
            build_bethe_graph(&m),
            Err(ModelError::EmptyFactorList)
        ));
    }

    #[test]
    fn pairwise_loop_four_cycle() {
        let g = build_pairwise_loop_graph(&four_cycle_model()).unwrap();
        assert_eq!(g.clusters.len(), 4);
        assert_eq!(g.num_edges(), 8);
        // every cluster has exactly two neighbors: a single loop
        for c in 0..4 {
            assert_eq!(g.out_edges[c].len(), 2);
            assert_eq!(g.in_edges[c].len(), 2);
        }
    }

    #[test]
    fn pairwise_disjoint_factors_no_edges() {
        let m = Model::new(
            vec![2, 2, 2, 2],
            vec![
                Factor::new(vec![0, 1], vec![1.0; 4]),
                Factor::new(vec![2, 3], vec![1.0; 4]),
            ],
        );
        let g = build_pairwise_loop_graph(&m).unwrap();
        assert_eq!(g.clusters.len(), 2);
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn pairwise_2x2_grid_is_4_cycle() {
        let m = Model::new(
            vec![2, 2, 2, 2],
            vec![
                Factor::new(vec![0, 1], vec![1.0; 4]),
                Factor::new(vec![1, 3], vec![1.0; 4]),
                Factor::new(vec![3, 2], vec![1.0; 4]),
                Factor::new(vec![2, 0], vec![1.0; 4]),
            ],
        );
        let g = build_pairwise_loop_graph(&m).unwrap();
        assert_eq!(g.clusters.len(), 4);
        assert_eq!(g.num_edges(), 8);
    }

    #[test]
    fn pairwise_rejects_triple_factor() {
        let m = Model::new(
            vec![2, 2, 2],
            vec![Factor::new(vec![0, 1, 2], vec![1.0; 8])],
        );
        assert!(matches!(
            build_pairwise_loop_graph(&m),
            Err(ModelError::NotPairwise { .. })
        ));
    }

    #[test]
    fn pairwise_rejects_two_shared_variables() {
        let m = Model::new(
            vec![2, 2],
            vec![
                Factor::new(vec![0, 1], vec![1.0; 4]),
                Factor::new(vec![1, 0], vec![1.0; 4]),
            ],
        );
        assert!(matches!(
            build_pairwise_loop_graph(&m),
            Err(ModelError::SharedPairOfVariables { .. })
        ));
    }

    #[test]
    fn sepsets_subset_of_both_scopes() {
        for g in [
            build_bethe_graph(&chain3()).unwrap(),
            build_pairwise_loop_graph(&four_cycle_model()).unwrap(),
        ] {
            for e in &g.edges {
                for v in &e.sepset {
                    assert!(g.clusters[e.source].scope.contains(v));
                    assert!(g.clusters[e.target].scope.contains(v));
                }
            }
        }
    }

    /// The product of assigned cluster potentials must equal the product of
    /// the original factors at every joint assignment.
    #[test]
    fn potential_product_preserved() {
        let model = chain3();
        let g = build_bethe_graph(&model).unwrap();
        let n = model.num_vars();
        let total: usize = model.cardinalities.iter().product();
        for flat in 0..total {
            let mut assignment = vec![0usize; n];
            let mut rest = flat;
            for v in (0..n).rev() {
                assignment[v] = rest % model.cardinalities[v];
                rest /= model.cardinalities[v];
            }
            let eval = |scope: &[VarId], table: &[f64]| -> f64 {
                let strides = scope_strides(scope, &model.cardinalities);
                let idx: usize = scope
                    .iter()
                    .zip(&strides)
                    .map(|(&v, &s)| assignment[v] * s)
                    .sum();
                table[idx]
            };
            let orig: f64 = model.factors.iter().map(|f| eval(&f.scope, &f.table)).product();
            let assigned: f64 = g.clusters.iter().map(|c| eval(&c.scope, &c.potential)).product();
            assert!((orig - assigned).abs() < 1e-12 * orig.abs().max(1.0));
        }
    }

    #[test]
    fn load_minimal_model() {
        let m = load_model("MARKOV 1 2 1 1 0 2 0.25 0.75").unwrap();
        assert_eq!(m.cardinalities, vec![2]);
        assert_eq!(m.factors[0].table, vec![0.25, 0.75]);
    }

    #[test]
    fn save_load_round_trip() {
        let model = four_cycle_model();
        let text = save_model(&model);
        let reloaded = load_model(&text).unwrap();
        assert_eq!(model, reloaded);
        // canonical re-emission is stable
        assert_eq!(text, save_model(&reloaded));
    }

    #[test]
    fn load_rejects_table_length_mismatch() {
        let err = load_model("MARKOV 2 2 2 1 2 0 1 3 1.0 1.0 1.0").unwrap_err();
        assert!(matches!(err, ModelError::TableLengthMismatch { .. }));
    }

    #[test]
    fn load_rejects_non_positive_entry() {
        let err = load_model("MARKOV 1 2 1 1 0 2 0.0 1.0").unwrap_err();
        assert!(matches!(err, ModelError::NonPositiveEntry { .. }));
    }

    #[test]
    fn load_rejects_bad_header() {
        let err = load_model("BAYES 1 2 1 1 0 2 0.5 0.5").unwrap_err();
        assert!(matches!(err, ModelError::MalformedHeader(_)));
    }

    #[test]
    fn load_rejects_duplicate_scope_variable() {
        let err = load_model("MARKOV 2 2 2 1 2 0 0 4 1 1 1 1").unwrap_err();
        assert!(matches!(err, ModelError::DuplicateScopeVariable { .. }));
    }
}
