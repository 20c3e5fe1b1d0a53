//! Exact inference references: full enumeration, variable elimination, and
//! the approximation-quality metric.
//!
//! The partition function is accumulated in the log domain; grid potentials
//! carry e^{lambda*C} terms that overflow linear products on larger models.
//!
//! KL direction convention: `avg_kl` computes D(exact || belief), mean over
//! variables.

use thiserror::Error;

use crate::model::{scope_strides, table_len, Factor, Model, VarId};

/// Largest joint state space full enumeration will attempt.
pub const MAX_ENUM_STATES: usize = 1 << 24;
/// Largest intermediate table variable elimination will build.
pub const MAX_VE_TABLE: usize = 1 << 26;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("joint state space of {0} assignments exceeds the enumeration limit")]
    StateSpaceTooLarge(usize),
    #[error("intermediate elimination table of {0} entries exceeds the limit")]
    IntermediateTooLarge(usize),
    #[error("belief and exact marginals disagree on shape at variable {0}")]
    ShapeMismatch(VarId),
    #[error("zero belief entry at variable {0}")]
    ZeroBelief(VarId),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Exact per-variable marginals plus the log partition value.
#[derive(Debug, Clone)]
pub struct ExactMarginals {
    pub marginals: Vec<Vec<f64>>,
    pub log_z: f64,
    /// Exact MAP assignment; filled by enumeration only.
    pub map_assignment: Option<Vec<usize>>,
}

/// Exact marginals, log Z, and the MAP assignment by full enumeration.
pub fn brute_force_marginals(model: &Model) -> Result<ExactMarginals, OracleError> {
    model.validate()?;
    let n = model.num_vars();
    let total: usize = model.cardinalities.iter().product();
    if total > MAX_ENUM_STATES {
        return Err(OracleError::StateSpaceTooLarge(total));
    }

    let strides: Vec<Vec<usize>> = model
        .factors
        .iter()
        .map(|f| scope_strides(&f.scope, &model.cardinalities))
        .collect();
    let mut assignment = vec![0usize; n];
    let decode = |flat: usize, assignment: &mut [usize]| {
        let mut rest = flat;
        for v in (0..n).rev() {
            assignment[v] = rest % model.cardinalities[v];
            rest /= model.cardinalities[v];
        }
    };
    let log_weight = |assignment: &[usize]| -> f64 {
        model
            .factors
            .iter()
            .zip(&strides)
            .map(|(f, s)| {
                let idx: usize = f
                    .scope
                    .iter()
                    .zip(s)
                    .map(|(&v, &stride)| assignment[v] * stride)
                    .sum();
                f.table[idx].ln()
            })
            .sum()
    };

    let mut max_log = f64::NEG_INFINITY;
    let mut map_assignment = vec![0usize; n];
    for flat in 0..total {
        decode(flat, &mut assignment);
        let lw = log_weight(&assignment);
        if lw > max_log {
            max_log = lw;
            map_assignment.copy_from_slice(&assignment);
        }
    }

    let mut z = 0.0f64;
    let mut marginals: Vec<Vec<f64>> = model
        .cardinalities
        .iter()
        .map(|&c| vec![0.0; c])
        .collect();
    for flat in 0..total {
        decode(flat, &mut assignment);
        let w = (log_weight(&assignment) - max_log).exp();
        z += w;
        for v in 0..n {
            marginals[v][assignment[v]] += w;
        }
    }
    for marg in marginals.iter_mut() {
        for x in marg.iter_mut() {
            *x /= z;
        }
    }

    Ok(ExactMarginals {
        marginals,
        log_z: max_log + z.ln(),
        map_assignment: Some(map_assignment),
    })
}

/// Intermediate factor tracked alongside an accumulated log scale so table
/// entries stay near unit magnitude.
fn multiply(factors: &[Factor], cards: &[usize]) -> Result<Factor, OracleError> {
    let mut scope: Vec<VarId> = Vec::new();
    for f in factors {
        for &v in &f.scope {
            if !scope.contains(&v) {
                scope.push(v);
            }
        }
    }
    let len = table_len(&scope, cards);
    if len > MAX_VE_TABLE {
        return Err(OracleError::IntermediateTooLarge(len));
    }
    let strides = scope_strides(&scope, cards);
    let mut table = vec![1.0f64; len];
    for f in factors {
        let f_strides = scope_strides(&f.scope, cards);
        let positions: Vec<usize> = f
            .scope
            .iter()
            .map(|v| scope.iter().position(|w| w == v).unwrap())
            .collect();
        for (idx, slot) in table.iter_mut().enumerate() {
            let mut fi = 0usize;
            for (j, &pos) in positions.iter().enumerate() {
                fi += ((idx / strides[pos]) % cards[scope[pos]]) * f_strides[j];
            }
            *slot *= f.table[fi];
        }
    }
    Ok(Factor::new(scope, table))
}

fn sum_out(factor: &Factor, var: VarId, cards: &[usize]) -> Factor {
    let pos = factor.scope.iter().position(|&v| v == var).unwrap();
    let new_scope: Vec<VarId> = factor
        .scope
        .iter()
        .copied()
        .filter(|&v| v != var)
        .collect();
    let strides = scope_strides(&factor.scope, cards);
    let new_strides = scope_strides(&new_scope, cards);
    let mut table = vec![0.0f64; table_len(&new_scope, cards)];
    for (idx, &value) in factor.table.iter().enumerate() {
        let mut ni = 0usize;
        let mut j = 0;
        for (p, &v) in factor.scope.iter().enumerate() {
            if p == pos {
                continue;
            }
            ni += ((idx / strides[p]) % cards[v]) * new_strides[j];
            j += 1;
        }
        table[ni] += value;
    }
    Factor::new(new_scope, table)
}

/// Exact marginals by sum-product variable elimination: one elimination run
/// per query variable along `order` (query skipped). Intermediate results are
/// renormalized with the scale tracked in the log domain.
pub fn variable_elimination_marginals(
    model: &Model,
    order: Option<&[VarId]>,
) -> Result<ExactMarginals, OracleError> {
    model.validate()?;
    let n = model.num_vars();
    let default_order: Vec<VarId> = (0..n).collect();
    let order = order.unwrap_or(&default_order);
    let cards = &model.cardinalities;

    let mut marginals = Vec::with_capacity(n);
    let mut log_z = 0.0;
    for query in 0..n {
        let mut pool: Vec<Factor> = model.factors.iter().cloned().collect();
        let mut log_scale = 0.0f64;
        for &v in order {
            if v == query {
                continue;
            }
            let (touching, rest): (Vec<Factor>, Vec<Factor>) =
                pool.into_iter().partition(|f| f.scope.contains(&v));
            pool = rest;
            if touching.is_empty() {
                continue;
            }
            let product = multiply(&touching, cards)?;
            let mut summed = sum_out(&product, v, cards);
            let total: f64 = summed.table.iter().sum();
            for x in summed.table.iter_mut() {
                *x /= total;
            }
            log_scale += total.ln();
            pool.push(summed);
        }
        let combined = multiply(&pool, cards)?;
        // after eliminating everything else only the query can remain; a
        // variable touched by no factor has a uniform marginal
        let reduced = if combined.scope.contains(&query) {
            combined
        } else {
            Factor::new(vec![query], vec![1.0; cards[query]])
        };
        let total: f64 = reduced.table.iter().sum();
        let marg: Vec<f64> = reduced.table.iter().map(|x| x / total).collect();
        marginals.push(marg);
        if query == 0 {
            log_z = log_scale + total.ln();
        }
    }

    Ok(ExactMarginals {
        marginals,
        log_z,
        map_assignment: None,
    })
}

/// Mean over variables of D(exact || belief) in nats.
pub fn avg_kl(beliefs: &[Vec<f64>], exact: &ExactMarginals) -> Result<f64, OracleError> {
    if beliefs.len() != exact.marginals.len() {
        return Err(OracleError::ShapeMismatch(beliefs.len()));
    }
    let mut total = 0.0;
    for (v, (b, e)) in beliefs.iter().zip(&exact.marginals).enumerate() {
        if b.len() != e.len() {
            return Err(OracleError::ShapeMismatch(v));
        }
        for (&pb, &pe) in b.iter().zip(e) {
            if pe > 0.0 {
                if pb <= 0.0 {
                    return Err(OracleError::ZeroBelief(v));
                }
                total += pe * (pe / pb).ln();
            }
        }
    }
    Ok(total / beliefs.len() as f64)
}
