use super::codes::PackedCodeSet;
use super::search::top_k_global;
use crate::error::{domain_err, shape_err, Result};

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

fn relevant(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() > 0.0
}

/// AP of one ranked relevance list, normalized by the relevant items it contains.
pub fn average_precision(rel: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (k, &r) in rel.iter().enumerate() {
        if r {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        acc / hits as f64
    }
}

/// Options for [`compute_map`].
#[derive(Clone, Copy, Debug, Default)]
pub struct MapOptions {
    /// Ranks evaluated per query; `None` means the whole database.
    pub top_k: Option<usize>,
    /// Drop database rows sharing the query's id (leave-one-out evaluation).
    pub exclude_self: bool,
}

/// Mean AP over queries, ranking the database by ascending Hamming distance with
/// ascending id on ties. Relevance is a positive label inner product; queries with
/// nothing relevant retrieved count as AP 0.
pub fn compute_map(
    queries: &PackedCodeSet,
    query_labels: &[Vec<f64>],
    db: &PackedCodeSet,
    db_labels: &[Vec<f64>],
    opts: MapOptions,
) -> Result<f64> {
    if db.is_empty() {
        return domain_err("cannot evaluate against an empty database");
    }
    if queries.is_empty() {
        return domain_err("no queries to evaluate");
    }
    if query_labels.len() != queries.len() || db_labels.len() != db.len() {
        return shape_err(format!(
            "labels ({}, {}) do not match codes ({}, {})",
            query_labels.len(),
            db_labels.len(),
            queries.len(),
            db.len()
        ));
    }
    if opts.top_k == Some(0) {
        return domain_err("top_k must be at least 1");
    }
    let label_of: std::collections::HashMap<u64, &Vec<f64>> = db.ids().iter().copied().zip(db_labels).collect();
    let mut total = 0.0;
    for q in 0..queries.len() {
        let qid = queries.id(q);
        let ranked = top_k_global(queries.code(q), db, db.len())?;
        let rel: Vec<bool> = ranked
            .results
            .iter()
            .filter(|r| !(opts.exclude_self && r.id == qid))
            .take(opts.top_k.unwrap_or(usize::MAX))
            .map(|r| relevant(&query_labels[q], label_of[&r.id]))
            .collect();
        total += average_precision(&rel);
    }
    Ok(total / queries.len() as f64)
}
