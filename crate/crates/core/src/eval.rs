//! Filtered link-prediction ranking, node-classification accuracy, and
//! whole/average aggregation over the parts seen so far.

use crate::error::{Error, Result};
use crate::graph::{build_adjacency, node_neighbors, LabeledNode, StreamDataset, Triple};
use crate::model::Model;
use crate::num::Real;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Filtered 1-based ranks of one query under head and tail corruption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankResult {
    pub query: Triple,
    pub head_rank: usize,
    pub tail_rank: usize,
}

/// Per-part metrics row. `*_whole` is the metric on the union of query
/// sets 0..=part; `*_avg` is the unweighted mean of per-part values.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRow {
    pub part: usize,
    pub mrr_whole: f64,
    pub mrr_avg: f64,
    pub hits10_whole: f64,
    pub hits10_avg: f64,
    pub accuracy_whole: f64,
    pub accuracy_avg: f64,
    pub n_queries: usize,
}

/// Ranks one query against every candidate entity, with an arbitrary
/// validity score (higher better). Candidates present in `filter` are
/// ignored (closed-world filtering), except for the query itself.
/// Rank = 1 + number of strictly better candidates.
pub fn filtered_rank_with<T: Real, F: FnMut(&Triple) -> Result<T>>(
    query: &Triple,
    candidates: &[u32],
    filter: &HashSet<Triple>,
    mut score: F,
) -> Result<RankResult> {
    let reference = score(query)?;
    let rank_side = |corrupt_head: bool, score: &mut F| -> Result<usize> {
        let mut better = 0usize;
        for &c in candidates {
            let cand = if corrupt_head {
                Triple::new(c, query.relation, query.tail)
            } else {
                Triple::new(query.head, query.relation, c)
            };
            if cand == *query || filter.contains(&cand) {
                continue;
            }
            if score(&cand)? > reference {
                better += 1;
            }
        }
        Ok(better + 1)
    };
    let head_rank = rank_side(true, &mut score)?;
    let tail_rank = rank_side(false, &mut score)?;
    Ok(RankResult { query: *query, head_rank, tail_rank })
}

/// Model-backed filtered rank: component selection and validity score
/// both come from the model's current parameters.
pub fn filtered_rank<T: Real>(
    model: &Model<T>,
    query: &Triple,
    candidates: &[u32],
    filter: &HashSet<Triple>,
) -> Result<RankResult> {
    let dims = &model.table.dims;
    if (query.head as usize) >= dims.node_count || (query.tail as usize) >= dims.node_count {
        return Err(Error::Eval(format!(
            "query ({},{},{}) references an unknown entity",
            query.head, query.relation, query.tail
        )));
    }
    if (query.relation as usize) >= dims.relation_count {
        return Err(Error::Eval(format!("unknown relation {}", query.relation)));
    }
    filtered_rank_with(query, candidates, filter, |t| {
        let att = model.instance_attention(&model.store, t)?;
        model.validity_score(&model.store, t, &att.selected)
    })
}

/// Number of evaluation worker threads, from `CGRL_EVAL_THREADS`
/// (default 1; values below 1 or unparsable fall back to 1).
pub fn eval_threads() -> usize {
    std::env::var("CGRL_EVAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Ranks a batch of queries, optionally across threads. Results keep
/// query order; queries with unknown entities are skipped and counted.
pub fn rank_queries<T: Real>(
    model: &Model<T>,
    queries: &[Triple],
    candidates: &[u32],
    filter: &HashSet<Triple>,
    threads: usize,
) -> (Vec<RankResult>, usize) {
    let threads = threads.max(1).min(queries.len().max(1));
    let mut slots: Vec<Option<RankResult>> = vec![None; queries.len()];
    if threads <= 1 {
        for (slot, q) in slots.iter_mut().zip(queries) {
            match filtered_rank(model, q, candidates, filter) {
                Ok(r) => *slot = Some(r),
                Err(e) => log::warn!("skipping query: {e}"),
            }
        }
    } else {
        let chunk = queries.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (qchunk, schunk) in queries.chunks(chunk).zip(slots.chunks_mut(chunk)) {
                scope.spawn(move || {
                    for (slot, q) in schunk.iter_mut().zip(qchunk) {
                        match filtered_rank(model, q, candidates, filter) {
                            Ok(r) => *slot = Some(r),
                            Err(e) => log::warn!("skipping query: {e}"),
                        }
                    }
                });
            }
        });
    }
    let skipped = slots.iter().filter(|s| s.is_none()).count();
    (slots.into_iter().flatten().collect(), skipped)
}

/// Pooled MRR and Hits@10 over head and tail ranks.
pub fn link_metrics(results: &[RankResult]) -> Result<(f64, f64)> {
    if results.is_empty() {
        return Err(Error::Eval("no rank results to aggregate".into()));
    }
    let mut rr = 0.0;
    let mut hits = 0.0;
    let total = (results.len() * 2) as f64;
    for r in results {
        rr += 1.0 / r.head_rank as f64 + 1.0 / r.tail_rank as f64;
        hits += (r.head_rank <= 10) as u32 as f64 + (r.tail_rank <= 10) as u32 as f64;
    }
    Ok((rr / total, hits / total))
}

/// Fraction of nodes whose arg-max class logit matches the label.
/// Arg-max ties resolve to the smallest class id.
pub fn node_accuracy<T: Real>(
    model: &Model<T>,
    queries: &[LabeledNode],
    adjacency: &crate::graph::AdjacencyIndex,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Eval("no labeled query nodes".into()));
    }
    let mut correct = 0usize;
    for ln in queries {
        let neighbors: Vec<u32> = node_neighbors(ln.node, adjacency).into_iter().collect();
        let gated = model.gated_neighbors(&model.store, ln.node, &neighbors);
        let logits = model.node_logits(&model.store, &gated)?;
        let mut best = 0usize;
        for (c, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = c;
            }
        }
        if best == ln.label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

/// whole = the union metric, average = unweighted mean of per-part values.
pub fn aggregate(per_part: &[f64], union_value: f64) -> (f64, f64) {
    let average = if per_part.is_empty() {
        0.0
    } else {
        per_part.iter().sum::<f64>() / per_part.len() as f64
    };
    (union_value, average)
}

/// Evaluates the model after finishing part `upto` on every query set
/// released so far. Link-prediction parts rank against the cumulative
/// entity pool with the cumulative closed-world filter; classification
/// parts score accuracy over labeled query nodes. Parts whose queries
/// all skip are left out of the average.
pub fn evaluate_upto<T: Real>(
    model: &Model<T>,
    dataset: &StreamDataset<T>,
    upto: usize,
) -> Result<MetricsRow> {
    if upto >= dataset.parts.len() {
        return Err(Error::Eval(format!(
            "part {upto} out of range ({} parts)",
            dataset.parts.len()
        )));
    }
    let mut row = MetricsRow {
        part: upto,
        mrr_whole: 0.0,
        mrr_avg: 0.0,
        hits10_whole: 0.0,
        hits10_avg: 0.0,
        accuracy_whole: 0.0,
        accuracy_avg: 0.0,
        n_queries: 0,
    };
    if model.is_link_mode() {
        let candidates = dataset.seen_entities(upto);
        let filter = dataset.known_triples(upto);
        let threads = eval_threads();
        let mut pooled = Vec::new();
        let mut mrr_parts = Vec::new();
        let mut hits_parts = Vec::new();
        for part in &dataset.parts[..=upto] {
            let (results, skipped) =
                rank_queries(model, &part.query, &candidates, &filter, threads);
            if skipped > 0 {
                log::warn!("part {}: skipped {skipped} queries with unknown entities", part.index);
            }
            if results.is_empty() {
                continue;
            }
            let (mrr, hits) = link_metrics(&results)?;
            mrr_parts.push(mrr);
            hits_parts.push(hits);
            row.n_queries += results.len();
            pooled.extend(results);
        }
        let (mrr_union, hits_union) = link_metrics(&pooled)?;
        (row.mrr_whole, row.mrr_avg) = aggregate(&mrr_parts, mrr_union);
        (row.hits10_whole, row.hits10_avg) = aggregate(&hits_parts, hits_union);
    } else {
        let adjacency = build_adjacency(&dataset.parts, upto)?;
        let mut acc_parts = Vec::new();
        let mut union_queries: Vec<LabeledNode> = Vec::new();
        for part in &dataset.parts[..=upto] {
            if part.query_nodes.is_empty() {
                continue;
            }
            acc_parts.push(node_accuracy(model, &part.query_nodes, &adjacency)?);
            row.n_queries += part.query_nodes.len();
            union_queries.extend(part.query_nodes.iter().copied());
        }
        let union_acc = node_accuracy(model, &union_queries, &adjacency)?;
        (row.accuracy_whole, row.accuracy_avg) = aggregate(&acc_parts, union_acc);
    }
    Ok(row)
}
