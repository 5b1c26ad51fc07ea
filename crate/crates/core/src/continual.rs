//! Selective replay: activate old triples related to the incoming part
//! and restrict their updates to the components both sides care about.
//!
//! Activation walks the old-part neighborhood of every new triple and
//! keeps neighbors whose top-n component set (under part-start
//! attention) intersects the new triple's. Replay then only updates the
//! common components of the touched nodes; everything else stays
//! bit-identical through the masked gradient filter plus the sparse
//! optimizer.

use crate::disentangle::{AttentionWeights, DisentangledTable};
use crate::error::Result;
use crate::graph::{triple_neighbors, AdjacencyIndex, Triple};
use crate::model::Model;
use crate::num::Real;
use crate::tape::{ParamId, ParamStore};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

/// One activated old triple and why it was activated.
#[derive(Debug, Clone)]
pub struct ActivationRecord<T> {
    pub old: Triple,
    /// New triple that triggered the activation.
    pub activated_by: Triple,
    /// 1 = shares a node with the new triple, 2 = neighbor-of-neighbor.
    pub order: u8,
    /// Common top-n components, ascending; never empty.
    pub common: Vec<usize>,
    /// Old triple's attention at part start (frozen for replay).
    pub frozen: AttentionWeights<T>,
}

impl<T: Real> ActivationRecord<T> {
    /// Attention mass concentrated on the common components.
    fn common_mass(&self) -> T {
        self.common.iter().map(|&k| self.frozen.alpha[k]).sum()
    }
}

fn shares_node(a: &Triple, b: &Triple) -> bool {
    a.contains(b.head) || a.contains(b.tail)
}

/// Activates old triples related to the new part.
///
/// For every new triple, order-(<= config) neighbor triples from the
/// old-part index are kept when their top-n set intersects the new
/// triple's top-n set (both computed against `att_store`, the part-start
/// checkpoint). Duplicate activations of one old triple keep the record
/// with the largest common set (first seen wins ties). If more than
/// `budget` records survive, those with the largest frozen attention
/// mass on their common set are kept, ties resolved by activation
/// order.
pub fn activate_neighbors<T: Real>(
    model: &Model<T>,
    att_store: &ParamStore<T>,
    new_triples: &[Triple],
    index: &AdjacencyIndex,
    budget: usize,
) -> Result<Vec<ActivationRecord<T>>> {
    let order = model.config.neighbor_order;
    let new_set: HashSet<Triple> = new_triples.iter().copied().collect();
    let mut records: Vec<ActivationRecord<T>> = Vec::new();
    let mut slot_of: HashMap<Triple, usize> = HashMap::new();
    for t in new_triples {
        let att_new = model.instance_attention(att_store, t)?;
        for old in triple_neighbors(t, index, order) {
            if new_set.contains(&old) {
                continue; // the index covers old parts only; guard anyway
            }
            let att_old = model.instance_attention(att_store, &old)?;
            let common: Vec<usize> = att_old
                .selected
                .iter()
                .filter(|k| att_new.selected.contains(k))
                .copied()
                .collect();
            if common.is_empty() {
                continue;
            }
            let rec = ActivationRecord {
                old,
                activated_by: *t,
                order: if shares_node(&old, t) { 1 } else { 2 },
                common,
                frozen: att_old,
            };
            match slot_of.get(&old) {
                Some(&i) => {
                    if rec.common.len() > records[i].common.len() {
                        records[i] = rec;
                    }
                }
                None => {
                    slot_of.insert(old, records.len());
                    records.push(rec);
                }
            }
        }
    }
    if records.len() > budget {
        let mut keep: Vec<usize> = (0..records.len()).collect();
        // stable sort: equal masses stay in activation order
        keep.sort_by(|&a, &b| {
            records[b]
                .common_mass()
                .partial_cmp(&records[a].common_mass())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        keep.truncate(budget);
        keep.sort_unstable();
        records = keep.into_iter().map(|i| records[i].clone()).collect();
    }
    Ok(records)
}

/// Per-node updatable-component flags for one replay batch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ComponentMasks {
    pub k: usize,
    /// Nodes absent from the map have no updatable components.
    pub by_node: BTreeMap<u32, Vec<bool>>,
}

impl ComponentMasks {
    pub fn empty(k: usize) -> Self {
        ComponentMasks { k, by_node: BTreeMap::new() }
    }

    pub fn mark(&mut self, node: u32, component: usize) {
        self.by_node.entry(node).or_insert_with(|| vec![false; self.k])[component] = true;
    }

    pub fn is_marked(&self, node: u32, component: usize) -> bool {
        self.by_node.get(&node).map_or(false, |m| m[component])
    }
}

/// Union of common sets per node over all records touching it.
pub fn build_masks<T: Real>(records: &[ActivationRecord<T>], k: usize) -> ComponentMasks {
    let mut masks = ComponentMasks::empty(k);
    for rec in records {
        for node in [rec.old.head, rec.old.tail] {
            for &c in &rec.common {
                masks.mark(node, c);
            }
        }
    }
    masks
}

/// Applies replay-batch gradient restrictions in place:
/// - node-component gradients survive only where the mask marks them;
/// - attention parameters (relation logits and, if given, the pair or
///   triple attention row) lose their gradients entirely (frozen);
/// - relation embeddings and scorer weights pass through unchanged.
pub fn masked_gradient_filter<T: Real>(
    masks: &ComponentMasks,
    table: &DisentangledTable,
    attention_param: Option<ParamId>,
    store: &mut ParamStore<T>,
) {
    let k = table.dims.k;
    let d_c = table.dims.d_c;
    let grad = store.grad_mut(table.node_components);
    for u in 0..table.dims.node_count {
        let mask = masks.by_node.get(&(u as u32));
        for comp in 0..k {
            let keep = mask.map_or(false, |m| m[comp]);
            if !keep {
                let off = (u * k + comp) * d_c;
                grad[off..off + d_c].fill(T::zero());
            }
        }
    }
    if let Some(id) = table.relation_logits {
        store.grad_mut(id).fill(T::zero());
    }
    if let Some(id) = attention_param {
        store.grad_mut(id).fill(T::zero());
    }
}

/// Case-study audit dump: `new_triple, old_triple, order, common_components`.
pub fn write_activation_audit<T: Real>(
    path: &Path,
    records: &[ActivationRecord<T>],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| crate::error::Error::Io(std::io::Error::other(e)))?;
    w.write_record(["new_triple", "old_triple", "order", "common_components"])
        .map_err(|e| crate::error::Error::Io(std::io::Error::other(e)))?;
    for rec in records {
        let fmt = |t: &Triple| format!("({},{},{})", t.head, t.relation, t.tail);
        let common = rec
            .common
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        w.write_record([fmt(&rec.activated_by), fmt(&rec.old), rec.order.to_string(), common])
            .map_err(|e| crate::error::Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
