//! Disentangled embedding table and component attention.
//!
//! Every node embedding is split into K components of dimension `d_c`;
//! a per-relation (or per-pair) attention distribution over components
//! picks the top-n most related ones, and only those participate in
//! scoring and updates. Selection is discrete; the attention weights
//! themselves stay differentiable through the sharpening penalty.

use crate::error::{Error, Result};
use crate::num::{softmax, Real};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use rand::distributions::uniform::SampleUniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Shape bundle for a disentangled table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDims {
    pub node_count: usize,
    pub relation_count: usize,
    /// Number of components per node.
    pub k: usize,
    /// Dimension of one component.
    pub d_c: usize,
    /// Number of components selected per instance.
    pub n: usize,
}

impl TableDims {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.d_c < 1 || self.n < 1 || self.n > self.k {
            return Err(Error::Config(format!(
                "invalid table shape: K={}, d_c={}, n={} (need K>=1, d_c>=1, 1<=n<=K)",
                self.k, self.d_c, self.n
            )));
        }
        Ok(())
    }

    /// Full node embedding dimension d = K * d_c.
    pub fn d(&self) -> usize {
        self.k * self.d_c
    }

    /// Relation embedding dimension l = n * d_c.
    pub fn rel_dim(&self) -> usize {
        self.n * self.d_c
    }
}

/// Attention over the K components of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    /// Softmax weights, length K.
    pub alpha: Vec<T>,
    /// Top-n component indices, ascending.
    pub selected: Vec<usize>,
}

/// Indices of the n largest entries of `alpha`, ties broken toward the
/// smaller index, returned in ascending index order (the fixed
/// concatenation layout).
pub fn top_components<T: Real>(alpha: &[T], n: usize) -> Vec<usize> {
    debug_assert!(n <= alpha.len());
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.sort_by(|&a, &b| {
        alpha[b]
            .partial_cmp(&alpha[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut selected = order[..n].to_vec();
    selected.sort_unstable();
    selected
}

fn attention_from_scores<T: Real>(scores: &[T], n: usize) -> AttentionWeights<T> {
    let alpha = softmax(scores);
    let selected = top_components(&alpha, n);
    AttentionWeights { alpha, selected }
}

/// Uniform draw in [-bound, bound], one value per slot, in slot order.
pub fn uniform_init<T: Real + SampleUniform>(rng: &mut ChaCha8Rng, len: usize, bound: T) -> Vec<T> {
    (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// Xavier-style init bound 6 / sqrt(fan) used for embeddings and weights.
pub fn init_bound<T: Real>(fan: usize) -> T {
    T::from_f64_c(6.0) / T::from_f64_c(fan as f64).sqrt()
}

/// Disentangled embedding table backed by a [`ParamStore`].
///
/// Layouts (flat, row-major):
/// - node components: `(u * K + k) * d_c + j`
/// - relation embeddings: `r * (n * d_c) + j`
/// - relation attention logits: `r * K + k`
#[derive(Debug, Clone)]
pub struct DisentangledTable {
    pub dims: TableDims,
    pub node_components: ParamId,
    /// Present in link-prediction mode only.
    pub relation_embeddings: Option<ParamId>,
    /// Present with per-relation attention only.
    pub relation_logits: Option<ParamId>,
}

pub const NODE_COMPONENTS: &str = "node_components";
pub const RELATION_EMBEDDINGS: &str = "relation_embeddings";
pub const RELATION_LOGITS: &str = "relation_logits";

impl DisentangledTable {
    /// Link-prediction table: node components and relation embeddings
    /// drawn uniform in [-6/sqrt(d_c), 6/sqrt(d_c)], attention logits
    /// zero (so attention starts uniform).
    pub fn init_kg<T: Real>(
        store: &mut ParamStore<T>,
        dims: TableDims,
        seed: u64,
    ) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = init_bound::<T>(dims.d_c);
        let nodes = uniform_init(&mut rng, dims.node_count * dims.k * dims.d_c, bound);
        let rels = uniform_init(&mut rng, dims.relation_count * dims.rel_dim(), bound);
        let node_components = store.add(NODE_COMPONENTS, nodes, dims.node_count * dims.k, dims.d_c);
        let relation_embeddings =
            Some(store.add(RELATION_EMBEDDINGS, rels, dims.relation_count, dims.rel_dim()));
        let relation_logits = Some(store.add(
            RELATION_LOGITS,
            vec![T::zero(); dims.relation_count * dims.k],
            dims.relation_count,
            dims.k,
        ));
        Ok(DisentangledTable { dims, node_components, relation_embeddings, relation_logits })
    }

    /// Node-embedding table: components are the K equal chunks of each
    /// node's raw feature vector, so d is fixed to the feature length.
    /// No relation parameters.
    pub fn init_ne<T: Real>(
        store: &mut ParamStore<T>,
        features: &[Vec<T>],
        k: usize,
        n: usize,
    ) -> Result<Self> {
        let node_count = features.len();
        if node_count == 0 {
            return Err(Error::Config("node features are empty".into()));
        }
        let d = features[0].len();
        if d == 0 || d % k != 0 {
            return Err(Error::Config(format!(
                "feature dimension {d} is not divisible by K={k}"
            )));
        }
        let dims = TableDims { node_count, relation_count: 0, k, d_c: d / k, n };
        dims.validate()?;
        let mut flat = Vec::with_capacity(node_count * d);
        for (u, f) in features.iter().enumerate() {
            if f.len() != d {
                return Err(Error::Data(format!(
                    "node {u} has feature length {}, expected {d}",
                    f.len()
                )));
            }
            flat.extend_from_slice(f);
        }
        let node_components = store.add(NODE_COMPONENTS, flat, node_count * k, dims.d_c);
        Ok(DisentangledTable { dims, node_components, relation_embeddings: None, relation_logits: None })
    }

    fn component_offset(&self, u: u32, k: usize) -> usize {
        (u as usize * self.dims.k + k) * self.dims.d_c
    }

    pub fn node_component<'s, T: Real>(&self, store: &'s ParamStore<T>, u: u32, k: usize) -> &'s [T] {
        let off = self.component_offset(u, k);
        &store.values(self.node_components)[off..off + self.dims.d_c]
    }

    /// Full node embedding: all K components in index order.
    pub fn node_embedding<'s, T: Real>(&self, store: &'s ParamStore<T>, u: u32) -> &'s [T] {
        let off = self.component_offset(u, 0);
        &store.values(self.node_components)[off..off + self.dims.d()]
    }

    pub fn relation_embedding<'s, T: Real>(&self, store: &'s ParamStore<T>, r: u32) -> &'s [T] {
        let id = self.relation_embeddings.expect("relation embeddings absent");
        let l = self.dims.rel_dim();
        &store.values(id)[r as usize * l..(r as usize + 1) * l]
    }

    /// Per-relation component attention: softmax of the relation's
    /// logits, top-n selected with index tie-break.
    pub fn relation_attention_kg<T: Real>(
        &self,
        store: &ParamStore<T>,
        r: u32,
    ) -> AttentionWeights<T> {
        let id = self.relation_logits.expect("relation logits absent");
        let k = self.dims.k;
        let logits = &store.values(id)[r as usize * k..(r as usize + 1) * k];
        attention_from_scores(logits, self.dims.n)
    }

    /// Pair attention: score_k = ReLU(W2 . [u^k ; v^k]), softmax over k.
    /// With all scores clipped to zero this degrades to uniform.
    pub fn pair_attention_ne<T: Real>(
        &self,
        store: &ParamStore<T>,
        w2: ParamId,
        u: u32,
        v: u32,
    ) -> AttentionWeights<T> {
        let w = store.values(w2);
        debug_assert_eq!(w.len(), 2 * self.dims.d_c, "pair attention weight shape");
        let scores: Vec<T> = (0..self.dims.k)
            .map(|k| {
                let uk = self.node_component(store, u, k);
                let vk = self.node_component(store, v, k);
                let s: T = uk
                    .iter()
                    .chain(vk.iter())
                    .zip(w.iter())
                    .map(|(&x, &wi)| wi * x)
                    .sum();
                if s > T::zero() {
                    s
                } else {
                    T::zero()
                }
            })
            .collect();
        attention_from_scores(&scores, self.dims.n)
    }

    /// Triple attention variants: `a1` scores [u^k ; v^k] (the relation
    /// is ignored), `a2` scores [u^k ; r ; v^k] with a weight row
    /// widened by the relation dimension.
    pub fn triple_attention_variant<T: Real>(
        &self,
        store: &ParamStore<T>,
        weights: ParamId,
        u: u32,
        r: u32,
        v: u32,
        variant: TripleVariant,
    ) -> Result<AttentionWeights<T>> {
        match variant {
            TripleVariant::A1 => Ok(self.pair_attention_ne(store, weights, u, v)),
            TripleVariant::A2 => {
                if self.relation_embeddings.is_none() {
                    return Err(Error::Config(
                        "triple attention variant a2 requires relation embeddings".into(),
                    ));
                }
                let w = store.values(weights);
                let l = self.dims.rel_dim();
                debug_assert_eq!(w.len(), 2 * self.dims.d_c + l, "triple attention weight shape");
                let rv = self.relation_embedding(store, r).to_vec();
                let scores: Vec<T> = (0..self.dims.k)
                    .map(|k| {
                        let uk = self.node_component(store, u, k);
                        let vk = self.node_component(store, v, k);
                        let s: T = uk
                            .iter()
                            .chain(rv.iter())
                            .chain(vk.iter())
                            .zip(w.iter())
                            .map(|(&x, &wi)| wi * x)
                            .sum();
                        if s > T::zero() {
                            s
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                Ok(attention_from_scores(&scores, self.dims.n))
            }
        }
    }

    /// Concatenation of the selected components of `u`, ascending
    /// component index; length n * d_c.
    pub fn gather_top<T: Real>(
        &self,
        store: &ParamStore<T>,
        u: u32,
        selected: &[usize],
    ) -> Vec<T> {
        let mut out = Vec::with_capacity(selected.len() * self.dims.d_c);
        for &k in selected {
            out.extend_from_slice(self.node_component(store, u, k));
        }
        out
    }

    // ---- tape builders (training paths) ----

    pub fn tape_component<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        u: u32,
        k: usize,
    ) -> Var {
        tape.param_slice(store, self.node_components, self.component_offset(u, k), self.dims.d_c)
    }

    /// Tape node for û: selected components concatenated ascending.
    pub fn tape_gather<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        u: u32,
        selected: &[usize],
    ) -> Var {
        let parts: Vec<Var> = selected.iter().map(|&k| self.tape_component(tape, store, u, k)).collect();
        tape.concat(&parts)
    }

    pub fn tape_relation<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, r: u32) -> Var {
        let id = self.relation_embeddings.expect("relation embeddings absent");
        let l = self.dims.rel_dim();
        tape.param_slice(store, id, r as usize * l, l)
    }

    /// Differentiable per-relation attention vector (length K).
    pub fn tape_relation_alpha<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        r: u32,
    ) -> Var {
        let id = self.relation_logits.expect("relation logits absent");
        let k = self.dims.k;
        let logits = tape.param_slice(store, id, r as usize * k, k);
        tape.softmax(logits)
    }

    /// Differentiable pair attention vector (length K).
    pub fn tape_pair_alpha<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        w2: ParamId,
        u: u32,
        v: u32,
    ) -> Var {
        let w = tape.param(store, w2);
        let scores: Vec<Var> = (0..self.dims.k)
            .map(|k| {
                let uk = self.tape_component(tape, store, u, k);
                let vk = self.tape_component(tape, store, v, k);
                let joined = tape.concat(&[uk, vk]);
                tape.dot(joined, w)
            })
            .collect();
        let stacked = tape.concat(&scores);
        let clipped = tape.relu(stacked);
        tape.softmax(clipped)
    }

    /// Differentiable triple attention (variant a2) vector (length K).
    pub fn tape_triple_alpha<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        weights: ParamId,
        u: u32,
        r: u32,
        v: u32,
    ) -> Var {
        let w = tape.param(store, weights);
        let rv = self.tape_relation(tape, store, r);
        let scores: Vec<Var> = (0..self.dims.k)
            .map(|k| {
                let uk = self.tape_component(tape, store, u, k);
                let vk = self.tape_component(tape, store, v, k);
                let joined = tape.concat(&[uk, rv, vk]);
                tape.dot(joined, w)
            })
            .collect();
        let stacked = tape.concat(&scores);
        let clipped = tape.relu(stacked);
        tape.softmax(clipped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripleVariant {
    A1,
    A2,
}

/// Case-study dump: one row per relation, `relation_name, alpha_1..alpha_K`.
pub fn write_attention_csv<T: Real>(
    path: &Path,
    table: &DisentangledTable,
    store: &ParamStore<T>,
    relation_names: &[String],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut header = vec!["relation".to_string()];
    header.extend((1..=table.dims.k).map(|i| format!("alpha_{i}")));
    w.write_record(&header).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in 0..table.dims.relation_count {
        let att = table.relation_attention_kg(store, r as u32);
        let mut row = vec![relation_names
            .get(r)
            .cloned()
            .unwrap_or_else(|| format!("relation_{r}"))];
        row.extend(att.alpha.iter().map(|a| format!("{a}")));
        w.write_record(&row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kg_table(dims: TableDims, seed: u64) -> (ParamStore<f64>, DisentangledTable) {
        let mut store = ParamStore::new();
        let table = DisentangledTable::init_kg(&mut store, dims, seed).unwrap();
        (store, table)
    }

    const DIMS_4X2: TableDims =
        TableDims { node_count: 3, relation_count: 2, k: 4, d_c: 2, n: 2 };

    #[test]
    fn init_values_in_range() {
        let (store, table) = kg_table(DIMS_4X2, 7);
        let bound = 6.0 / (2.0f64).sqrt();
        assert_eq!(store.values(table.node_components).len(), 3 * 4 * 2);
        assert!(store.values(table.node_components).iter().all(|v| v.abs() <= bound));
        assert!(store
            .values(table.relation_embeddings.unwrap())
            .iter()
            .all(|v| v.abs() <= bound));
    }

    #[test]
    fn zero_logits_give_uniform_attention() {
        let (store, table) = kg_table(DIMS_4X2, 7);
        let att = table.relation_attention_kg(&store, 0);
        assert!(att.alpha.iter().all(|&a| (a - 0.25).abs() < 1e-15));
        assert_eq!(att.selected, vec![0, 1]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (s1, t1) = kg_table(DIMS_4X2, 42);
        let (s2, t2) = kg_table(DIMS_4X2, 42);
        let a = s1.values(t1.node_components);
        let b = s2.values(t2.node_components);
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let (s3, t3) = kg_table(DIMS_4X2, 43);
        assert_ne!(s1.values(t1.node_components), s3.values(t3.node_components));
    }

    #[test]
    fn invalid_shapes_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        let bad = TableDims { node_count: 1, relation_count: 1, k: 2, d_c: 2, n: 3 };
        assert!(DisentangledTable::init_kg(&mut store, bad, 0).is_err());
        let bad = TableDims { node_count: 1, relation_count: 1, k: 0, d_c: 2, n: 1 };
        assert!(DisentangledTable::init_kg(&mut store, bad, 0).is_err());
    }

    #[test]
    fn closed_form_softmax_example() {
        let dims = TableDims { node_count: 1, relation_count: 1, k: 2, d_c: 1, n: 1 };
        let (mut store, table) = kg_table(dims, 0);
        let id = table.relation_logits.unwrap();
        store.values_mut(id).copy_from_slice(&[0.0, 3.0f64.ln()]);
        let att = table.relation_attention_kg(&store, 0);
        assert!((att.alpha[0] - 0.25).abs() < 1e-12);
        assert!((att.alpha[1] - 0.75).abs() < 1e-12);
        assert_eq!(att.selected, vec![1]);
    }

    #[test]
    fn random_logits_match_recomputation() {
        let dims = TableDims { node_count: 1, relation_count: 1, k: 8, d_c: 1, n: 3 };
        let (mut store, table) = kg_table(dims, 0);
        let logits = [1.25, -0.5, 0.75, 2.0, -1.0, 0.25, 1.25, 0.0];
        store.values_mut(table.relation_logits.unwrap()).copy_from_slice(&logits);
        let att = table.relation_attention_kg(&store, 0);
        // independent recomputation without max subtraction
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (a, l) in att.alpha.iter().zip(&logits) {
            assert!((a - l.exp() / z).abs() < 1e-12);
        }
        // 2.0 > 1.25 (tie between idx 0 and 6 -> idx 0) > rest
        assert_eq!(att.selected, vec![0, 3, 6].iter().take(3).cloned().collect::<Vec<_>>());
        assert_eq!(att.selected, vec![0, 3, 6]);
    }

    fn pair_setup() -> (ParamStore<f64>, DisentangledTable, ParamId) {
        let mut store = ParamStore::new();
        let dims = TableDims { node_count: 2, relation_count: 0, k: 4, d_c: 2, n: 2 };
        let features = vec![
            vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5, 0.0, 1.0],
            vec![1.0, 0.5, -0.5, 1.25, 0.75, -1.5, 2.0, -0.25],
        ];
        let table = DisentangledTable::init_ne(&mut store, &features, dims.k, dims.n).unwrap();
        let w2 = store.add("pair_attention", vec![0.0; 4], 1, 4);
        (store, table, w2)
    }

    #[test]
    fn zero_pair_weights_give_uniform() {
        let (store, table, w2) = pair_setup();
        let att = table.pair_attention_ne(&store, w2, 0, 1);
        assert!(att.alpha.iter().all(|&a| (a - 0.25).abs() < 1e-15));
        assert_eq!(att.selected, vec![0, 1]);
    }

    #[test]
    fn fully_clipped_scores_give_uniform() {
        let (mut store, table, w2) = pair_setup();
        // weights chosen so every component score is negative pre-ReLU
        store.values_mut(w2).copy_from_slice(&[-10.0, -10.0, -10.0, -10.0]);
        // make all features positive so W2 . x < 0
        let vals = store.values_mut(table.node_components);
        for v in vals.iter_mut() {
            *v = v.abs() + 0.1;
        }
        let att = table.pair_attention_ne(&store, w2, 0, 1);
        assert!(att.alpha.iter().all(|&a| (a - 0.25).abs() < 1e-15));
    }

    #[test]
    fn pair_attention_matches_recomputation() {
        let (mut store, table, w2) = pair_setup();
        store.values_mut(w2).copy_from_slice(&[0.3, -0.8, 1.1, 0.6]);
        let att = table.pair_attention_ne(&store, w2, 0, 1);
        // independent recomputation with explicit indexing
        let w = store.values(w2).to_vec();
        let mut scores = [0.0f64; 4];
        for k in 0..4 {
            let uk = table.node_component(&store, 0, k);
            let vk = table.node_component(&store, 1, k);
            let mut s = 0.0;
            for j in 0..2 {
                s += w[j] * uk[j] + w[2 + j] * vk[j];
            }
            scores[k] = s.max(0.0);
        }
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for k in 0..4 {
            assert!((att.alpha[k] - scores[k].exp() / z).abs() < 1e-12);
        }
    }

    fn kg_with_weights() -> (ParamStore<f64>, DisentangledTable, ParamId, ParamId) {
        let dims = TableDims { node_count: 3, relation_count: 2, k: 4, d_c: 2, n: 2 };
        let (mut store, table) = kg_table(dims, 11);
        let w2 = store.add("pair_attention", vec![0.2, -0.4, 0.9, 0.15], 1, 4);
        // widened layout: [u-block(2) ; r-block(4) ; v-block(2)]
        let wt = store.add(
            "triple_attention",
            vec![0.2, -0.4, 0.0, 0.0, 0.0, 0.0, 0.9, 0.15],
            1,
            8,
        );
        (store, table, w2, wt)
    }

    #[test]
    fn a1_with_zero_weights_is_uniform() {
        let (mut store, table, w2, _) = kg_with_weights();
        store.values_mut(w2).fill(0.0);
        let att = table.triple_attention_variant(&store, w2, 0, 1, 2, TripleVariant::A1).unwrap();
        assert!(att.alpha.iter().all(|&a| (a - 0.25).abs() < 1e-15));
    }

    #[test]
    fn a2_with_zero_relation_block_reduces_to_a1() {
        let (store, table, w2, wt) = kg_with_weights();
        let a1 = table.triple_attention_variant(&store, w2, 0, 1, 2, TripleVariant::A1).unwrap();
        let a2 = table.triple_attention_variant(&store, wt, 0, 1, 2, TripleVariant::A2).unwrap();
        for (x, y) in a1.alpha.iter().zip(&a2.alpha) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a1.selected, a2.selected);
    }

    #[test]
    fn a2_random_matches_recomputation() {
        let (mut store, table, _, wt) = kg_with_weights();
        let wvals = [0.5, -0.25, 0.75, -0.6, 0.3, 0.1, -0.9, 0.45];
        store.values_mut(wt).copy_from_slice(&wvals);
        let att = table.triple_attention_variant(&store, wt, 0, 1, 2, TripleVariant::A2).unwrap();
        let mut scores = [0.0f64; 4];
        for k in 0..4 {
            let uk = table.node_component(&store, 0, k);
            let rv = table.relation_embedding(&store, 1);
            let vk = table.node_component(&store, 2, k);
            let cat: Vec<f64> =
                uk.iter().chain(rv.iter()).chain(vk.iter()).cloned().collect();
            let s: f64 = cat.iter().zip(&wvals).map(|(x, w)| x * w).sum();
            scores[k] = s.max(0.0);
        }
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for k in 0..4 {
            assert!((att.alpha[k] - scores[k].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn a2_without_relation_embeddings_errors() {
        let (store, table, w2) = pair_setup();
        assert!(table
            .triple_attention_variant(&store, w2, 0, 0, 1, TripleVariant::A2)
            .is_err());
    }

    #[test]
    fn gather_full_selection_equals_node_vector() {
        let (store, table) = kg_table(DIMS_4X2, 5);
        let all: Vec<usize> = (0..4).collect();
        let got = table.gather_top(&store, 1, &all);
        assert_eq!(got, table.node_embedding(&store, 1));
    }

    #[test]
    fn gather_single_argmax_component() {
        let (mut store, table) = kg_table(DIMS_4X2, 5);
        let id = table.relation_logits.unwrap();
        store.values_mut(id)[..4].copy_from_slice(&[0.0, 0.0, 5.0, 0.0]);
        let att = table.relation_attention_kg(&store, 0);
        let sel = top_components(&att.alpha, 1);
        assert_eq!(sel, vec![2]);
        let got = table.gather_top(&store, 0, &sel);
        assert_eq!(got, table.node_component(&store, 0, 2));
    }

    #[test]
    fn gather_layout_is_ascending_index() {
        let (store, table) = kg_table(DIMS_4X2, 5);
        let got = table.gather_top(&store, 2, &[1, 3]);
        let mut want = table.node_component(&store, 2, 1).to_vec();
        want.extend_from_slice(table.node_component(&store, 2, 3));
        assert_eq!(got, want);
    }

    #[test]
    fn tape_attention_matches_inference() {
        let (mut store, table, w2, wt) = kg_with_weights();
        // relation alpha
        {
            let id = table.relation_logits.unwrap();
            store.values_mut(id)[..4].copy_from_slice(&[0.4, -0.2, 0.9, 0.1]);
            let inf = table.relation_attention_kg(&store, 0);
            let mut tape = Tape::new();
            let alpha = table.tape_relation_alpha(&mut tape, &store, 0);
            assert!(tape
                .value(alpha)
                .iter()
                .zip(&inf.alpha)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // pair alpha
        {
            let inf = table.pair_attention_ne(&store, w2, 0, 2);
            let mut tape = Tape::new();
            let alpha = table.tape_pair_alpha(&mut tape, &store, w2, 0, 2);
            assert!(tape
                .value(alpha)
                .iter()
                .zip(&inf.alpha)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // triple alpha (a2)
        {
            let inf =
                table.triple_attention_variant(&store, wt, 0, 1, 2, TripleVariant::A2).unwrap();
            let mut tape = Tape::new();
            let alpha = table.tape_triple_alpha(&mut tape, &store, wt, 0, 1, 2);
            assert!(tape
                .value(alpha)
                .iter()
                .zip(&inf.alpha)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn attention_csv_dump() {
        let (mut store, table) = kg_table(DIMS_4X2, 5);
        let id = table.relation_logits.unwrap();
        store.values_mut(id)[..4].copy_from_slice(&[0.0, 3.0f64.ln(), 0.0, 0.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attention.csv");
        let names = vec!["likes".to_string(), "knows".to_string()];
        write_attention_csv(&path, &table, &store, &names).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "relation,alpha_1,alpha_2,alpha_3,alpha_4");
        let first = lines.next().unwrap();
        assert!(first.starts_with("likes,"));
        let fields: Vec<f64> =
            first.split(',').skip(1).map(|s| s.parse().unwrap()).collect();
        assert!((fields.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((fields[1] - 0.5).abs() < 1e-12);
        assert!(lines.next().unwrap().starts_with("knows,"));
    }

    proptest! {
        #[test]
        fn logit_shift_leaves_attention_unchanged(
            raw in proptest::collection::vec(-64i32..=64, 2..=8),
            shift in -16i32..=16,
            n_seed in 0usize..8,
        ) {
            // dyadic grid keeps the shifted logits exactly representable
            let logits: Vec<f64> = raw.iter().map(|&v| v as f64 / 16.0).collect();
            let shifted: Vec<f64> = logits.iter().map(|&v| v + shift as f64).collect();
            let n = 1 + n_seed % logits.len();
            let a = softmax(&logits);
            let b = softmax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(top_components(&a, n), top_components(&b, n));
        }

        #[test]
        fn selection_attains_the_n_largest(
            alpha in proptest::collection::vec(0.0f64..1.0, 1..=10),
            n_seed in 0usize..10,
        ) {
            let n = 1 + n_seed % alpha.len();
            let sel = top_components(&alpha, n);
            prop_assert_eq!(sel.len(), n);
            // oracle: sort values descending; the selected multiset of
            // values must equal the n largest values
            let mut sorted = alpha.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut picked: Vec<f64> = sel.iter().map(|&i| alpha[i]).collect();
            picked.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for (x, y) in picked.iter().zip(&sorted[..n]) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            // ascending layout and prefix property
            prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
            if n < alpha.len() {
                let bigger = top_components(&alpha, n + 1);
                prop_assert!(sel.iter().all(|i| bigger.contains(i)));
            }
        }
    }
}
