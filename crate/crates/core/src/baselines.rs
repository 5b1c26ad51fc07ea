//! Reference continual-learning strategies: diagonal-Fisher weight
//! consolidation, reservoir episodic memory, and averaged-gradient
//! projection. Lower and upper bounds are runner modes of the shared
//! training loop (empty replay / retrain-from-init on the union), not
//! separate trainers.

use crate::error::{Error, Result};
use crate::graph::{AdjacencyIndex, LabeledNode, Triple};
use crate::model::Model;
use crate::num::{derive_seed, Real};
use crate::tape::{ParamStore, Tape};
use crate::trainer::{tape_link_loss, tape_node_loss, TAG_MEMORY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Diagonal Fisher estimate with the anchor snapshot it regularizes
/// toward. Vectors align with the parameter store's id order.
#[derive(Debug, Clone)]
pub struct FisherDiagonal<T: Real> {
    pub fisher: Vec<Vec<T>>,
    pub anchor: Vec<Vec<T>>,
}

/// Per-sample loss used for Fisher estimation: the positive-instance
/// term of the training objective (soft-margin for links, scaled
/// cross-entropy for labeled nodes). No negative sampling, so the
/// estimate is deterministic given the sample.
fn sample_gradient<T: Real>(
    model: &mut Model<T>,
    triple: Option<&Triple>,
    node: Option<&LabeledNode>,
    adjacency: Option<&AdjacencyIndex>,
) -> Result<()> {
    let mut tape = Tape::new();
    let att_store = model.store.clone();
    let loss = match (triple, node) {
        (Some(t), None) => {
            tape_link_loss(&mut tape, model, &att_store, std::slice::from_ref(t), &[vec![]])?
        }
        (None, Some(n)) => {
            let adjacency = adjacency
                .ok_or_else(|| Error::Config("Fisher over nodes needs an adjacency index".into()))?;
            tape_node_loss(&mut tape, model, &att_store, std::slice::from_ref(n), adjacency)?
        }
        _ => unreachable!("exactly one sample kind"),
    };
    tape.backward(loss, &mut model.store)
}

/// Mean of squared per-parameter gradients over the sample, with the
/// current parameters stored as the anchor.
pub fn estimate_fisher<T: Real>(
    model: &mut Model<T>,
    triples: &[Triple],
    nodes: &[LabeledNode],
    adjacency: Option<&AdjacencyIndex>,
) -> Result<FisherDiagonal<T>> {
    let link_mode = model.is_link_mode();
    let count = if link_mode { triples.len() } else { nodes.len() };
    if count == 0 {
        return Err(Error::Data("Fisher estimation needs a non-empty sample".into()));
    }
    let ids: Vec<_> = model.store.ids().collect();
    let mut fisher: Vec<Vec<T>> =
        ids.iter().map(|&id| vec![T::zero(); model.store.values(id).len()]).collect();
    for i in 0..count {
        model.store.zero_grads();
        if link_mode {
            sample_gradient(model, Some(&triples[i]), None, adjacency)?;
        } else {
            sample_gradient(model, None, Some(&nodes[i]), adjacency)?;
        }
        for (slot, &id) in fisher.iter_mut().zip(&ids) {
            for (f, &g) in slot.iter_mut().zip(model.store.grad(id)) {
                *f += g * g;
            }
        }
    }
    model.store.zero_grads();
    let scale = T::one() / T::from_f64_c(count as f64);
    for slot in &mut fisher {
        for f in slot.iter_mut() {
            *f *= scale;
        }
    }
    Ok(FisherDiagonal { fisher, anchor: model.store.snapshot() })
}

/// (λ/2) · Σ_i F_i (θ_i − θ*_i)².
pub fn ewc_penalty<T: Real>(store: &ParamStore<T>, fisher: &FisherDiagonal<T>, lambda: T) -> T {
    let mut total = T::zero();
    for (slot, (f_row, a_row)) in
        store.ids().zip(fisher.fisher.iter().zip(&fisher.anchor))
    {
        for ((&theta, &f), &anchor) in store.values(slot).iter().zip(f_row).zip(a_row) {
            let diff = theta - anchor;
            total += f * diff * diff;
        }
    }
    lambda / (T::one() + T::one()) * total
}

/// Adds the penalty gradient λ·F·(θ − θ*) into the store's gradients
/// and returns the penalty value.
pub fn ewc_accumulate_grad<T: Real>(
    store: &mut ParamStore<T>,
    fisher: &FisherDiagonal<T>,
    lambda: T,
) -> T {
    let value = ewc_penalty(store, fisher, lambda);
    let ids: Vec<_> = store.ids().collect();
    for (&slot, (f_row, a_row)) in
        ids.iter().zip(fisher.fisher.iter().zip(&fisher.anchor))
    {
        let theta: Vec<T> = store.values(slot).to_vec();
        let grad = store.grad_mut(slot);
        for (i, g) in grad.iter_mut().enumerate() {
            *g += lambda * f_row[i] * (theta[i] - a_row[i]);
        }
    }
    value
}

/// One Fisher anchor per finished part; penalties are summed.
#[derive(Debug, Clone, Default)]
pub struct EwcState<T: Real> {
    pub anchors: Vec<FisherDiagonal<T>>,
}

impl<T: Real> EwcState<T> {
    pub fn push(&mut self, fisher: FisherDiagonal<T>) {
        self.anchors.push(fisher);
    }

    pub fn accumulate_grad(&self, store: &mut ParamStore<T>, lambda: T) -> T {
        let mut total = T::zero();
        for anchor in &self.anchors {
            total += ewc_accumulate_grad(store, anchor, lambda);
        }
        total
    }
}

/// Fixed-capacity uniform sample over every instance observed from
/// finished parts (reservoir across parts: the persistent counter makes
/// earlier and later parts equally likely to stay).
#[derive(Debug, Clone)]
pub struct EpisodicMemory {
    capacity: usize,
    pub triples: Vec<Triple>,
    pub nodes: Vec<LabeledNode>,
    seen: usize,
}

impl EpisodicMemory {
    pub fn new(capacity: usize) -> Self {
        EpisodicMemory { capacity, triples: Vec::new(), nodes: Vec::new(), seen: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.triples.len() + self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feeds one finished part's train instances through the reservoir.
    pub fn observe_part_triples(&mut self, part: usize, seed: u64, instances: &[Triple]) {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_MEMORY, part as u64]));
        reservoir_extend(&mut self.triples, &mut self.seen, self.capacity, instances, &mut rng);
    }

    pub fn observe_part_nodes(&mut self, part: usize, seed: u64, instances: &[LabeledNode]) {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_MEMORY, part as u64]));
        reservoir_extend(&mut self.nodes, &mut self.seen, self.capacity, instances, &mut rng);
    }
}

fn reservoir_extend<X: Copy>(
    kept: &mut Vec<X>,
    seen: &mut usize,
    capacity: usize,
    items: &[X],
    rng: &mut ChaCha8Rng,
) {
    if capacity == 0 {
        *seen += items.len();
        return;
    }
    for &item in items {
        *seen += 1;
        if kept.len() < capacity {
            kept.push(item);
        } else {
            let j = rng.gen_range(0..*seen);
            if j < capacity {
                kept[j] = item;
            }
        }
    }
}

/// Projects the new-data gradient away from interference with the
/// memory gradient: returns g_new when ⟨g_new, g_ref⟩ ≥ 0, otherwise
/// g_new − (⟨g_new,g_ref⟩ / ⟨g_ref,g_ref⟩)·g_ref.
pub fn agem_project<T: Real>(g_new: &[Vec<T>], g_ref: &[Vec<T>]) -> Vec<Vec<T>> {
    debug_assert_eq!(g_new.len(), g_ref.len());
    let mut dot = T::zero();
    let mut ref_sq = T::zero();
    for (a, b) in g_new.iter().zip(g_ref) {
        debug_assert_eq!(a.len(), b.len());
        for (&x, &y) in a.iter().zip(b) {
            dot += x * y;
            ref_sq += y * y;
        }
    }
    if dot >= T::zero() {
        return g_new.to_vec();
    }
    if ref_sq == T::zero() {
        log::warn!("reference gradient is zero; keeping the new gradient unchanged");
        return g_new.to_vec();
    }
    let coef = dot / ref_sq;
    g_new
        .iter()
        .zip(g_ref)
        .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x - coef * y).collect())
        .collect()
}

/// Copies the store's current gradients, id order.
pub fn grad_snapshot<T: Real>(store: &ParamStore<T>) -> Vec<Vec<T>> {
    store.ids().map(|id| store.grad(id).to_vec()).collect()
}

/// Overwrites the store's gradients, id order.
pub fn set_grads<T: Real>(store: &mut ParamStore<T>, grads: &[Vec<T>]) {
    let ids: Vec<_> = store.ids().collect();
    for (&id, g) in ids.iter().zip(grads) {
        store.grad_mut(id).copy_from_slice(g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::optim::Adam;
    use crate::trainer::{train_part, PartContext, TrainHooks};
    use std::collections::HashSet;

    fn tiny_model() -> Model<f64> {
        let config = ModelConfig {
            k: 4,
            n: 2,
            d: 8,
            lr: 0.01,
            epochs: 1,
            batch_size: 4,
            eval_every: 0,
            ..ModelConfig::default()
        };
        Model::new_kg(config, 8, 2).unwrap()
    }

    #[test]
    fn fisher_zero_gradients_give_zero() {
        let mut model = tiny_model();
        let nc = model.table.node_components;
        model.store.values_mut(nc).fill(0.0);
        let re = model.table.relation_embeddings.unwrap();
        model.store.values_mut(re).fill(0.0);
        // distance 0 under the L1 norm has zero subgradient everywhere
        let fisher =
            estimate_fisher(&mut model, &[Triple::new(0, 0, 1)], &[], None).unwrap();
        for row in &fisher.fisher {
            assert!(row.iter().all(|&f| f == 0.0));
        }
    }

    #[test]
    fn fisher_single_sample_is_squared_gradient() {
        let mut model = tiny_model();
        let t = Triple::new(0, 1, 2);
        let fisher = estimate_fisher(&mut model, &[t], &[], None).unwrap();
        // recompute the gradient of the positive term directly
        model.store.zero_grads();
        let mut tape = Tape::new();
        let att = model.store.clone();
        let loss = tape_link_loss(&mut tape, &model, &att, &[t], &[vec![]]).unwrap();
        tape.backward(loss, &mut model.store).unwrap();
        let ids: Vec<_> = model.store.ids().collect();
        for (row, &id) in fisher.fisher.iter().zip(&ids) {
            for (&f, &g) in row.iter().zip(model.store.grad(id)) {
                assert!((f - g * g).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fisher_mean_matches_independent_accumulation() {
        let mut model = tiny_model();
        let sample: Vec<Triple> =
            (0..10).map(|i| Triple::new(i % 8, i % 2, (i * 3 + 1) % 8)).collect();
        let fisher = estimate_fisher(&mut model, &sample, &[], None).unwrap();
        let ids: Vec<_> = model.store.ids().collect();
        let mut want: Vec<Vec<f64>> =
            ids.iter().map(|&id| vec![0.0; model.store.values(id).len()]).collect();
        for t in &sample {
            model.store.zero_grads();
            let mut tape = Tape::new();
            let att = model.store.clone();
            let loss = tape_link_loss(&mut tape, &model, &att, &[*t], &[vec![]]).unwrap();
            tape.backward(loss, &mut model.store).unwrap();
            for (slot, &id) in want.iter_mut().zip(&ids) {
                for (w, &g) in slot.iter_mut().zip(model.store.grad(id)) {
                    *w += g * g / 10.0;
                }
            }
        }
        for (row, wrow) in fisher.fisher.iter().zip(&want) {
            for (&f, &w) in row.iter().zip(wrow) {
                assert!((f - w).abs() < 1e-12);
            }
        }
        assert!(fisher.fisher.iter().flatten().any(|&f| f > 0.0));
    }

    #[test]
    fn fisher_rejects_empty_sample() {
        let mut model = tiny_model();
        assert!(estimate_fisher(&mut model, &[], &[], None).is_err());
    }

    fn scalar_store(theta: f64) -> (ParamStore<f64>, FisherDiagonal<f64>) {
        let mut store = ParamStore::new();
        store.add("theta", vec![theta], 1, 1);
        let fisher = FisherDiagonal { fisher: vec![vec![1.0]], anchor: vec![vec![0.0]] };
        (store, fisher)
    }

    #[test]
    fn penalty_zero_at_anchor() {
        let mut model = tiny_model();
        let fisher = estimate_fisher(
            &mut model,
            &[Triple::new(0, 0, 1), Triple::new(2, 1, 3)],
            &[],
            None,
        )
        .unwrap();
        assert_eq!(ewc_penalty(&model.store, &fisher, 100.0), 0.0);
    }

    #[test]
    fn penalty_unit_fisher_offset_two() {
        let (store, fisher) = scalar_store(2.0);
        assert!((ewc_penalty(&store, &fisher, 1.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn penalty_matches_recomputation_and_gradient() {
        let mut model = tiny_model();
        let mut fisher = estimate_fisher(
            &mut model,
            &[Triple::new(0, 0, 1), Triple::new(2, 1, 3), Triple::new(4, 0, 5)],
            &[],
            None,
        )
        .unwrap();
        // perturb anchor so differences are non-zero, randomize fisher
        for (i, row) in fisher.anchor.iter_mut().enumerate() {
            for (j, a) in row.iter_mut().enumerate() {
                *a += 0.01 * ((i * 31 + j * 7) as f64 * 0.61).sin();
            }
        }
        for row in fisher.fisher.iter_mut() {
            for (j, f) in row.iter_mut().enumerate() {
                *f += 0.1 + (j % 3) as f64 * 0.05;
            }
        }
        let lambda = 100.0;
        let mut want = 0.0;
        let ids: Vec<_> = model.store.ids().collect();
        for ((&id, frow), arow) in ids.iter().zip(&fisher.fisher).zip(&fisher.anchor) {
            for ((&theta, &f), &a) in model.store.values(id).iter().zip(frow).zip(arow) {
                want += 0.5 * lambda * f * (theta - a) * (theta - a);
            }
        }
        let got = ewc_penalty(&model.store, &fisher, lambda);
        assert!((got - want).abs() < 1e-9 * want.max(1.0));

        model.store.zero_grads();
        let value = ewc_accumulate_grad(&mut model.store, &fisher, lambda);
        assert!((value - want).abs() < 1e-9 * want.max(1.0));
        for ((&id, frow), arow) in ids.iter().zip(&fisher.fisher).zip(&fisher.anchor) {
            let theta: Vec<f64> = model.store.values(id).to_vec();
            for ((&g, (&f, &a)), &th) in
                model.store.grad(id).iter().zip(frow.iter().zip(arow)).zip(&theta)
            {
                assert!((g - lambda * f * (th - a)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn memory_respects_capacity_and_distinctness() {
        let old: Vec<Triple> =
            (0..100).map(|i| Triple::new(i, 0, (i + 1) % 100)).collect();
        let mut memory = EpisodicMemory::new(5);
        memory.observe_part_triples(0, 17, &old);
        assert_eq!(memory.triples.len(), 5);
        let distinct: HashSet<Triple> = memory.triples.iter().copied().collect();
        assert_eq!(distinct.len(), 5);
        for t in &memory.triples {
            assert!(old.contains(t));
        }
    }

    #[test]
    fn memory_is_deterministic_and_spans_parts() {
        let part0: Vec<Triple> = (0..50).map(|i| Triple::new(i, 0, i + 1)).collect();
        let part1: Vec<Triple> = (0..50).map(|i| Triple::new(i, 1, i + 2)).collect();
        let build = || {
            let mut m = EpisodicMemory::new(20);
            m.observe_part_triples(0, 17, &part0);
            m.observe_part_triples(1, 17, &part1);
            m
        };
        let a = build();
        let b = build();
        assert_eq!(a.triples, b.triples);
        assert!(a.triples.iter().any(|t| t.relation == 0));
        assert!(a.triples.iter().any(|t| t.relation == 1));
        assert_eq!(a.triples.len(), 20);
    }

    #[test]
    fn empty_memory_matches_plain_fine_tuning() {
        let triples: Vec<Triple> =
            (0..12).map(|i| Triple::new(i % 8, i % 2, (i * 3 + 1) % 8)).collect();
        let known: HashSet<Triple> = triples.iter().copied().collect();
        let pool: Vec<u32> = (0..8).collect();
        let memory = EpisodicMemory::new(10); // populated never
        let run = |replay: &[Triple]| {
            let mut model = tiny_model();
            let mut opt = Adam::new(&model.store, model.config.lr);
            let ctx = PartContext {
                part: 0,
                new_triples: &triples,
                new_nodes: &[],
                replay_triples: replay,
                replay_nodes: &[],
                masks: None,
                frozen: None,
                known: &known,
                pool: &pool,
                adjacency: None,
            };
            train_part(&mut model, &mut opt, &ctx, &mut TrainHooks::none()).unwrap();
            model.store.snapshot()
        };
        let lower = run(&[]);
        let emr = run(&memory.triples);
        for (a, b) in lower.iter().zip(&emr) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn projection_identity_and_cancellation() {
        let g = vec![vec![1.0, -2.0], vec![0.5]];
        let same = agem_project(&g, &g);
        assert_eq!(same, g);

        let neg: Vec<Vec<f64>> =
            g.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
        let projected = agem_project(&g, &neg);
        for row in &projected {
            for &x in row {
                assert!(x.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_orthogonalizes_conflicting_gradients() {
        for seed in 0..50u64 {
            let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
            let mut next = || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state as f64 / u64::MAX as f64) * 2.0 - 1.0
            };
            let g_new: Vec<Vec<f64>> = vec![(0..6).map(|_| next()).collect()];
            let mut g_ref: Vec<Vec<f64>> = vec![(0..6).map(|_| next()).collect()];
            let dot: f64 =
                g_new[0].iter().zip(&g_ref[0]).map(|(a, b)| a * b).sum();
            if dot > 0.0 {
                for x in g_ref[0].iter_mut() {
                    *x = -*x;
                }
            }
            let out = agem_project(&g_new, &g_ref);
            let out_dot: f64 =
                out[0].iter().zip(&g_ref[0]).map(|(a, b)| a * b).sum();
            assert!(out_dot.abs() < 1e-9, "seed {seed}: residual dot {out_dot}");
            assert!(out_dot >= -1e-9);
        }
    }

    #[test]
    fn projection_handles_zero_reference() {
        let g = vec![vec![1.0, 2.0]];
        let zero = vec![vec![0.0, 0.0]];
        assert_eq!(agem_project(&g, &zero), g);
    }

    #[test]
    fn grad_snapshot_roundtrip() {
        let mut model = tiny_model();
        model.store.zero_grads();
        let mut tape = Tape::new();
        let att = model.store.clone();
        let loss =
            tape_link_loss(&mut tape, &model, &att, &[Triple::new(0, 1, 2)], &[vec![]])
                .unwrap();
        tape.backward(loss, &mut model.store).unwrap();
        let snap = grad_snapshot(&model.store);
        model.store.zero_grads();
        set_grads(&mut model.store, &snap);
        let again = grad_snapshot(&model.store);
        assert_eq!(snap, again);
        assert!(snap.iter().flatten().any(|&g| g != 0.0));
    }

    #[test]
    fn ewc_state_sums_anchor_penalties() {
        let (store, f1) = scalar_store(2.0);
        let f2 = FisherDiagonal { fisher: vec![vec![2.0]], anchor: vec![vec![1.0]] };
        let mut state = EwcState::default();
        state.push(f1);
        state.push(f2);
        let mut store = store;
        store.zero_grads();
        let total = state.accumulate_grad(&mut store, 1.0);
        // (1/2)(1)(2-0)^2 + (1/2)(2)(2-1)^2 = 2 + 1
        assert!((total - 3.0).abs() < 1e-12);
        let ids: Vec<_> = store.ids().collect();
        // gradient: 1*(2-0) + 2*(2-1) = 4
        assert!((store.grad(ids[0])[0] - 4.0).abs() < 1e-12);
    }
}
