//! Model assembly: configuration, parameter construction and the
//! forward paths shared by training, activation and evaluation.
//!
//! A [`Model`] owns the parameter store plus the handles of whichever
//! parameter groups its configuration needs. All forward helpers take
//! the store explicitly so callers can evaluate against either the live
//! parameters or a frozen snapshot (replay uses part-start attention).

use crate::disentangle::{
    init_bound, uniform_init, AttentionWeights, DisentangledTable, TableDims, TripleVariant,
};
use crate::error::{Error, Result};
use crate::graph::Triple;
use crate::num::{derive_seed, Real};
use crate::scorers::{
    classify_logits, convkb_score, gat_update_component, tape_convkb, tape_gat_component,
    tape_transe, transe_score, ClassifierParams, ConvKBParams, GATParams,
};
use crate::tape::{Norm, ParamId, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    Transe,
    Convkb,
    /// Node-classification mode: component-wise graph attention plus a
    /// linear classifier head.
    Gat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariant {
    /// Per-relation logits (link-prediction default).
    KgLogits,
    /// Pair attention over [u^k ; v^k], relation ignored.
    A1,
    /// Triple attention over [u^k ; r ; v^k].
    A2,
    /// Pair attention in node-classification mode.
    NePair,
}

impl std::str::FromStr for Scorer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transe" => Ok(Scorer::Transe),
            "convkb" => Ok(Scorer::Convkb),
            "gat" => Ok(Scorer::Gat),
            other => Err(Error::Config(format!(
                "unknown scorer {other}; expected transe|convkb|gat"
            ))),
        }
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kg-logits" => Ok(AttentionVariant::KgLogits),
            "a1" => Ok(AttentionVariant::A1),
            "a2" => Ok(AttentionVariant::A2),
            "ne-pair" => Ok(AttentionVariant::NePair),
            other => Err(Error::Config(format!(
                "unknown attention variant {other}; expected kg-logits|a1|a2|ne-pair"
            ))),
        }
    }
}

pub const PAIR_ATTENTION: &str = "pair_attention";
pub const TRIPLE_ATTENTION: &str = "triple_attention";

/// Everything the trainer and pipeline need to know about one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of components per node embedding.
    pub k: usize,
    /// Top components selected per instance.
    pub n: usize,
    /// Total node dimension; K must divide d. In node-classification
    /// mode d is fixed to the feature length.
    pub d: usize,
    pub lr: f64,
    /// Weight of the attention-sharpening loss.
    pub beta: f64,
    pub scorer: Scorer,
    pub attention: AttentionVariant,
    /// Negatives per positive triple.
    pub negatives: usize,
    /// Epochs per stream part.
    pub epochs: usize,
    pub batch_size: usize,
    /// Neighbor activation order (1 or 2).
    pub neighbor_order: u8,
    /// Maximum activated/stored old instances.
    pub memory_budget: usize,
    pub seed: u64,
    /// TransE norm order (1 or 2).
    pub transe_norm: u8,
    /// ConvKB filter count M.
    pub conv_filters: usize,
    /// Validation cadence in epochs (0 = never evaluate mid-part).
    pub eval_every: usize,
    /// Early-stopping patience in evaluations (0 = disabled).
    pub patience: usize,
    /// Reset Adam state at each part boundary instead of persisting.
    pub reset_optimizer: bool,
}

impl Default for ModelConfig {
    /// Defaults follow the best grid point reported for FB15k-237:
    /// K=8, n=4, d=200, lr=1e-4, beta=0.3.
    fn default() -> Self {
        ModelConfig {
            k: 8,
            n: 4,
            d: 200,
            lr: 1e-4,
            beta: 0.3,
            scorer: Scorer::Transe,
            attention: AttentionVariant::KgLogits,
            negatives: 1,
            epochs: 50,
            batch_size: 128,
            neighbor_order: 1,
            memory_budget: 1000,
            seed: 17,
            transe_norm: 1,
            conv_filters: 50,
            eval_every: 5,
            patience: 5,
            reset_optimizer: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.n < 1 || self.n > self.k {
            return Err(Error::Config(format!("need 1 <= n <= K, got K={}, n={}", self.k, self.n)));
        }
        if self.d == 0 || self.d % self.k != 0 {
            return Err(Error::Config(format!("K={} must divide d={}", self.k, self.d)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.transe_norm != 1 && self.transe_norm != 2 {
            return Err(Error::Config(format!("transe norm must be 1 or 2, got {}", self.transe_norm)));
        }
        if self.neighbor_order != 1 && self.neighbor_order != 2 {
            return Err(Error::Config(format!(
                "neighbor order must be 1 or 2, got {}",
                self.neighbor_order
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.negatives == 0 {
            return Err(Error::Config(
                "batch size, epochs and negatives must all be at least 1".into(),
            ));
        }
        match (self.scorer, self.attention) {
            (Scorer::Gat, AttentionVariant::NePair) => Ok(()),
            (Scorer::Gat, _) => Err(Error::Config(
                "the gat scorer requires the ne-pair attention variant".into(),
            )),
            (_, AttentionVariant::NePair) => Err(Error::Config(
                "ne-pair attention requires the gat scorer".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn d_c(&self) -> usize {
        self.d / self.k
    }

    pub fn norm(&self) -> Norm {
        if self.transe_norm == 1 {
            Norm::L1
        } else {
            Norm::L2
        }
    }
}

// Seed-derivation tags for parameter groups and training streams.
pub const TAG_TABLE: u64 = 1;
pub const TAG_CONV: u64 = 2;
pub const TAG_GAT: u64 = 3;
pub const TAG_CLASSIFIER: u64 = 4;
pub const TAG_ATTENTION: u64 = 5;

/// A configured model: parameter store plus typed handles.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub table: DisentangledTable,
    pub conv: Option<ConvKBParams>,
    pub gat: Option<GATParams>,
    pub classifier: Option<ClassifierParams>,
    /// Pair/triple attention weight row (a1, a2 and ne-pair variants).
    pub attention_weights: Option<ParamId>,
    /// Values at construction time; the retrain-from-scratch ceiling
    /// restores these at every part boundary.
    pub init_snapshot: Vec<Vec<T>>,
    pub num_classes: usize,
}

impl<T: Real> Model<T> {
    /// Link-prediction model over `node_count` entities and
    /// `relation_count` relations.
    pub fn new_kg(config: ModelConfig, node_count: usize, relation_count: usize) -> Result<Self> {
        config.validate()?;
        if config.scorer == Scorer::Gat {
            return Err(Error::Config("gat scorer is for node-classification streams".into()));
        }
        let mut store = ParamStore::new();
        let dims = TableDims {
            node_count,
            relation_count,
            k: config.k,
            d_c: config.d_c(),
            n: config.n,
        };
        let table =
            DisentangledTable::init_kg(&mut store, dims, derive_seed(config.seed, &[TAG_TABLE]))?;
        let conv = match config.scorer {
            Scorer::Convkb => Some(ConvKBParams::init(
                &mut store,
                config.conv_filters,
                dims.rel_dim(),
                derive_seed(config.seed, &[TAG_CONV]),
            )),
            _ => None,
        };
        let attention_weights = match config.attention {
            AttentionVariant::KgLogits => None,
            AttentionVariant::A1 => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_ATTENTION]));
                let len = 2 * dims.d_c;
                let w = uniform_init(&mut rng, len, init_bound::<T>(len));
                Some(store.add(PAIR_ATTENTION, w, 1, len))
            }
            AttentionVariant::A2 => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_ATTENTION]));
                let len = 2 * dims.d_c + dims.rel_dim();
                let w = uniform_init(&mut rng, len, init_bound::<T>(len));
                Some(store.add(TRIPLE_ATTENTION, w, 1, len))
            }
            AttentionVariant::NePair => unreachable!("validated above"),
        };
        let init_snapshot = store.snapshot();
        Ok(Model {
            config,
            store,
            table,
            conv,
            gat: None,
            classifier: None,
            attention_weights,
            init_snapshot,
            num_classes: 0,
        })
    }

    /// Node-classification model; `d` is fixed to the feature length
    /// and components start as the K chunks of each feature vector.
    pub fn new_ne(mut config: ModelConfig, features: &[Vec<T>], classes: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Data("node features are empty".into()));
        }
        config.d = features[0].len();
        config.scorer = Scorer::Gat;
        config.attention = AttentionVariant::NePair;
        config.validate()?;
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let mut store = ParamStore::new();
        let table = DisentangledTable::init_ne(&mut store, features, config.k, config.n)?;
        let d_c = table.dims.d_c;
        let gat = Some(GATParams::init(
            &mut store,
            config.k,
            d_c,
            d_c,
            derive_seed(config.seed, &[TAG_GAT]),
        ));
        let classifier = Some(ClassifierParams::init(
            &mut store,
            classes,
            table.dims.d(),
            derive_seed(config.seed, &[TAG_CLASSIFIER]),
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_ATTENTION]));
        let w = uniform_init(&mut rng, 2 * d_c, init_bound::<T>(2 * d_c));
        let attention_weights = Some(store.add(PAIR_ATTENTION, w, 1, 2 * d_c));
        let init_snapshot = store.snapshot();
        Ok(Model {
            config,
            store,
            table,
            conv: None,
            gat,
            classifier,
            attention_weights,
            init_snapshot,
            num_classes: classes,
        })
    }

    pub fn is_link_mode(&self) -> bool {
        self.config.scorer != Scorer::Gat
    }

    /// Component attention of one instance, computed against `store`
    /// (pass a snapshot for frozen part-start attention).
    pub fn instance_attention(
        &self,
        store: &ParamStore<T>,
        t: &Triple,
    ) -> Result<AttentionWeights<T>> {
        match self.config.attention {
            AttentionVariant::KgLogits => Ok(self.table.relation_attention_kg(store, t.relation)),
            AttentionVariant::A1 => self.table.triple_attention_variant(
                store,
                self.attention_weights.expect("a1 weights"),
                t.head,
                t.relation,
                t.tail,
                TripleVariant::A1,
            ),
            AttentionVariant::A2 => self.table.triple_attention_variant(
                store,
                self.attention_weights.expect("a2 weights"),
                t.head,
                t.relation,
                t.tail,
                TripleVariant::A2,
            ),
            AttentionVariant::NePair => Ok(self.table.pair_attention_ne(
                store,
                self.attention_weights.expect("pair weights"),
                t.head,
                t.tail,
            )),
        }
    }

    /// Differentiable attention vector (length K) of one instance.
    pub fn tape_instance_alpha(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        t: &Triple,
    ) -> Var {
        match self.config.attention {
            AttentionVariant::KgLogits => {
                self.table.tape_relation_alpha(tape, store, t.relation)
            }
            AttentionVariant::A1 | AttentionVariant::NePair => self.table.tape_pair_alpha(
                tape,
                store,
                self.attention_weights.expect("pair weights"),
                t.head,
                t.tail,
            ),
            AttentionVariant::A2 => self.table.tape_triple_alpha(
                tape,
                store,
                self.attention_weights.expect("a2 weights"),
                t.head,
                t.relation,
                t.tail,
            ),
        }
    }

    /// Validity score of a triple under current parameters, oriented so
    /// higher = more plausible (TransE distances are negated).
    pub fn validity_score(
        &self,
        store: &ParamStore<T>,
        t: &Triple,
        selected: &[usize],
    ) -> Result<T> {
        let u_hat = self.table.gather_top(store, t.head, selected);
        let r_vec = self.table.relation_embedding(store, t.relation);
        let v_hat = self.table.gather_top(store, t.tail, selected);
        match self.config.scorer {
            Scorer::Transe => Ok(-transe_score(&u_hat, r_vec, &v_hat, self.config.norm())?),
            Scorer::Convkb => {
                convkb_score(store, self.conv.as_ref().expect("conv params"), &u_hat, r_vec, &v_hat)
            }
            Scorer::Gat => Err(Error::Eval("gat scorer does not score triples".into())),
        }
    }

    /// Tape form of [`Model::validity_score`]; parameter slices are read
    /// from `store`, so gradients flow into the live parameters.
    pub fn tape_validity(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        t: &Triple,
        selected: &[usize],
    ) -> Var {
        let u_hat = self.table.tape_gather(tape, store, t.head, selected);
        let r_vec = self.table.tape_relation(tape, store, t.relation);
        let v_hat = self.table.tape_gather(tape, store, t.tail, selected);
        match self.config.scorer {
            Scorer::Transe => {
                let d = tape_transe(tape, u_hat, r_vec, v_hat, self.config.norm());
                tape.neg(d)
            }
            Scorer::Convkb => tape_convkb(
                tape,
                store,
                self.conv.as_ref().expect("conv params"),
                u_hat,
                r_vec,
                v_hat,
            ),
            Scorer::Gat => unreachable!("gat scorer does not score triples"),
        }
    }

    /// Per-component gated neighbor lists for node `u`: component k
    /// keeps neighbor v iff k is in the top-n of the pair attention of
    /// (u, v) computed against `att_store`; u itself (self-loop) is
    /// always present in every list. Lists are sorted.
    pub fn gated_neighbors(
        &self,
        att_store: &ParamStore<T>,
        u: u32,
        neighbors: &[u32],
    ) -> Vec<Vec<u32>> {
        let w2 = self.attention_weights.expect("pair weights");
        let mut per_k: Vec<Vec<u32>> = vec![Vec::new(); self.config.k];
        for list in per_k.iter_mut() {
            list.push(u);
        }
        for &v in neighbors {
            if v == u {
                continue;
            }
            let att = self.table.pair_attention_ne(att_store, w2, u, v);
            for &k in &att.selected {
                per_k[k].push(v);
            }
        }
        for list in per_k.iter_mut() {
            list.sort_unstable();
            list.dedup();
        }
        per_k
    }

    /// Class logits for a node from its GAT-updated components.
    /// `gated` comes from [`Model::gated_neighbors`] for that node.
    pub fn node_logits(&self, store: &ParamStore<T>, gated: &[Vec<u32>]) -> Result<Vec<T>> {
        let gat = self.gat.as_ref().expect("gat params");
        let cls = self.classifier.as_ref().expect("classifier params");
        let mut updated = Vec::with_capacity(self.table.dims.d());
        for (k, neigh) in gated.iter().enumerate() {
            updated.extend(gat_update_component(store, &self.table, gat, k, neigh)?);
        }
        let w5 = store.values(cls.weights);
        let mut logits = vec![T::zero(); cls.classes];
        for (c, slot) in logits.iter_mut().enumerate() {
            let mut acc = T::zero();
            for j in 0..cls.d {
                acc += w5[c * cls.d + j] * updated[j];
            }
            *slot = acc;
        }
        Ok(logits)
    }

    /// Raw-table classifier logits (no GAT update); used for sanity
    /// checks only.
    pub fn raw_logits(&self, store: &ParamStore<T>, u: u32) -> Result<Vec<T>> {
        classify_logits(store, &self.table, self.classifier.as_ref().expect("classifier"), u)
    }

    /// Tape form of [`Model::node_logits`].
    pub fn tape_node_logits(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        gated: &[Vec<u32>],
    ) -> Result<Var> {
        let gat = self.gat.as_ref().expect("gat params");
        let cls = self.classifier.as_ref().expect("classifier params");
        let comps: Vec<Var> = gated
            .iter()
            .enumerate()
            .map(|(k, neigh)| tape_gat_component(tape, store, &self.table, gat, k, neigh))
            .collect::<Result<_>>()?;
        let updated = tape.concat(&comps);
        let w5 = tape.param(store, cls.weights);
        Ok(tape.matvec(w5, updated, cls.classes, cls.d))
    }

    /// Restores the construction-time parameter values (the retraining
    /// ceiling's part-boundary reset).
    pub fn restore_init(&mut self) {
        let snap = self.init_snapshot.clone();
        self.store.restore(&snap);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_kg_config() -> ModelConfig {
        ModelConfig {
            k: 4,
            n: 2,
            d: 8,
            conv_filters: 3,
            batch_size: 4,
            epochs: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut c = small_kg_config();
        c.d = 10; // not divisible by 4
        assert!(c.validate().is_err());
        let mut c = small_kg_config();
        c.n = 9;
        assert!(c.validate().is_err());
        let mut c = small_kg_config();
        c.beta = -0.1;
        assert!(c.validate().is_err());
        let mut c = small_kg_config();
        c.scorer = Scorer::Gat;
        assert!(c.validate().is_err()); // gat needs ne-pair attention
        let mut c = small_kg_config();
        c.attention = AttentionVariant::NePair;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kg_model_has_expected_parameters() {
        let model = Model::<f64>::new_kg(small_kg_config(), 6, 3).unwrap();
        assert_eq!(model.store.values(model.table.node_components).len(), 6 * 8);
        assert_eq!(
            model.store.values(model.table.relation_embeddings.unwrap()).len(),
            3 * 2 * 2
        );
        assert!(model.conv.is_none());
        assert!(model.attention_weights.is_none());
        let mut c = small_kg_config();
        c.scorer = Scorer::Convkb;
        c.attention = AttentionVariant::A2;
        let model = Model::<f64>::new_kg(c, 6, 3).unwrap();
        assert!(model.conv.is_some());
        // widened row: 2*d_c + n*d_c = 4 + 4
        assert_eq!(model.store.values(model.attention_weights.unwrap()).len(), 8);
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a = Model::<f64>::new_kg(small_kg_config(), 5, 2).unwrap();
        let b = Model::<f64>::new_kg(small_kg_config(), 5, 2).unwrap();
        for (x, y) in a.store.snapshot().iter().zip(b.store.snapshot().iter()) {
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn validity_score_orientation() {
        // TransE: a perfectly translated triple scores 0, anything else negative
        let mut model = Model::<f64>::new_kg(small_kg_config(), 4, 1).unwrap();
        let t = Triple::new(0, 0, 1);
        let att = model.instance_attention(&model.store, &t).unwrap();
        let u_hat = model.table.gather_top(&model.store, 0, &att.selected);
        let r = model.table.relation_embedding(&model.store, 0).to_vec();
        // force v̂ = û + r on the selected components
        for (i, &k) in att.selected.iter().enumerate() {
            let d_c = model.table.dims.d_c;
            let off = (1usize * 4 + k) * d_c;
            for j in 0..d_c {
                model.store.values_mut(model.table.node_components)[off + j] =
                    u_hat[i * d_c + j] + r[i * d_c + j];
            }
        }
        let s = model.validity_score(&model.store, &t, &att.selected).unwrap();
        assert_eq!(s, 0.0);
        let other = model
            .validity_score(&model.store, &Triple::new(0, 0, 2), &att.selected)
            .unwrap();
        assert!(other < 0.0);
    }

    #[test]
    fn tape_validity_matches_inference() {
        for (scorer, attention) in [
            (Scorer::Transe, AttentionVariant::KgLogits),
            (Scorer::Convkb, AttentionVariant::KgLogits),
            (Scorer::Transe, AttentionVariant::A1),
            (Scorer::Convkb, AttentionVariant::A2),
        ] {
            let mut c = small_kg_config();
            c.scorer = scorer;
            c.attention = attention;
            let model = Model::<f64>::new_kg(c, 5, 2).unwrap();
            let t = Triple::new(1, 1, 3);
            let att = model.instance_attention(&model.store, &t).unwrap();
            let inf = model.validity_score(&model.store, &t, &att.selected).unwrap();
            let mut tape = Tape::new();
            let v = model.tape_validity(&mut tape, &model.store, &t, &att.selected);
            assert_eq!(tape.scalar_value(v).to_bits(), inf.to_bits());
        }
    }

    fn ne_fixture() -> Model<f64> {
        let mut features = Vec::new();
        let mut rng_state = 1u64;
        for _ in 0..6 {
            let f: Vec<f64> = (0..8)
                .map(|_| {
                    rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
                    ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
                })
                .collect();
            features.push(f);
        }
        let config = ModelConfig {
            k: 4,
            n: 2,
            scorer: Scorer::Gat,
            attention: AttentionVariant::NePair,
            ..ModelConfig::default()
        };
        Model::new_ne(config, &features, 3).unwrap()
    }

    #[test]
    fn ne_model_components_come_from_features() {
        let model = ne_fixture();
        assert_eq!(model.config.d, 8);
        assert_eq!(model.table.dims.d_c, 2);
        assert!(model.gat.is_some());
        assert!(model.classifier.is_some());
    }

    #[test]
    fn gated_neighbors_always_include_self() {
        let model = ne_fixture();
        let gated = model.gated_neighbors(&model.store, 2, &[0, 1, 4]);
        assert_eq!(gated.len(), 4);
        for list in &gated {
            assert!(list.contains(&2));
            assert!(list.windows(2).all(|w| w[0] < w[1]));
        }
        // every non-self neighbor appears in exactly n = 2 component lists
        for v in [0u32, 1, 4] {
            let appearances: usize = gated.iter().filter(|l| l.contains(&v)).count();
            assert_eq!(appearances, 2);
        }
    }

    #[test]
    fn ne_tape_logits_match_inference() {
        let model = ne_fixture();
        let gated = model.gated_neighbors(&model.store, 1, &[0, 3, 5]);
        let inf = model.node_logits(&model.store, &gated).unwrap();
        let mut tape = Tape::new();
        let v = model.tape_node_logits(&mut tape, &model.store, &gated).unwrap();
        assert!(tape.value(v).iter().zip(&inf).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn restore_init_rewinds_parameters() {
        let mut model = Model::<f64>::new_kg(small_kg_config(), 5, 2).unwrap();
        let before = model.store.snapshot();
        model.store.values_mut(model.table.node_components)[0] += 1.0;
        model.restore_init();
        let after = model.store.snapshot();
        for (x, y) in before.iter().zip(&after) {
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
