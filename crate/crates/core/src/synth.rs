//! Deterministic synthetic benchmarks.
//!
//! `two_cluster_stream` builds a 2-part stream of translation-regular
//! relation clusters sharing bridge entities: part 1 training pulls the
//! bridge embeddings away from part 0's solution, so the gap between
//! plain fine-tuning and replay strategies is measurable in seconds.
//!
//! `fb15k237_like` emits a desk-scale stand-in for a real triple
//! dump: skewed entity/relation frequencies and mostly-translational
//! relation semantics with a noise floor. `criterion_kg` prefers a real
//! dataset named by `CGRL_FB15K237` when that variable is set.

use crate::data::{read_triple_file, RawKg};
use crate::error::{Error, Result};
use crate::graph::{GraphPart, StreamDataset, StreamMode, Triple};
use crate::num::{derive_seed, Real};
use crate::pipeline::largest_remainder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

const CLUSTER: u32 = 30;
const BRIDGE: u32 = 10;
// Line shifts; (30-5)+(30-10)+(30-15) = 60 triples per cluster, and a
// translation scorer fits a line exactly (r_s = s * direction).
const SHIFTS: [u32; 3] = [5, 10, 15];

fn cluster_triples(order: &[u32], relation_base: u32) -> Vec<Triple> {
    let mut out = Vec::with_capacity(60);
    for (ri, s) in SHIFTS.into_iter().enumerate() {
        for p in 0..(CLUSTER - s) as usize {
            out.push(Triple::new(
                order[p],
                relation_base + ri as u32,
                order[p + s as usize],
            ));
        }
    }
    out
}

fn split_part<T: Real>(index: usize, mut triples: Vec<Triple>, seed: u64) -> GraphPart {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, &[crate::trainer::TAG_SPLIT, index as u64]));
    triples.shuffle(&mut rng);
    let sizes = largest_remainder(triples.len(), &[0.8, 0.1, 0.1]);
    let query = triples.split_off(sizes[0] + sizes[1]);
    let validation = triples.split_off(sizes[0]);
    let _ = T::zero();
    GraphPart { index, train: triples, validation, query, ..Default::default() }
}

/// Two 60-triple relation clusters over 50 entities, 10 of them shared.
/// Part 0 holds relations 0..3 over entities 0..30 laid out as a line;
/// part 1 holds relations 3..6 over entities 20..50 as a line in a
/// seeded order. The shared bridge entities sit at incompatible line
/// positions in the two clusters, so fine-tuning on part 1 drags them
/// off part 0's solution while each cluster alone is exactly fittable.
pub fn two_cluster_stream<T: Real>(seed: u64) -> StreamDataset<T> {
    let order_a: Vec<u32> = (0..CLUSTER).collect();
    let mut order_b: Vec<u32> = (CLUSTER - BRIDGE..2 * CLUSTER - BRIDGE).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[crate::trainer::TAG_SPLIT, 2]));
    order_b.shuffle(&mut rng);
    let part0 = cluster_triples(&order_a, 0);
    let part1 = cluster_triples(&order_b, SHIFTS.len() as u32);
    let node_count = (2 * CLUSTER - BRIDGE) as usize;
    let relation_count = 2 * SHIFTS.len();
    StreamDataset {
        mode: StreamMode::LinkPrediction,
        parts: vec![
            split_part::<T>(0, part0, seed),
            split_part::<T>(1, part1, seed),
        ],
        node_count,
        relation_count,
        node_names: (0..node_count).map(|i| format!("e{i}")).collect(),
        relation_names: (0..relation_count).map(|r| format!("r{r}")).collect(),
        node_features: None,
        node_labels: None,
        num_classes: 0,
    }
}

/// Skewed synthetic triple dump: `entities` entities, `relations`
/// mostly-translational relations, 15% uniform noise, duplicate-free.
/// Regular tails are `h + delta_r` without wraparound, so each relation
/// is an exact translation along the entity line.
pub fn fb15k237_like(seed: u64, count: usize, entities: u32, relations: u32) -> RawKg {
    assert!(entities >= 3 && relations >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deltas: Vec<u32> =
        (0..relations).map(|_| rng.gen_range(1..entities / 2)).collect();
    let mut seen = HashSet::with_capacity(count);
    let mut triples = Vec::with_capacity(count);
    let mut guard = 0usize;
    while triples.len() < count {
        guard += 1;
        assert!(
            guard < count * 200,
            "triple space too small for the requested count"
        );
        // squared uniforms skew head and relation frequencies
        let hu: f64 = rng.gen();
        let ru: f64 = rng.gen();
        let h = ((hu * hu) * entities as f64) as u32;
        let r = ((ru * ru) * relations as f64) as u32;
        let t = if rng.gen_bool(0.15) {
            rng.gen_range(0..entities)
        } else {
            h + deltas[r as usize]
        };
        if h == t || t >= entities {
            continue;
        }
        let cand = Triple::new(h, r, t);
        if seen.insert(cand) {
            triples.push(cand);
        }
    }
    compact_ids(triples)
}

/// Re-interns triples so node and relation ids are dense in
/// first-appearance order, as the ingestion path guarantees.
fn compact_ids(triples: Vec<Triple>) -> RawKg {
    let mut node_map = std::collections::HashMap::new();
    let mut relation_map = std::collections::HashMap::new();
    let mut node_names = Vec::new();
    let mut relation_names = Vec::new();
    let mut out = Vec::with_capacity(triples.len());
    for t in triples {
        let node = |id: u32, names: &mut Vec<String>,
                    map: &mut std::collections::HashMap<u32, u32>| {
            *map.entry(id).or_insert_with(|| {
                names.push(format!("e{id}"));
                names.len() as u32 - 1
            })
        };
        let head = node(t.head, &mut node_names, &mut node_map);
        let tail = node(t.tail, &mut node_names, &mut node_map);
        let relation = *relation_map.entry(t.relation).or_insert_with(|| {
            relation_names.push(format!("r{}", t.relation));
            relation_names.len() as u32 - 1
        });
        out.push(Triple::new(head, relation, tail));
    }
    RawKg { triples: out, node_names, relation_names }
}

/// The criterion-scale triple dataset: a deterministic subsample of the
/// file named by `CGRL_FB15K237` when present, otherwise the synthetic
/// stand-in.
pub fn criterion_kg(seed: u64, count: usize) -> Result<RawKg> {
    if let Ok(path) = std::env::var("CGRL_FB15K237") {
        let raw = read_triple_file(std::path::Path::new(&path))?;
        if raw.triples.len() < count {
            return Err(Error::Data(format!(
                "{path} has only {} triples, need {count}",
                raw.triples.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut triples = raw.triples;
        triples.shuffle(&mut rng);
        triples.truncate(count);
        // keep the original names through the re-interning
        let compact = compact_ids(triples.clone());
        let mut named = compact;
        let mut node_seen = std::collections::HashMap::new();
        let mut relation_seen = std::collections::HashMap::new();
        let mut node_names = Vec::new();
        let mut relation_names = Vec::new();
        for t in &triples {
            for id in [t.head, t.tail] {
                node_seen.entry(id).or_insert_with(|| {
                    node_names.push(raw.node_names[id as usize].clone());
                });
            }
            relation_seen.entry(t.relation).or_insert_with(|| {
                relation_names.push(raw.relation_names[t.relation as usize].clone());
            });
        }
        named.node_names = node_names;
        named.relation_names = relation_names;
        Ok(named)
    } else {
        Ok(fb15k237_like(seed, count, 300, 30))
    }
}
