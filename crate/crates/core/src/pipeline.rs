//! Streaming-split generation, experiment orchestration and report
//! consolidation.
//!
//! A run directory contains: `report.json` (per-part metrics with
//! wall-clock), `metrics.json` (the same rows without timing, byte
//! stable across identical runs), `metrics.csv`, `runtime.csv`,
//! `train_log.jsonl`, `checkpoints/part_<i>.json`, `experiment.json`,
//! `attention.csv` for link-prediction runs, and per-part activation
//! audits for the selective-replay strategy. Aborted runs leave a
//! `PARTIAL` marker explaining the failure.

use crate::baselines::{
    agem_project, estimate_fisher, grad_snapshot, set_grads, EpisodicMemory, EwcState,
};
use crate::continual::{activate_neighbors, build_masks, write_activation_audit};
use crate::data::{load_stream, RawCitation, RawKg};
use crate::disentangle::write_attention_csv;
use crate::error::{Error, Result};
use crate::eval::{evaluate_upto, link_metrics, node_accuracy, rank_queries, MetricsRow};
use crate::graph::{
    build_adjacency, GraphPart, LabeledNode, StreamDataset, StreamMode, Triple,
};
use crate::model::{Model, ModelConfig, Scorer};
use crate::num::{derive_seed, Real};
use crate::optim::Adam;
use crate::tape::ParamStore;
use crate::trainer::{
    sample_negatives, tape_link_loss, tape_node_loss, train_part, EpochLog, PartContext,
    TrainHooks, TAG_AGEM, TAG_FISHER, TAG_SPLIT,
};
use crate::tape::Tape;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

/// How a dataset is cut into a stream of parts and sub-splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of instances per part; entries in (0,1], sum 1.
    pub part_ratios: Vec<f64>,
    /// Within-part train/validation/query fractions, sum 1.
    pub within: [f64; 3],
    pub seed: u64,
    pub mode: StreamMode,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.part_ratios.is_empty() {
            return Err(Error::Config("need at least one part ratio".into()));
        }
        let check = |ratios: &[f64], what: &str| -> Result<()> {
            for &r in ratios {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(Error::Config(format!("{what} ratio {r} outside (0,1]")));
                }
            }
            let sum: f64 = ratios.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{what} ratios sum to {sum}, expected 1")));
            }
            Ok(())
        };
        check(&self.part_ratios, "part")?;
        check(&self.within, "within-part")
    }
}

/// Largest-remainder apportionment: sizes sum to `total` and each
/// differs from `ratio * total` by less than 1. Remainder ties go to
/// the smaller index.
pub fn largest_remainder(total: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - sizes[a] as f64;
        let rb = exact[b] - sizes[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut leftover = total - assigned;
    let mut i = 0;
    while leftover > 0 {
        sizes[order[i % order.len()]] += 1;
        leftover -= 1;
        i += 1;
    }
    sizes
}

fn split_slices(len: usize, ratios: &[f64]) -> Vec<std::ops::Range<usize>> {
    let sizes = largest_remainder(len, ratios);
    let mut out = Vec::with_capacity(sizes.len());
    let mut lo = 0;
    for s in sizes {
        out.push(lo..lo + s);
        lo += s;
    }
    out
}

/// Splits a triple dataset into a link-prediction stream: a seeded
/// shuffle, part ratios over triples, then within-part ratios.
pub fn split_stream_kg<T: Real>(raw: &RawKg, spec: &SplitSpec) -> Result<StreamDataset<T>> {
    spec.validate()?;
    if spec.mode != StreamMode::LinkPrediction {
        return Err(Error::Config("triple input requires link-prediction mode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[TAG_SPLIT]));
    let mut shuffled = raw.triples.clone();
    shuffled.shuffle(&mut rng);
    let mut parts = Vec::new();
    for (index, range) in split_slices(shuffled.len(), &spec.part_ratios).into_iter().enumerate() {
        let chunk = &shuffled[range];
        let within = split_slices(chunk.len(), &spec.within);
        let mut part = GraphPart::empty(index);
        part.train = chunk[within[0].clone()].to_vec();
        part.validation = chunk[within[1].clone()].to_vec();
        part.query = chunk[within[2].clone()].to_vec();
        parts.push(part);
    }
    Ok(StreamDataset {
        mode: StreamMode::LinkPrediction,
        parts,
        node_count: raw.node_names.len(),
        relation_count: raw.relation_names.len(),
        node_names: raw.node_names.clone(),
        relation_names: raw.relation_names.clone(),
        node_features: None,
        node_labels: None,
        num_classes: 0,
    })
}

/// Splits a citation graph into a node-classification stream: nodes
/// are partitioned by part ratios; an edge enters the part of its
/// later-arriving endpoint, so every part's cumulative graph contains
/// both endpoints of its edges.
pub fn split_stream_ne<T: Real>(
    raw: &RawCitation<T>,
    spec: &SplitSpec,
) -> Result<StreamDataset<T>> {
    spec.validate()?;
    if spec.mode != StreamMode::NodeClassification {
        return Err(Error::Config("citation input requires node-classification mode".into()));
    }
    let n = raw.node_names.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[TAG_SPLIT]));
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut rng);
    let part_ranges = split_slices(n, &spec.part_ratios);
    let mut arrival = vec![0usize; n];
    let mut parts = Vec::new();
    for (index, range) in part_ranges.iter().enumerate() {
        let chunk = &order[range.clone()];
        for &u in chunk {
            arrival[u as usize] = index;
        }
        let within = split_slices(chunk.len(), &spec.within);
        let labeled = |ids: &[u32]| -> Vec<LabeledNode> {
            ids.iter()
                .map(|&u| LabeledNode { node: u, label: raw.labels[u as usize] })
                .collect()
        };
        let mut part = GraphPart::empty(index);
        part.train_nodes = labeled(&chunk[within[0].clone()]);
        part.validation_nodes = labeled(&chunk[within[1].clone()]);
        part.query_nodes = labeled(&chunk[within[2].clone()]);
        parts.push(part);
    }
    for &edge in &raw.edges {
        let part = arrival[edge.head as usize].max(arrival[edge.tail as usize]);
        parts[part].train.push(edge);
    }
    let num_classes = raw.label_names.len();
    for part in &parts {
        let present: HashSet<u32> = part.train_nodes.iter().map(|ln| ln.label).collect();
        if present.len() < num_classes {
            log::warn!(
                "part {} trains on {} of {} classes",
                part.index,
                present.len(),
                num_classes
            );
        }
    }
    Ok(StreamDataset {
        mode: StreamMode::NodeClassification,
        parts,
        node_count: n,
        relation_count: 1,
        node_names: raw.node_names.clone(),
        relation_names: vec!["cites".to_string()],
        node_features: Some(raw.features.clone()),
        node_labels: Some(raw.labels.clone()),
        num_classes,
    })
}

/// Continual-learning strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Dicgrl,
    Lower,
    Upper,
    Ewc,
    Emr,
    Agem,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Dicgrl,
        Strategy::Lower,
        Strategy::Upper,
        Strategy::Ewc,
        Strategy::Emr,
        Strategy::Agem,
    ];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Strategy::Dicgrl => "dicgrl",
            Strategy::Lower => "lower",
            Strategy::Upper => "upper",
            Strategy::Ewc => "ewc",
            Strategy::Emr => "emr",
            Strategy::Agem => "agem",
        };
        f.write_str(name)
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dicgrl" => Ok(Strategy::Dicgrl),
            "lower" => Ok(Strategy::Lower),
            "upper" => Ok(Strategy::Upper),
            "ewc" => Ok(Strategy::Ewc),
            "emr" => Ok(Strategy::Emr),
            "agem" => Ok(Strategy::Agem),
            other => Err(Error::Config(format!(
                "unknown strategy {other}; expected dicgrl|lower|upper|ewc|emr|agem"
            ))),
        }
    }
}

/// One experiment: a stream directory, a strategy, and model settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub strategy: Strategy,
    pub config: ModelConfig,
    /// Consolidation strength for the ewc strategy.
    pub lambda: f64,
}

pub const DEFAULT_LAMBDA: f64 = 100.0;

/// A metrics row plus the part's wall-clock (train + eval) seconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(flatten)]
    pub metrics: MetricsRow,
    pub runtime_s: f64,
}

/// Per-part timing and replay-volume accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub part: usize,
    pub strategy: String,
    pub train_s: f64,
    pub eval_s: f64,
    pub new_instances: usize,
    pub replayed_instances: usize,
}

fn union_train_triples(parts: &[GraphPart], upto: usize) -> Vec<Triple> {
    parts[..=upto].iter().flat_map(|p| p.train.iter().copied()).collect()
}

fn union_train_nodes(parts: &[GraphPart], upto: usize) -> Vec<LabeledNode> {
    parts[..=upto].iter().flat_map(|p| p.train_nodes.iter().copied()).collect()
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(Error::Io)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn csv_record<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    record: &[String],
) -> Result<()> {
    w.write_record(record).map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn write_metrics_csv(path: &Path, strategy: Strategy, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    csv_record(
        &mut w,
        &[
            "strategy", "part", "mrr_whole", "mrr_avg", "hits10_whole", "hits10_avg",
            "accuracy_whole", "accuracy_avg", "n_queries", "runtime_s",
        ]
        .map(String::from),
    )?;
    for r in rows {
        let m = &r.metrics;
        csv_record(
            &mut w,
            &[
                strategy.to_string(),
                m.part.to_string(),
                m.mrr_whole.to_string(),
                m.mrr_avg.to_string(),
                m.hits10_whole.to_string(),
                m.hits10_avg.to_string(),
                m.accuracy_whole.to_string(),
                m.accuracy_avg.to_string(),
                m.n_queries.to_string(),
                r.runtime_s.to_string(),
            ],
        )?;
    }
    w.flush().map_err(Error::Io)
}

fn write_runtime_csv(path: &Path, rows: &[RuntimeRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    csv_record(
        &mut w,
        &["part", "strategy", "train_s", "eval_s", "new_instances", "replayed_instances"]
            .map(String::from),
    )?;
    for r in rows {
        csv_record(
            &mut w,
            &[
                r.part.to_string(),
                r.strategy.clone(),
                r.train_s.to_string(),
                r.eval_s.to_string(),
                r.new_instances.to_string(),
                r.replayed_instances.to_string(),
            ],
        )?;
    }
    w.flush().map_err(Error::Io)
}

/// Runs one experiment end to end, writing the run directory described
/// in the module docs. Any failure leaves a `PARTIAL` marker beside
/// whatever output was already written.
pub fn run_experiment<T: Real>(spec: &ExperimentSpec) -> Result<Vec<ReportRow>> {
    fs::create_dir_all(&spec.output).map_err(Error::Io)?;
    match run_experiment_inner::<T>(spec) {
        Ok(rows) => Ok(rows),
        Err(e) => {
            let _ = fs::write(spec.output.join("PARTIAL"), format!("aborted: {e}\n"));
            Err(e)
        }
    }
}

fn run_experiment_inner<T: Real>(spec: &ExperimentSpec) -> Result<Vec<ReportRow>> {
    spec.config.validate()?;
    let dataset: StreamDataset<T> = load_stream(&spec.dataset)?;
    let link_mode = dataset.mode == StreamMode::LinkPrediction;
    if link_mode && spec.config.scorer == Scorer::Gat {
        return Err(Error::Config(
            "the gat scorer needs node features; use transe or convkb for triple streams".into(),
        ));
    }
    if !link_mode && spec.config.scorer != Scorer::Gat {
        return Err(Error::Config(
            "node-classification streams train with the gat scorer".into(),
        ));
    }

    let mut model: Model<T> = if link_mode {
        Model::new_kg(spec.config.clone(), dataset.node_count, dataset.relation_count)?
    } else {
        let features = dataset
            .node_features
            .as_ref()
            .ok_or_else(|| Error::Data("stream lacks node features".into()))?;
        Model::new_ne(spec.config.clone(), features, dataset.num_classes)?
    };
    let mut optimizer = Adam::new(&model.store, T::from_f64_c(model.config.lr));
    let seed = model.config.seed;
    let budget = model.config.memory_budget;
    let lambda = T::from_f64_c(spec.lambda);

    let checkpoints = spec.output.join("checkpoints");
    fs::create_dir_all(&checkpoints).map_err(Error::Io)?;
    let mut train_log = String::new();
    let mut report_rows: Vec<ReportRow> = Vec::new();
    let mut runtime_rows: Vec<RuntimeRow> = Vec::new();
    let mut ewc_state: EwcState<T> = EwcState::default();
    let mut memory = EpisodicMemory::new(budget);

    for i in 0..dataset.parts.len() {
        let part = &dataset.parts[i];
        let train_started = Instant::now();
        let known = dataset.known_triples(i);
        let pool = dataset.seen_entities(i);
        let adjacency = if link_mode { None } else { Some(build_adjacency(&dataset.parts, i)?) };

        if spec.strategy == Strategy::Upper {
            model.restore_init();
            optimizer.reset();
        } else if model.config.reset_optimizer {
            optimizer.reset();
        }

        // Replay inputs and strategy state for this part.
        let mut replay_triples: Vec<Triple> = Vec::new();
        let mut replay_nodes: Vec<LabeledNode> = Vec::new();
        let mut masks = None;
        let mut frozen: Option<ParamStore<T>> = None;
        let mut activated_count = 0usize;
        let upper_union_t;
        let upper_union_n;
        let (new_triples, new_nodes): (&[Triple], &[LabeledNode]) = match spec.strategy {
            Strategy::Upper => {
                upper_union_t = union_train_triples(&dataset.parts, i);
                upper_union_n = union_train_nodes(&dataset.parts, i);
                (&upper_union_t, &upper_union_n)
            }
            _ => (&part.train, &part.train_nodes),
        };

        match spec.strategy {
            Strategy::Dicgrl if i > 0 => {
                let snapshot = model.store.clone();
                let old_index = build_adjacency(&dataset.parts, i - 1)?;
                let records =
                    activate_neighbors(&model, &snapshot, &part.train, &old_index, budget)?;
                activated_count = records.len();
                masks = Some(build_masks(&records, model.config.k));
                if !records.is_empty() {
                    write_activation_audit(
                        &spec.output.join(format!("activation_audit_part_{i}.csv")),
                        &records,
                    )?;
                }
                if link_mode {
                    replay_triples = records.iter().map(|r| r.old).collect();
                } else {
                    let labels: BTreeMap<u32, u32> = dataset.parts[..i]
                        .iter()
                        .flat_map(|p| p.train_nodes.iter().map(|ln| (ln.node, ln.label)))
                        .collect();
                    let mut nodes = std::collections::BTreeSet::new();
                    for r in &records {
                        nodes.insert(r.old.head);
                        nodes.insert(r.old.tail);
                    }
                    replay_nodes = nodes
                        .into_iter()
                        .filter_map(|u| labels.get(&u).map(|&label| LabeledNode { node: u, label }))
                        .collect();
                }
                frozen = Some(snapshot);
            }
            Strategy::Emr if !memory.is_empty() => {
                replay_triples = memory.triples.clone();
                replay_nodes = memory.nodes.clone();
            }
            _ => {}
        }

        // Gradient hooks: quadratic consolidation or memory projection.
        let mem_triples = memory.triples.clone();
        let mem_nodes = memory.nodes.clone();
        let mut agem_calls = 0u64;
        let negatives = model.config.negatives;
        let part_u = i as u64;
        let known_ref = &known;
        let pool_ref = &pool;
        let adjacency_ref = adjacency.as_ref();
        let mut ewc_hook;
        let mut agem_hook;
        let mut hooks: TrainHooks<'_, T> = TrainHooks::none();
        match spec.strategy {
            Strategy::Ewc => {
                let state = &ewc_state;
                ewc_hook = move |m: &mut Model<T>| -> Result<T> {
                    Ok(state.accumulate_grad(&mut m.store, lambda))
                };
                hooks.new_grad_hook = Some(&mut ewc_hook);
            }
            Strategy::Agem if !(mem_triples.is_empty() && mem_nodes.is_empty()) => {
                agem_hook = move |m: &mut Model<T>| -> Result<T> {
                    agem_calls += 1;
                    let g_new = grad_snapshot(&m.store);
                    m.store.zero_grads();
                    let rng_seed = derive_seed(seed, &[TAG_AGEM, part_u, agem_calls]);
                    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                    let take = m.config.batch_size;
                    let mut tape = Tape::new();
                    let att = m.store.clone();
                    let loss = if m.is_link_mode() {
                        let batch: Vec<Triple> = (0..take.min(mem_triples.len()))
                            .map(|_| mem_triples[rng.gen_range(0..mem_triples.len())])
                            .collect();
                        let negs = sample_negatives(
                            &batch,
                            known_ref,
                            pool_ref,
                            negatives,
                            derive_seed(seed, &[TAG_AGEM, part_u, agem_calls, 1]),
                        );
                        tape_link_loss(&mut tape, m, &att, &batch, &negs)?
                    } else {
                        let batch: Vec<LabeledNode> = (0..take.min(mem_nodes.len()))
                            .map(|_| mem_nodes[rng.gen_range(0..mem_nodes.len())])
                            .collect();
                        tape_node_loss(&mut tape, m, &att, &batch, adjacency_ref.unwrap())?
                    };
                    tape.backward(loss, &mut m.store)?;
                    let g_ref = grad_snapshot(&m.store);
                    let projected = agem_project(&g_new, &g_ref);
                    set_grads(&mut m.store, &projected);
                    Ok(T::zero())
                };
                hooks.new_grad_hook = Some(&mut agem_hook);
            }
            _ => {}
        }

        // Early stopping against the part's validation split.
        let mut eval_hook;
        if model.config.eval_every > 0 && model.config.patience > 0 {
            let has_validation = if link_mode {
                !part.validation.is_empty()
            } else {
                !part.validation_nodes.is_empty()
            };
            if has_validation {
                let dataset_ref = &dataset;
                eval_hook = move |m: &Model<T>| -> Result<f64> {
                    let vpart = &dataset_ref.parts[i];
                    if m.is_link_mode() {
                        let candidates = dataset_ref.seen_entities(i);
                        let filter = dataset_ref.known_triples(i);
                        let (results, _) =
                            rank_queries(m, &vpart.validation, &candidates, &filter, 1);
                        if results.is_empty() {
                            return Ok(0.0);
                        }
                        Ok(link_metrics(&results)?.0)
                    } else {
                        let adj = build_adjacency(&dataset_ref.parts, i)?;
                        node_accuracy(m, &vpart.validation_nodes, &adj)
                    }
                };
                hooks.eval_hook = Some(&mut eval_hook);
            }
        }

        let ctx = PartContext {
            part: i,
            new_triples: if link_mode { new_triples } else { &part.train },
            new_nodes: new_nodes,
            replay_triples: &replay_triples,
            replay_nodes: &replay_nodes,
            masks: masks.as_ref(),
            frozen: frozen.as_ref(),
            known: &known,
            pool: &pool,
            adjacency: adjacency.as_ref(),
        };
        let logs: Vec<EpochLog> = train_part(&mut model, &mut optimizer, &ctx, &mut hooks)?;
        drop(hooks);
        for log in &logs {
            let line = serde_json::to_string(log)
                .map_err(|e| Error::Data(format!("log serialization failed: {e}")))?;
            train_log.push_str(&line);
            train_log.push('\n');
        }

        // Strategy bookkeeping for future parts.
        match spec.strategy {
            Strategy::Ewc => {
                let fisher_seed = derive_seed(seed, &[TAG_FISHER, part_u]);
                let mut rng = ChaCha8Rng::seed_from_u64(fisher_seed);
                if link_mode {
                    let mut sample = part.train.clone();
                    sample.shuffle(&mut rng);
                    sample.truncate(1024.min(sample.len()));
                    ewc_state.push(estimate_fisher(&mut model, &sample, &[], None)?);
                } else {
                    let mut sample = part.train_nodes.clone();
                    sample.shuffle(&mut rng);
                    sample.truncate(1024.min(sample.len()));
                    ewc_state.push(estimate_fisher(
                        &mut model,
                        &[],
                        &sample,
                        adjacency.as_ref(),
                    )?);
                }
            }
            Strategy::Emr | Strategy::Agem => {
                if link_mode {
                    memory.observe_part_triples(i, seed, &part.train);
                } else {
                    memory.observe_part_nodes(i, seed, &part.train_nodes);
                }
            }
            _ => {}
        }
        let train_s = train_started.elapsed().as_secs_f64();

        let eval_started = Instant::now();
        let metrics = evaluate_upto(&model, &dataset, i)?;
        let eval_s = eval_started.elapsed().as_secs_f64();

        let replayed_instances = match spec.strategy {
            Strategy::Dicgrl => activated_count,
            Strategy::Emr | Strategy::Agem => replay_triples.len() + replay_nodes.len(),
            Strategy::Upper => {
                if i == 0 {
                    0
                } else if link_mode {
                    union_train_triples(&dataset.parts, i - 1).len()
                } else {
                    union_train_nodes(&dataset.parts, i - 1).len()
                }
            }
            Strategy::Lower | Strategy::Ewc => 0,
        };
        let new_instances =
            if link_mode { part.train.len() } else { part.train_nodes.len() };
        runtime_rows.push(RuntimeRow {
            part: i,
            strategy: spec.strategy.to_string(),
            train_s,
            eval_s,
            new_instances,
            replayed_instances,
        });
        report_rows.push(ReportRow { metrics, runtime_s: train_s + eval_s });
        model.store.save_checkpoint(&checkpoints.join(format!("part_{i}.json")))?;
    }

    fs::write(spec.output.join("train_log.jsonl"), &train_log).map_err(Error::Io)?;
    write_json(&spec.output.join("report.json"), &report_rows)?;
    let metrics_only: Vec<&MetricsRow> = report_rows.iter().map(|r| &r.metrics).collect();
    write_json(&spec.output.join("metrics.json"), &metrics_only)?;
    write_metrics_csv(&spec.output.join("metrics.csv"), spec.strategy, &report_rows)?;
    write_runtime_csv(&spec.output.join("runtime.csv"), &runtime_rows)?;
    write_json(&spec.output.join("experiment.json"), spec)?;
    if link_mode {
        write_attention_csv(
            &spec.output.join("attention.csv"),
            &model.table,
            &model.store,
            &dataset.relation_names,
        )?;
    }
    Ok(report_rows)
}

/// Consolidates the run directories under `dir` (one per strategy)
/// into `summary.csv`, `runtime_summary.csv` and per-strategy copies
/// of the relation-attention table, sorted by strategy name.
pub fn emit_report(dir: &Path) -> Result<()> {
    let mut runs: Vec<(String, PathBuf)> = Vec::new();
    let entries =
        fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot list {}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(Error::Io)?;
        let path = entry.path();
        if path.is_dir() && path.join("report.json").exists() {
            let strategy = match fs::read_to_string(path.join("experiment.json")) {
                Ok(text) => serde_json::from_str::<ExperimentSpec>(&text)
                    .map(|s| s.strategy.to_string())
                    .unwrap_or_else(|_| entry.file_name().to_string_lossy().into_owned()),
                Err(_) => entry.file_name().to_string_lossy().into_owned(),
            };
            runs.push((strategy, path));
        }
    }
    if runs.is_empty() {
        return Err(Error::Data(format!(
            "{} contains no completed run directories",
            dir.display()
        )));
    }
    runs.sort();

    let mut summary = csv_writer(&dir.join("summary.csv"))?;
    csv_record(
        &mut summary,
        &[
            "strategy", "part", "mrr_whole", "mrr_avg", "hits10_whole", "hits10_avg",
            "accuracy_whole", "accuracy_avg", "n_queries", "runtime_s",
        ]
        .map(String::from),
    )?;
    let mut runtime_out = String::from(
        "part,strategy,train_s,eval_s,new_instances,replayed_instances\n",
    );
    for (strategy, path) in &runs {
        let text = fs::read_to_string(path.join("report.json")).map_err(Error::Io)?;
        let rows: Vec<ReportRow> = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("bad report in {}: {e}", path.display())))?;
        for r in &rows {
            let m = &r.metrics;
            csv_record(
                &mut summary,
                &[
                    strategy.clone(),
                    m.part.to_string(),
                    m.mrr_whole.to_string(),
                    m.mrr_avg.to_string(),
                    m.hits10_whole.to_string(),
                    m.hits10_avg.to_string(),
                    m.accuracy_whole.to_string(),
                    m.accuracy_avg.to_string(),
                    m.n_queries.to_string(),
                    r.runtime_s.to_string(),
                ],
            )?;
        }
        let runtime_text = fs::read_to_string(path.join("runtime.csv")).map_err(|e| {
            Error::Data(format!("missing runtime table in {}: {e}", path.display()))
        })?;
        for line in runtime_text.lines().skip(1) {
            runtime_out.push_str(line);
            runtime_out.push('\n');
        }
        let attention = path.join("attention.csv");
        if attention.exists() {
            fs::copy(&attention, dir.join(format!("attention_{strategy}.csv")))
                .map_err(Error::Io)?;
        }
    }
    summary.flush().map_err(Error::Io)?;
    fs::write(dir.join("runtime_summary.csv"), runtime_out).map_err(Error::Io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionVariant;
    use tempfile::tempdir;

    fn raw_kg(n: usize) -> RawKg {
        let entities = 20u32;
        let mut triples = Vec::new();
        let mut i = 0u32;
        'outer: for r in 0..4u32 {
            for h in 0..entities {
                for t in 0..entities {
                    if h == t {
                        continue;
                    }
                    i += 1;
                    if i % 7 != 0 {
                        continue;
                    }
                    triples.push(Triple::new(h, r, t));
                    if triples.len() == n {
                        break 'outer;
                    }
                }
            }
        }
        assert_eq!(triples.len(), n);
        RawKg {
            triples,
            node_names: (0..entities).map(|i| format!("e{i}")).collect(),
            relation_names: (0..4).map(|i| format!("r{i}")).collect(),
        }
    }

    #[test]
    fn apportionment_matches_closed_forms() {
        assert_eq!(
            largest_remainder(100, &[0.8, 0.05, 0.05, 0.05, 0.05]),
            [80, 5, 5, 5, 5]
        );
        assert_eq!(largest_remainder(80, &[0.8, 0.1, 0.1]), [64, 8, 8]);
        assert_eq!(largest_remainder(7, &[0.5, 0.5]), [4, 3]); // tie -> smaller index
        for total in [1usize, 13, 97, 1000] {
            let ratios = [0.37, 0.22, 0.41];
            let sizes = largest_remainder(total, &ratios);
            assert_eq!(sizes.iter().sum::<usize>(), total);
            for (s, r) in sizes.iter().zip(&ratios) {
                assert!((*s as f64 - r * total as f64).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn kg_split_sizes_and_conservation() {
        let raw = raw_kg(100);
        let spec = SplitSpec {
            part_ratios: vec![0.8, 0.05, 0.05, 0.05, 0.05],
            within: [0.8, 0.1, 0.1],
            seed: 17,
            mode: StreamMode::LinkPrediction,
        };
        let stream: StreamDataset<f64> = split_stream_kg(&raw, &spec).unwrap();
        let sizes: Vec<usize> = stream
            .parts
            .iter()
            .map(|p| p.train.len() + p.validation.len() + p.query.len())
            .collect();
        assert_eq!(sizes, [80, 5, 5, 5, 5]);
        assert_eq!(stream.parts[0].train.len(), 64);
        assert_eq!(stream.parts[0].validation.len(), 8);
        assert_eq!(stream.parts[0].query.len(), 8);

        // conservation: every input triple appears exactly once
        let mut all: Vec<Triple> = stream
            .parts
            .iter()
            .flat_map(|p| p.all_triples().copied())
            .collect();
        all.sort_unstable();
        let mut want = raw.triples.clone();
        want.sort_unstable();
        assert_eq!(all, want);
    }

    #[test]
    fn kg_split_is_deterministic_and_single_part_degenerates() {
        let raw = raw_kg(60);
        let spec = SplitSpec {
            part_ratios: vec![1.0],
            within: [0.8, 0.1, 0.1],
            seed: 5,
            mode: StreamMode::LinkPrediction,
        };
        let a: StreamDataset<f64> = split_stream_kg(&raw, &spec).unwrap();
        let b: StreamDataset<f64> = split_stream_kg(&raw, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.parts.len(), 1);
        assert_eq!(a.parts[0].train.len(), 48);
    }

    #[test]
    fn split_spec_validation() {
        let mut spec = SplitSpec {
            part_ratios: vec![0.5, 0.5],
            within: [0.8, 0.1, 0.1],
            seed: 0,
            mode: StreamMode::LinkPrediction,
        };
        assert!(spec.validate().is_ok());
        spec.part_ratios = vec![0.5, 0.4];
        assert!(spec.validate().is_err());
        spec.part_ratios = vec![1.5, -0.5];
        assert!(spec.validate().is_err());
        spec.part_ratios = vec![];
        assert!(spec.validate().is_err());
        spec.part_ratios = vec![1.0];
        spec.within = [0.9, 0.05, 0.06];
        assert!(spec.validate().is_err());
    }

    fn raw_citation(n: usize) -> RawCitation<f64> {
        let features: Vec<Vec<f64>> = (0..n)
            .map(|u| (0..8).map(|j| ((u * 8 + j) as f64 * 0.31).sin()).collect())
            .collect();
        let labels: Vec<u32> = (0..n as u32).map(|u| u % 3).collect();
        let mut edges = Vec::new();
        for u in 0..n as u32 {
            edges.push(Triple::new(u, 0, (u + 1) % n as u32));
            if u % 3 == 0 {
                edges.push(Triple::new(u, 0, (u + 5) % n as u32));
            }
        }
        RawCitation {
            edges,
            features,
            labels,
            node_names: (0..n).map(|u| format!("p{u}")).collect(),
            label_names: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    #[test]
    fn ne_split_assigns_edges_to_later_endpoint() {
        let raw = raw_citation(30);
        let spec = SplitSpec {
            part_ratios: vec![0.5, 0.3, 0.2],
            within: [0.7, 0.1, 0.2],
            seed: 11,
            mode: StreamMode::NodeClassification,
        };
        let stream = split_stream_ne(&raw, &spec).unwrap();
        assert_eq!(stream.parts.len(), 3);

        // node conservation across parts and sub-splits
        let mut all_nodes: Vec<u32> = stream
            .parts
            .iter()
            .flat_map(|p| {
                p.train_nodes
                    .iter()
                    .chain(&p.validation_nodes)
                    .chain(&p.query_nodes)
                    .map(|ln| ln.node)
            })
            .collect();
        all_nodes.sort_unstable();
        assert_eq!(all_nodes, (0..30).collect::<Vec<_>>());

        // edge conservation and the later-endpoint rule
        let mut arrival = vec![0usize; 30];
        for (idx, p) in stream.parts.iter().enumerate() {
            for ln in p.train_nodes.iter().chain(&p.validation_nodes).chain(&p.query_nodes) {
                arrival[ln.node as usize] = idx;
            }
        }
        let mut total_edges = 0;
        for (idx, p) in stream.parts.iter().enumerate() {
            for e in &p.train {
                assert_eq!(
                    arrival[e.head as usize].max(arrival[e.tail as usize]),
                    idx,
                    "edge {e:?} in wrong part"
                );
                total_edges += 1;
            }
        }
        assert_eq!(total_edges, raw.edges.len());

        // labels survive the split
        for p in &stream.parts {
            for ln in &p.query_nodes {
                assert_eq!(ln.label, raw.labels[ln.node as usize]);
            }
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            k: 4,
            n: 2,
            d: 8,
            lr: 0.01,
            beta: 0.3,
            epochs: 2,
            batch_size: 16,
            memory_budget: 20,
            eval_every: 0,
            ..ModelConfig::default()
        }
    }

    fn make_stream_dir(dir: &Path, parts: usize) -> PathBuf {
        let raw = raw_kg(120);
        let ratios = match parts {
            1 => vec![1.0],
            2 => vec![0.6, 0.4],
            _ => vec![0.6, 0.2, 0.2],
        };
        let spec = SplitSpec {
            part_ratios: ratios,
            within: [0.8, 0.1, 0.1],
            seed: 3,
            mode: StreamMode::LinkPrediction,
        };
        let stream: StreamDataset<f64> = split_stream_kg(&raw, &spec).unwrap();
        let path = dir.join(format!("stream{parts}"));
        crate::data::save_stream(&path, &stream).unwrap();
        path
    }

    fn run(dir: &Path, dataset: &Path, strategy: Strategy, name: &str) -> Vec<ReportRow> {
        let spec = ExperimentSpec {
            dataset: dataset.to_path_buf(),
            output: dir.join(name),
            strategy,
            config: small_config(),
            lambda: DEFAULT_LAMBDA,
        };
        run_experiment::<f64>(&spec).unwrap()
    }

    #[test]
    fn run_directory_is_complete() {
        let dir = tempdir().unwrap();
        let dataset = make_stream_dir(dir.path(), 2);
        let rows = run(dir.path(), &dataset, Strategy::Dicgrl, "dicgrl");
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].metrics.part, 0);
        assert_eq!(rows[1].metrics.part, 1);
        let out = dir.path().join("dicgrl");
        for file in [
            "report.json",
            "metrics.json",
            "metrics.csv",
            "runtime.csv",
            "train_log.jsonl",
            "experiment.json",
            "attention.csv",
        ] {
            assert!(out.join(file).exists(), "missing {file}");
        }
        assert!(out.join("checkpoints/part_0.json").exists());
        assert!(out.join("checkpoints/part_1.json").exists());
        assert!(!out.join("PARTIAL").exists());
        // two epochs per part
        let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 4);
    }

    #[test]
    fn single_part_lower_equals_upper() {
        let dir = tempdir().unwrap();
        let dataset = make_stream_dir(dir.path(), 1);
        let lower = run(dir.path(), &dataset, Strategy::Lower, "lower");
        let upper = run(dir.path(), &dataset, Strategy::Upper, "upper");
        let a = fs::read_to_string(dir.path().join("lower/metrics.json")).unwrap();
        let b = fs::read_to_string(dir.path().join("upper/metrics.json")).unwrap();
        assert_eq!(a, b);
        assert_eq!(lower[0].metrics, upper[0].metrics);
    }

    #[test]
    fn zero_budget_dicgrl_equals_lower() {
        let dir = tempdir().unwrap();
        let dataset = make_stream_dir(dir.path(), 2);
        let mut config = small_config();
        config.memory_budget = 0;
        for (strategy, name) in [(Strategy::Dicgrl, "d0"), (Strategy::Lower, "l0")] {
            let spec = ExperimentSpec {
                dataset: dataset.clone(),
                output: dir.path().join(name),
                strategy,
                config: config.clone(),
                lambda: DEFAULT_LAMBDA,
            };
            run_experiment::<f64>(&spec).unwrap();
        }
        let a = fs::read_to_string(dir.path().join("d0/metrics.json")).unwrap();
        let b = fs::read_to_string(dir.path().join("l0/metrics.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_specs_reproduce_metrics_bytes() {
        let dir = tempdir().unwrap();
        let dataset = make_stream_dir(dir.path(), 2);
        run(dir.path(), &dataset, Strategy::Emr, "emr_a");
        run(dir.path(), &dataset, Strategy::Emr, "emr_b");
        let a = fs::read_to_string(dir.path().join("emr_a/metrics.json")).unwrap();
        let b = fs::read_to_string(dir.path().join("emr_b/metrics.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_strategies_complete_on_a_small_stream() {
        let dir = tempdir().unwrap();
        let dataset = make_stream_dir(dir.path(), 2);
        for strategy in Strategy::ALL {
            let rows = run(dir.path(), &dataset, strategy, &strategy.to_string());
            assert_eq!(rows.len(), 2, "{strategy}");
        }
        emit_report(dir.path()).unwrap();
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        // header + strategies x parts
        assert_eq!(summary.lines().count(), 1 + 6 * 2);
        let strategies: Vec<&str> = summary
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        let mut sorted = strategies.clone();
        sorted.sort();
        assert_eq!(strategies, sorted, "summary rows sorted by strategy");
        assert!(dir.path().join("runtime_summary.csv").exists());
        assert!(dir.path().join("attention_dicgrl.csv").exists());
    }

    #[test]
    fn ne_experiment_runs_end_to_end() {
        let dir = tempdir().unwrap();
        let raw = raw_citation(40);
        let spec = SplitSpec {
            part_ratios: vec![0.6, 0.4],
            within: [0.7, 0.1, 0.2],
            seed: 9,
            mode: StreamMode::NodeClassification,
        };
        let stream = split_stream_ne(&raw, &spec).unwrap();
        let dataset = dir.path().join("ne_stream");
        crate::data::save_stream(&dataset, &stream).unwrap();
        let config = ModelConfig {
            k: 4,
            n: 2,
            lr: 0.02,
            scorer: Scorer::Gat,
            attention: AttentionVariant::NePair,
            epochs: 2,
            batch_size: 16,
            memory_budget: 10,
            eval_every: 0,
            ..ModelConfig::default()
        };
        for strategy in [Strategy::Dicgrl, Strategy::Lower, Strategy::Emr] {
            let spec = ExperimentSpec {
                dataset: dataset.clone(),
                output: dir.path().join(format!("ne_{strategy}")),
                strategy,
                config: config.clone(),
                lambda: DEFAULT_LAMBDA,
            };
            let rows = run_experiment::<f64>(&spec).unwrap();
            assert_eq!(rows.len(), 2);
            assert!(rows[1].metrics.accuracy_whole >= 0.0);
            assert_eq!(rows[1].metrics.mrr_whole, 0.0);
        }
    }

    #[test]
    fn failed_runs_leave_partial_marker() {
        let dir = tempdir().unwrap();
        let dataset = make_stream_dir(dir.path(), 2);
        let mut config = small_config();
        config.scorer = Scorer::Gat; // incompatible with a triple stream
        config.attention = AttentionVariant::NePair;
        let spec = ExperimentSpec {
            dataset,
            output: dir.path().join("bad"),
            strategy: Strategy::Lower,
            config,
            lambda: DEFAULT_LAMBDA,
        };
        assert!(run_experiment::<f64>(&spec).is_err());
        assert!(dir.path().join("bad/PARTIAL").exists());
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("nonsense".parse::<Strategy>().is_err());
    }

    #[test]
    fn emit_report_requires_completed_runs() {
        let dir = tempdir().unwrap();
        assert!(matches!(emit_report(dir.path()), Err(Error::Data(_))));
    }
}
