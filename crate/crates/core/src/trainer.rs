//! Negative sampling, loss terms and the per-part training loop.
//!
//! Each part trains by alternating one mini-batch of new instances
//! (soft-margin link loss or node cross-entropy, plus the weighted
//! attention-sharpening term) with one mini-batch of replayed old
//! instances (same loss form, attention frozen at the part-start
//! snapshot, gradients component-masked). The optimizer steps after
//! every batch. All randomness is derived from the config seed, the
//! part index, the epoch and the batch, so runs are bit-reproducible
//! and an empty replay stream consumes nothing from the new stream's
//! randomness.

use crate::continual::{masked_gradient_filter, ComponentMasks};
use crate::error::{Error, Result};
use crate::graph::{node_neighbors, AdjacencyIndex, LabeledNode, Triple};
use crate::model::Model;
use crate::num::{derive_seed, Real};
use crate::optim::Adam;
use crate::tape::{ParamStore, Tape, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::time::Instant;

// Seed-derivation tags for the training streams.
pub const TAG_SHUFFLE_NEW: u64 = 10;
pub const TAG_SHUFFLE_OLD: u64 = 11;
pub const TAG_NEG_NEW: u64 = 12;
pub const TAG_SHUFFLE_EDGE: u64 = 13;
pub const TAG_NEG_OLD: u64 = 14;
pub const TAG_FISHER: u64 = 15;
pub const TAG_MEMORY: u64 = 16;
pub const TAG_AGEM: u64 = 17;
pub const TAG_SPLIT: u64 = 18;

/// One epoch of the training log (JSON-lines record).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub part: usize,
    pub epoch: usize,
    pub l_new: f64,
    pub l_old: f64,
    pub l_norm: f64,
    pub seconds: f64,
}

/// Corrupts head or tail (fair coin) with a node drawn uniformly from
/// `pool`, rejecting candidates present in `known` (the closed-world
/// filter over every split seen so far). After 100 rejections the last
/// candidate is accepted and a warning logged.
pub fn sample_negatives(
    batch: &[Triple],
    known: &HashSet<Triple>,
    pool: &[u32],
    count: usize,
    seed: u64,
) -> Vec<Vec<Triple>> {
    assert!(count >= 1, "need at least one negative per positive");
    assert!(!pool.is_empty(), "empty corruption pool");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batch
        .iter()
        .map(|t| {
            (0..count)
                .map(|_| {
                    let mut candidate = *t;
                    for attempt in 0..100 {
                        let corrupt_head: bool = rng.gen();
                        let node = pool[rng.gen_range(0..pool.len())];
                        candidate = if corrupt_head {
                            Triple::new(node, t.relation, t.tail)
                        } else {
                            Triple::new(t.head, t.relation, node)
                        };
                        if !known.contains(&candidate) {
                            return candidate;
                        }
                        let _ = attempt;
                    }
                    log::warn!(
                        "negative sampling saturated for ({},{},{}); accepting a known triple",
                        t.head,
                        t.relation,
                        t.tail
                    );
                    candidate
                })
                .collect()
        })
        .collect()
}

/// Soft-margin link loss on the tape: sum over positives and their
/// negatives of softplus(-y * s), y = +1 / -1, s the validity score
/// (TransE distances enter negated). Component selection for every
/// instance is computed against `att_store`, which is the live store
/// for new batches and the part-start snapshot for replay batches.
pub fn tape_link_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    att_store: &ParamStore<T>,
    positives: &[Triple],
    negatives: &[Vec<Triple>],
) -> Result<Var> {
    debug_assert_eq!(negatives.len(), positives.len());
    let mut terms = Vec::with_capacity(positives.len() * 2);
    for (t, negs) in positives.iter().zip(negatives) {
        let att = model.instance_attention(att_store, t)?;
        let s = model.tape_validity(tape, &model.store, t, &att.selected);
        let neg_s = tape.neg(s);
        terms.push(tape.softplus(neg_s));
        for nt in negs {
            let att = model.instance_attention(att_store, nt)?;
            let s = model.tape_validity(tape, &model.store, nt, &att.selected);
            terms.push(tape.softplus(s));
        }
    }
    let stacked = tape.concat(&terms);
    Ok(tape.sum(stacked))
}

/// Cross-entropy over labeled nodes: -(1/|C|) * log softmax_label per
/// node, using GAT-updated components with neighbor gating computed
/// against `att_store`.
pub fn tape_node_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    att_store: &ParamStore<T>,
    nodes: &[LabeledNode],
    adjacency: &AdjacencyIndex,
) -> Result<Var> {
    let classes = model.num_classes;
    let scale = -T::one() / T::from_f64_c(classes as f64);
    let mut terms = Vec::with_capacity(nodes.len());
    for ln in nodes {
        if ln.label as usize >= classes {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes",
                ln.label, classes
            )));
        }
        let neighbors: Vec<u32> = node_neighbors(ln.node, adjacency).into_iter().collect();
        let gated = model.gated_neighbors(att_store, ln.node, &neighbors);
        let logits = model.tape_node_logits(tape, &model.store, &gated)?;
        let lsm = tape.log_softmax(logits);
        let picked = tape.slice(lsm, ln.label as usize, 1);
        terms.push(tape.scale(picked, scale));
    }
    let stacked = tape.concat(&terms);
    Ok(tape.sum(stacked))
}

/// Attention-sharpening loss: sum over instances of
/// (1 - sum of the top-n attention weights). Always uses live
/// attention; replay batches never contribute.
pub fn tape_norm_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    instances: &[Triple],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(instances.len());
    for t in instances {
        let att = model.instance_attention(&model.store, t)?;
        let alpha = model.tape_instance_alpha(tape, &model.store, t);
        let picked: Vec<Var> =
            att.selected.iter().map(|&k| tape.slice(alpha, k, 1)).collect();
        let gathered = tape.concat(&picked);
        let mass = tape.sum(gathered);
        let one = tape.scalar(T::one());
        terms.push(tape.sub(one, mass));
    }
    let stacked = tape.concat(&terms);
    Ok(tape.sum(stacked))
}

/// Inputs of one part's training run. Strategies reuse the same loop by
/// varying the replay stream, masks and frozen snapshot:
/// plain fine-tuning passes empty replay; episodic replay passes its
/// memory with no masks and live attention; selective replay passes
/// activated triples, masks and the part-start snapshot.
pub struct PartContext<'a, T: Real> {
    pub part: usize,
    /// New link-prediction instances; in node-classification mode the
    /// part's new edges (they feed the sharpening loss and activation).
    pub new_triples: &'a [Triple],
    /// New labeled nodes (node-classification instances).
    pub new_nodes: &'a [LabeledNode],
    /// Replayed old triples (link-prediction replay stream).
    pub replay_triples: &'a [Triple],
    /// Replayed old labeled nodes (node-classification replay stream).
    pub replay_nodes: &'a [LabeledNode],
    /// Component masks applied to replay gradients (selective replay).
    pub masks: Option<&'a ComponentMasks>,
    /// Part-start snapshot used for replay attention; live when absent.
    pub frozen: Option<&'a ParamStore<T>>,
    /// Closed-world filter for negative sampling.
    pub known: &'a HashSet<Triple>,
    /// Corruption candidate pool (entities seen so far).
    pub pool: &'a [u32],
    /// Graph index for neighbor lookups (node-classification mode).
    pub adjacency: Option<&'a AdjacencyIndex>,
}

/// Strategy integration points for [`train_part`].
#[derive(Default)]
pub struct TrainHooks<'a, T: Real> {
    /// Runs after backward on every new batch, before the optimizer
    /// step; may adjust gradients in place (quadratic penalties,
    /// gradient projection) and returns an extra loss value folded into
    /// the logged L_new.
    pub new_grad_hook: Option<&'a mut dyn FnMut(&mut Model<T>) -> Result<T>>,
    /// Validation metric, higher better; drives patience-based early
    /// stopping when the config enables it.
    pub eval_hook: Option<&'a mut dyn FnMut(&Model<T>) -> Result<f64>>,
}

impl<'a, T: Real> TrainHooks<'a, T> {
    pub fn none() -> Self {
        TrainHooks { new_grad_hook: None, eval_hook: None }
    }
}

fn batch_count(len: usize, size: usize) -> usize {
    len.div_ceil(size)
}

fn shuffled<R: Clone>(items: &[R], seed: u64) -> Vec<R> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = items.to_vec();
    out.shuffle(&mut rng);
    out
}

fn check_finite<T: Real>(value: T, what: &str, part: usize, epoch: usize) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Divergence(format!(
            "{what} became non-finite at part {part}, epoch {epoch}"
        )));
    }
    Ok(())
}

/// Trains one part and returns the per-epoch log. See the module docs
/// for the batch schedule; early stopping fires after
/// `config.patience` evaluations without improvement.
pub fn train_part<T: Real>(
    model: &mut Model<T>,
    optimizer: &mut Adam<T>,
    ctx: &PartContext<'_, T>,
    hooks: &mut TrainHooks<'_, T>,
) -> Result<Vec<EpochLog>> {
    let config = model.config.clone();
    let link_mode = model.is_link_mode();
    if !link_mode && ctx.adjacency.is_none() {
        return Err(Error::Config("node-classification training needs an adjacency index".into()));
    }
    let seed = config.seed;
    let beta = T::from_f64_c(config.beta);
    let mut logs = Vec::with_capacity(config.epochs);
    let mut best_metric = f64::NEG_INFINITY;
    let mut strikes = 0usize;

    let new_len = if link_mode { ctx.new_triples.len() } else { ctx.new_nodes.len() };
    let old_len = if link_mode { ctx.replay_triples.len() } else { ctx.replay_nodes.len() };
    if new_len == 0 {
        return Err(Error::Data(format!("part {} has no training instances", ctx.part)));
    }

    'epochs: for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut l_new = T::zero();
        let mut l_old = T::zero();
        let mut l_norm = T::zero();

        let part_u = ctx.part as u64;
        let epoch_u = epoch as u64;
        let new_stream_t;
        let new_stream_n;
        let edge_stream;
        if link_mode {
            new_stream_t =
                shuffled(ctx.new_triples, derive_seed(seed, &[TAG_SHUFFLE_NEW, part_u, epoch_u]));
            new_stream_n = Vec::new();
            edge_stream = Vec::new();
        } else {
            new_stream_n =
                shuffled(ctx.new_nodes, derive_seed(seed, &[TAG_SHUFFLE_NEW, part_u, epoch_u]));
            new_stream_t = Vec::new();
            edge_stream =
                shuffled(ctx.new_triples, derive_seed(seed, &[TAG_SHUFFLE_EDGE, part_u, epoch_u]));
        }
        let old_stream_t;
        let old_stream_n;
        if old_len > 0 {
            if link_mode {
                old_stream_t = shuffled(
                    ctx.replay_triples,
                    derive_seed(seed, &[TAG_SHUFFLE_OLD, part_u, epoch_u]),
                );
                old_stream_n = Vec::new();
            } else {
                old_stream_n = shuffled(
                    ctx.replay_nodes,
                    derive_seed(seed, &[TAG_SHUFFLE_OLD, part_u, epoch_u]),
                );
                old_stream_t = Vec::new();
            }
        } else {
            old_stream_t = Vec::new();
            old_stream_n = Vec::new();
        }

        let new_batches = batch_count(new_len, config.batch_size);
        let old_batches = batch_count(old_len, config.batch_size);
        let edge_batches = batch_count(edge_stream.len(), config.batch_size);
        let rounds = new_batches.max(old_batches);

        for round in 0..rounds {
            // ---- new-data batch ----
            let nb = round % new_batches;
            let lo = nb * config.batch_size;
            let mut tape = Tape::new();
            let (loss_new, norm_val) = if link_mode {
                let batch = &new_stream_t[lo..(lo + config.batch_size).min(new_len)];
                let negs = sample_negatives(
                    batch,
                    ctx.known,
                    ctx.pool,
                    config.negatives,
                    derive_seed(seed, &[TAG_NEG_NEW, part_u, epoch_u, round as u64]),
                );
                let main = tape_link_loss(&mut tape, model, &model.store, batch, &negs)?;
                if config.beta > 0.0 {
                    let norm = tape_norm_loss(&mut tape, model, batch)?;
                    let scaled = tape.scale(norm, beta);
                    let total = tape.add(main, scaled);
                    (total, tape.scalar_value(norm))
                } else {
                    (main, T::zero())
                }
            } else {
                let batch = &new_stream_n[lo..(lo + config.batch_size).min(new_len)];
                let adjacency = ctx.adjacency.unwrap();
                let main = tape_node_loss(&mut tape, model, &model.store, batch, adjacency)?;
                if config.beta > 0.0 && edge_batches > 0 {
                    let eb = round % edge_batches;
                    let elo = eb * config.batch_size;
                    let ebatch =
                        &edge_stream[elo..(elo + config.batch_size).min(edge_stream.len())];
                    let norm = tape_norm_loss(&mut tape, model, ebatch)?;
                    let scaled = tape.scale(norm, beta);
                    let total = tape.add(main, scaled);
                    (total, tape.scalar_value(norm))
                } else {
                    (main, T::zero())
                }
            };
            let mut new_val = tape.scalar_value(loss_new) - beta * norm_val;
            check_finite(new_val, "new-batch loss", ctx.part, epoch)?;
            tape.backward(loss_new, &mut model.store)?;
            drop(tape);
            if let Some(hook) = hooks.new_grad_hook.as_mut() {
                let extra = hook(model)?;
                check_finite(extra, "gradient-hook loss", ctx.part, epoch)?;
                new_val += extra;
            }
            optimizer.step(&mut model.store);
            l_new += new_val;
            l_norm += norm_val;

            // ---- replayed old-data batch ----
            if old_batches > 0 {
                let ob = round % old_batches;
                let lo = ob * config.batch_size;
                let att_store = ctx.frozen.unwrap_or(&model.store);
                let mut tape = Tape::new();
                let loss_old = if link_mode {
                    let batch = &old_stream_t[lo..(lo + config.batch_size).min(old_len)];
                    let negs = sample_negatives(
                        batch,
                        ctx.known,
                        ctx.pool,
                        config.negatives,
                        derive_seed(seed, &[TAG_NEG_OLD, part_u, epoch_u, round as u64]),
                    );
                    tape_link_loss(&mut tape, model, att_store, batch, &negs)?
                } else {
                    let batch = &old_stream_n[lo..(lo + config.batch_size).min(old_len)];
                    tape_node_loss(&mut tape, model, att_store, batch, ctx.adjacency.unwrap())?
                };
                let old_val = tape.scalar_value(loss_old);
                check_finite(old_val, "replay-batch loss", ctx.part, epoch)?;
                tape.backward(loss_old, &mut model.store)?;
                drop(tape);
                if let Some(masks) = ctx.masks {
                    masked_gradient_filter(
                        masks,
                        &model.table,
                        model.attention_weights,
                        &mut model.store,
                    );
                }
                optimizer.step(&mut model.store);
                l_old += old_val;
            }
        }

        logs.push(EpochLog {
            part: ctx.part,
            epoch,
            l_new: l_new.to_f64_c(),
            l_old: l_old.to_f64_c(),
            l_norm: l_norm.to_f64_c(),
            seconds: started.elapsed().as_secs_f64(),
        });

        if config.eval_every > 0 && (epoch + 1) % config.eval_every == 0 {
            if let Some(eval) = hooks.eval_hook.as_mut() {
                let metric = eval(model)?;
                if metric > best_metric {
                    best_metric = metric;
                    strikes = 0;
                } else {
                    strikes += 1;
                    if config.patience > 0 && strikes >= config.patience {
                        log::info!(
                            "early stop at part {}, epoch {}: no improvement in {} evaluations",
                            ctx.part,
                            epoch,
                            strikes
                        );
                        break 'epochs;
                    }
                }
            }
        }
    }
    if model.store.any_non_finite() {
        return Err(Error::Divergence(format!(
            "parameters became non-finite during part {}",
            ctx.part
        )));
    }
    Ok(logs)
}
