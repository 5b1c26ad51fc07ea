//! Feature extractors over selected components.
//!
//! Link prediction scores a triple from the gathered sub-embeddings
//! (û, r, v̂): TransE as a translation distance, ConvKB as a convolution
//! over the three stacked columns. Node embedding updates one component
//! at a time with a small graph-attention aggregation, then classifies
//! nodes from the concatenated components.
//!
//! Every operation exists twice: an inference form over plain slices
//! and a tape form used by the losses. Both evaluate the same
//! arithmetic in the same order, so their outputs agree bit for bit.

use crate::disentangle::{init_bound, uniform_init, DisentangledTable};
use crate::error::{Error, Result};
use crate::num::{softmax, Real};
use crate::tape::{Norm, ParamId, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CONV_FILTERS: &str = "conv_filters";
pub const CONV_BIAS: &str = "conv_bias";
pub const CONV_OUTPUT: &str = "conv_output";
pub const GAT_SCORE: &str = "gat_score";
pub const GAT_VALUE: &str = "gat_value";
pub const CLASSIFIER: &str = "classifier";

/// Translation distance ||û + r - v̂||_p; lower is more plausible.
pub fn transe_score<T: Real>(u_hat: &[T], r: &[T], v_hat: &[T], p: Norm) -> Result<T> {
    if u_hat.len() != r.len() || u_hat.len() != v_hat.len() {
        return Err(Error::Grad(format!(
            "transe length mismatch: {} / {} / {}",
            u_hat.len(),
            r.len(),
            v_hat.len()
        )));
    }
    let mut acc = T::zero();
    match p {
        Norm::L1 => {
            for i in 0..u_hat.len() {
                acc += (u_hat[i] + r[i] - v_hat[i]).abs();
            }
            Ok(acc)
        }
        Norm::L2 => {
            for i in 0..u_hat.len() {
                let t = u_hat[i] + r[i] - v_hat[i];
                acc += t * t;
            }
            Ok(acc.sqrt())
        }
    }
}

/// Tape form of [`transe_score`].
pub fn tape_transe<T: Real>(tape: &mut Tape<T>, u_hat: Var, r: Var, v_hat: Var, p: Norm) -> Var {
    let sum = tape.add(u_hat, r);
    let diff = tape.sub(sum, v_hat);
    tape.pnorm(diff, p)
}

/// Convolution scorer parameters: M 1x3 filters with bias and the
/// output row W_1 of length M * n * d_c.
#[derive(Debug, Clone, Copy)]
pub struct ConvKBParams {
    pub filters: ParamId,
    pub bias: ParamId,
    pub output: ParamId,
    pub m: usize,
    /// Rows of the stacked [û; r; v̂] matrix, i.e. n * d_c.
    pub rows: usize,
}

impl ConvKBParams {
    /// Filters and W_1 drawn uniformly at Xavier-style bounds; bias zero.
    pub fn init<T: Real>(store: &mut ParamStore<T>, m: usize, rows: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = uniform_init(&mut rng, m * 3, init_bound::<T>(3));
        let output = uniform_init(&mut rng, m * rows, init_bound::<T>(m * rows));
        let filters = store.add(CONV_FILTERS, filters, m, 3);
        let bias = store.add(CONV_BIAS, vec![T::zero(); m], 1, m);
        let output = store.add(CONV_OUTPUT, output, 1, m * rows);
        ConvKBParams { filters, bias, output, m, rows }
    }
}

/// W_1 . ReLU(Conv([û; r; v̂])); higher is more plausible. The three
/// vectors form the columns of a rows x 3 matrix; each filter spans one
/// row, giving a rows x M feature map flattened row-major.
pub fn convkb_score<T: Real>(
    store: &ParamStore<T>,
    params: &ConvKBParams,
    u_hat: &[T],
    r: &[T],
    v_hat: &[T],
) -> Result<T> {
    if u_hat.len() != params.rows || r.len() != params.rows || v_hat.len() != params.rows {
        return Err(Error::Grad(format!(
            "convkb expects {} rows, got {} / {} / {}",
            params.rows,
            u_hat.len(),
            r.len(),
            v_hat.len()
        )));
    }
    let f = store.values(params.filters);
    let b = store.values(params.bias);
    let w1 = store.values(params.output);
    let mut score = T::zero();
    for i in 0..params.rows {
        for m in 0..params.m {
            let pre = b[m] + f[m * 3] * u_hat[i] + f[m * 3 + 1] * r[i] + f[m * 3 + 2] * v_hat[i];
            let act = if pre > T::zero() { pre } else { T::zero() };
            score += w1[i * params.m + m] * act;
        }
    }
    Ok(score)
}

/// Tape form of [`convkb_score`].
pub fn tape_convkb<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &ConvKBParams,
    u_hat: Var,
    r: Var,
    v_hat: Var,
) -> Var {
    let filters = tape.param(store, params.filters);
    let bias = tape.param(store, params.bias);
    let w1 = tape.param(store, params.output);
    let feature_map = tape.conv_rows([u_hat, r, v_hat], filters, bias, params.m);
    let act = tape.relu(feature_map);
    tape.dot(w1, act)
}

/// Component-update parameters: scoring row W_3 (1 x d_c) and K value
/// matrices W_4^k (h x d_c), stacked into one (K*h) x d_c parameter.
#[derive(Debug, Clone, Copy)]
pub struct GATParams {
    pub score: ParamId,
    pub value: ParamId,
    pub k: usize,
    pub h: usize,
    pub d_c: usize,
}

impl GATParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, k: usize, h: usize, d_c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let score = uniform_init(&mut rng, d_c, init_bound::<T>(d_c));
        let value = uniform_init(&mut rng, k * h * d_c, init_bound::<T>(d_c));
        let score = store.add(GAT_SCORE, score, 1, d_c);
        let value = store.add(GAT_VALUE, value, k * h, d_c);
        GATParams { score, value, k, h, d_c }
    }
}

/// New value for component k of node u:
/// sum over neighbors v of softmax_v(W_3 . v^k) * (W_4^k . v^k).
///
/// The caller restricts `neighbors` to nodes whose pair attention with
/// u selects component k, and includes u itself (self-loop), so the set
/// is never empty. Neighbors are sorted internally, making the result
/// independent of enumeration order.
pub fn gat_update_component<T: Real>(
    store: &ParamStore<T>,
    table: &DisentangledTable,
    params: &GATParams,
    k: usize,
    neighbors: &[u32],
) -> Result<Vec<T>> {
    if neighbors.is_empty() {
        return Err(Error::Grad("component update with empty neighbor set".into()));
    }
    let mut order = neighbors.to_vec();
    order.sort_unstable();
    let w3 = store.values(params.score);
    let w4 = store.values(params.value);
    let base = k * params.h * params.d_c;
    let scores: Vec<T> = order
        .iter()
        .map(|&v| {
            let vk = table.node_component(store, v, k);
            vk.iter().zip(w3.iter()).map(|(&x, &w)| w * x).sum()
        })
        .collect();
    let weights = softmax(&scores);
    let mut out = vec![T::zero(); params.h];
    for (idx, &v) in order.iter().enumerate() {
        let vk = table.node_component(store, v, k);
        for (i, slot) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for j in 0..params.d_c {
                acc += w4[base + i * params.d_c + j] * vk[j];
            }
            *slot += weights[idx] * acc;
        }
    }
    Ok(out)
}

/// Tape form of [`gat_update_component`].
pub fn tape_gat_component<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    table: &DisentangledTable,
    params: &GATParams,
    k: usize,
    neighbors: &[u32],
) -> Result<Var> {
    if neighbors.is_empty() {
        return Err(Error::Grad("component update with empty neighbor set".into()));
    }
    let mut order = neighbors.to_vec();
    order.sort_unstable();
    let w3 = tape.param(store, params.score);
    let w4k = tape.param_slice(
        store,
        params.value,
        k * params.h * params.d_c,
        params.h * params.d_c,
    );
    let comps: Vec<Var> = order.iter().map(|&v| table.tape_component(tape, store, v, k)).collect();
    let scores: Vec<Var> = comps.iter().map(|&vk| tape.dot(vk, w3)).collect();
    let stacked = tape.concat(&scores);
    let weights = tape.softmax(stacked);
    let mut out: Option<Var> = None;
    for (idx, &vk) in comps.iter().enumerate() {
        let mapped = tape.matvec(w4k, vk, params.h, params.d_c);
        let wi = tape.slice(weights, idx, 1);
        let term = tape.mul_scalar(mapped, wi);
        out = Some(match out {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    Ok(out.unwrap())
}

/// Node classifier: W_5 (classes x d) applied to the concatenation of
/// all K components; softmax is applied downstream by the loss.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierParams {
    pub weights: ParamId,
    pub classes: usize,
    pub d: usize,
}

impl ClassifierParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, classes: usize, d: usize, seed: u64) -> Self {
        assert!(classes >= 2, "classifier needs at least two classes");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = uniform_init(&mut rng, classes * d, init_bound::<T>(d));
        let weights = store.add(CLASSIFIER, weights, classes, d);
        ClassifierParams { weights, classes, d }
    }
}

pub fn classify_logits<T: Real>(
    store: &ParamStore<T>,
    table: &DisentangledTable,
    params: &ClassifierParams,
    u: u32,
) -> Result<Vec<T>> {
    if table.dims.d() != params.d {
        return Err(Error::Config(format!(
            "classifier expects dimension {}, table provides {}",
            params.d,
            table.dims.d()
        )));
    }
    let w5 = store.values(params.weights);
    let emb = table.node_embedding(store, u);
    let mut logits = vec![T::zero(); params.classes];
    for (c, slot) in logits.iter_mut().enumerate() {
        let mut acc = T::zero();
        for j in 0..params.d {
            acc += w5[c * params.d + j] * emb[j];
        }
        *slot = acc;
    }
    Ok(logits)
}

/// Tape form of [`classify_logits`].
pub fn tape_classify<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    table: &DisentangledTable,
    params: &ClassifierParams,
    u: u32,
) -> Result<Var> {
    if table.dims.d() != params.d {
        return Err(Error::Config(format!(
            "classifier expects dimension {}, table provides {}",
            params.d,
            table.dims.d()
        )));
    }
    let w5 = tape.param(store, params.weights);
    let emb = tape.param_slice(
        store,
        table.node_components,
        u as usize * table.dims.d(),
        table.dims.d(),
    );
    Ok(tape.matvec(w5, emb, params.classes, params.d))
}
