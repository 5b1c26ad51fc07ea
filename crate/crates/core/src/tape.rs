//! Reverse-mode differentiation over named parameter arrays.
//!
//! A [`Tape`] records a forward computation as a sequence of primitive
//! vector operations; [`Tape::backward`] replays it in exact reverse
//! order and accumulates `d loss / d parameter` into the gradient buffer
//! of every [`ParamStore`] slice that was read. Tapes are throwaway:
//! build one per loss evaluation, backprop, drop it.
//!
//! The op set is the minimum needed by the scorers and losses in this
//! crate: elementwise arithmetic, matrix-vector products, concatenation
//! and slicing, p-norms, ReLU, (log-)softmax, softplus and a row-wise
//! 1x3 convolution.

use crate::error::{Error, Result};
use crate::num::{logistic, softmax, softplus, Real};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Handle to a parameter array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Param<T> {
    name: String,
    values: Vec<T>,
    grad: Vec<T>,
    rows: usize,
    cols: usize,
}

/// Named flat parameter arrays with matching gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Registers a parameter of logical shape `rows x cols` (flattened
    /// row-major). The name is the stable identifier used by checkpoints.
    pub fn add(&mut self, name: &str, values: Vec<T>, rows: usize, cols: usize) -> ParamId {
        assert_eq!(values.len(), rows * cols, "parameter shape mismatch for {name}");
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = vec![T::zero(); values.len()];
        self.params.push(Param { name: name.to_string(), values, grad, rows, cols });
        ParamId(self.params.len() - 1)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        (self.params[id.0].rows, self.params[id.0].cols)
    }

    pub fn values(&self, id: ParamId) -> &[T] {
        &self.params[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].values
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Copy of all parameter values, aligned with [`ParamStore::ids`].
    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| p.values.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<T>]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot/store mismatch");
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            p.values.copy_from_slice(s);
        }
    }

    /// True if any value in any parameter is non-finite.
    pub fn any_non_finite(&self) -> bool {
        self.params.iter().any(|p| p.values.iter().any(|v| !v.is_finite()))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile<T> {
    version: u32,
    params: BTreeMap<String, CheckpointEntry<T>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl<T: Real> ParamStore<T> {
    /// Textual checkpoint: a versioned key -> flat-array JSON map. JSON
    /// floats are emitted in shortest-round-trip form, so save/load is
    /// bit-exact.
    pub fn to_checkpoint_string(&self) -> Result<String> {
        if self.any_non_finite() {
            return Err(Error::Divergence("refusing to checkpoint non-finite parameters".into()));
        }
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            params: self
                .params
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        CheckpointEntry { rows: p.rows, cols: p.cols, values: p.values.clone() },
                    )
                })
                .collect(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()?)?;
        Ok(())
    }

    /// Loads values by name into this store. Every store parameter must
    /// be present in the checkpoint with an identical shape.
    pub fn load_checkpoint_str(&mut self, text: &str) -> Result<()> {
        let file: CheckpointFile<T> =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("bad checkpoint: {e}")))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", file.version)));
        }
        for p in &mut self.params {
            let entry = file
                .params
                .get(&p.name)
                .ok_or_else(|| Error::Data(format!("checkpoint missing parameter {}", p.name)))?;
            if entry.rows != p.rows || entry.cols != p.cols || entry.values.len() != p.values.len()
            {
                return Err(Error::Data(format!("checkpoint shape mismatch for {}", p.name)));
            }
            p.values.copy_from_slice(&entry.values);
        }
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.load_checkpoint_str(&text)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

#[derive(Debug)]
enum Op {
    /// Constant leaf; receives no gradient.
    Const,
    /// Leaf read from `param[offset..offset+len]`; backward accumulates
    /// the adjoint into the parameter's gradient buffer.
    ParamSlice { param: ParamId, offset: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Neg(Var),
    /// Elementwise product.
    Mul(Var, Var),
    /// Multiply by a compile-time constant.
    ScaleConst(Var),
    /// Vector times a length-1 node.
    MulScalar(Var, Var),
    Dot(Var, Var),
    /// Row-major `rows x cols` matrix times a length-`cols` vector.
    MatVec { mat: Var, vec: Var, rows: usize, cols: usize },
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    PNorm { src: Var, norm: Norm },
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Softplus(Var),
    Sum(Var),
    /// Row-wise 1x3 convolution: three length-`rows` columns, `m` filters
    /// (flattened m x 3) with per-filter bias, output row-major rows x m.
    ConvRows { cols: [Var; 3], filters: Var, bias: Var, m: usize },
}

struct Node<T> {
    value: Vec<T>,
    op: Op,
    /// Constant factor for `ScaleConst`.
    scale: T,
}

/// Records one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Vec<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op, scale: T::one() });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Value of a length-1 node.
    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn len(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn constant(&mut self, values: &[T]) -> Var {
        self.push(values.to_vec(), Op::Const)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.push(vec![v], Op::Const)
    }

    pub fn param_slice(
        &mut self,
        store: &ParamStore<T>,
        id: ParamId,
        offset: usize,
        len: usize,
    ) -> Var {
        let values = store.values(id)[offset..offset + len].to_vec();
        self.push(values, Op::ParamSlice { param: id, offset })
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let len = store.values(id).len();
        self.param_slice(store, id, 0, len)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.len(a), self.len(b), "add length mismatch");
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.len(a), self.len(b), "sub length mismatch");
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x - y)
            .collect();
        self.push(value, Op::Sub(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| -x).collect();
        self.push(value, Op::Neg(a))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.len(a), self.len(b), "mul length mismatch");
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let v = self.push(value, Op::ScaleConst(a));
        self.nodes[v.0].scale = c;
        v
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.len(s), 1, "mul_scalar takes a length-1 node");
        let sv = self.nodes[s.0].value[0];
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x * sv).collect();
        self.push(value, Op::MulScalar(a, s))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.len(a), self.len(b), "dot length mismatch");
        let v: T = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .sum();
        self.push(vec![v], Op::Dot(a, b))
    }

    pub fn matvec(&mut self, mat: Var, vec: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.len(mat), rows * cols, "matvec matrix shape mismatch");
        assert_eq!(self.len(vec), cols, "matvec vector length mismatch");
        let m = &self.nodes[mat.0].value;
        let x = &self.nodes[vec.0].value;
        let mut out = vec![T::zero(); rows];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for j in 0..cols {
                acc += m[i * cols + j] * x[j];
            }
            *o = acc;
        }
        self.push(out, Op::MatVec { mat, vec, rows, cols })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[src.0].value[start..start + len].to_vec();
        self.push(value, Op::Slice { src, start })
    }

    pub fn pnorm(&mut self, src: Var, norm: Norm) -> Var {
        let x = &self.nodes[src.0].value;
        let v = match norm {
            Norm::L1 => x.iter().map(|&e| e.abs()).sum(),
            Norm::L2 => x.iter().map(|&e| e * e).sum::<T>().sqrt(),
        };
        self.push(vec![v], Op::PNorm { src, norm })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value: Vec<T> =
            self.nodes[a.0].value.iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        self.push(value, Op::Relu(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax(&self.nodes[a.0].value);
        self.push(value, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let max = x.iter().cloned().fold(x[0], T::max);
        let lse = x.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        let value: Vec<T> = x.iter().map(|&v| v - lse).collect();
        self.push(value, Op::LogSoftmax(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| softplus(x)).collect();
        self.push(value, Op::Softplus(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v: T = self.nodes[a.0].value.iter().cloned().sum();
        self.push(vec![v], Op::Sum(a))
    }

    pub fn conv_rows(&mut self, cols: [Var; 3], filters: Var, bias: Var, m: usize) -> Var {
        let rows = self.len(cols[0]);
        assert_eq!(self.len(cols[1]), rows, "conv column length mismatch");
        assert_eq!(self.len(cols[2]), rows, "conv column length mismatch");
        assert_eq!(self.len(filters), m * 3, "conv filter bank shape mismatch");
        assert_eq!(self.len(bias), m, "conv bias length mismatch");
        let c0 = &self.nodes[cols[0].0].value;
        let c1 = &self.nodes[cols[1].0].value;
        let c2 = &self.nodes[cols[2].0].value;
        let f = &self.nodes[filters.0].value;
        let b = &self.nodes[bias.0].value;
        let mut out = vec![T::zero(); rows * m];
        for i in 0..rows {
            for (k, ob) in out[i * m..(i + 1) * m].iter_mut().enumerate() {
                *ob = b[k] + f[k * 3] * c0[i] + f[k * 3 + 1] * c1[i] + f[k * 3 + 2] * c2[i];
            }
        }
        self.push(out, Op::ConvRows { cols, filters, bias, m })
    }

    /// Backpropagates from `loss` (a length-1 node) and accumulates into
    /// the gradient buffers of every parameter slice read by this tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.len(loss) != 1 {
            return Err(Error::Grad(format!(
                "backward requires a scalar loss, got length {}",
                self.len(loss)
            )));
        }
        let mut adj: Vec<Vec<T>> =
            self.nodes.iter().map(|n| vec![T::zero(); n.value.len()]).collect();
        adj[loss.0][0] = T::one();

        for idx in (0..self.nodes.len()).rev() {
            if adj[idx].iter().all(|&g| g == T::zero()) {
                continue;
            }
            let g = std::mem::take(&mut adj[idx]);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::ParamSlice { param, offset } => {
                    let grad = store.grad_mut(*param);
                    for (i, &gi) in g.iter().enumerate() {
                        grad[offset + i] += gi;
                    }
                }
                Op::Add(a, b) => {
                    for (i, &gi) in g.iter().enumerate() {
                        adj[a.0][i] += gi;
                        adj[b.0][i] += gi;
                    }
                }
                Op::Sub(a, b) => {
                    for (i, &gi) in g.iter().enumerate() {
                        adj[a.0][i] += gi;
                        adj[b.0][i] -= gi;
                    }
                }
                Op::Neg(a) => {
                    for (i, &gi) in g.iter().enumerate() {
                        adj[a.0][i] -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    for i in 0..g.len() {
                        let av = self.nodes[a.0].value[i];
                        let bv = self.nodes[b.0].value[i];
                        adj[a.0][i] += g[i] * bv;
                        adj[b.0][i] += g[i] * av;
                    }
                }
                Op::ScaleConst(a) => {
                    for (i, &gi) in g.iter().enumerate() {
                        adj[a.0][i] += gi * node.scale;
                    }
                }
                Op::MulScalar(a, s) => {
                    let sv = self.nodes[s.0].value[0];
                    let mut ds = T::zero();
                    for (i, &gi) in g.iter().enumerate() {
                        adj[a.0][i] += gi * sv;
                        ds += gi * self.nodes[a.0].value[i];
                    }
                    adj[s.0][0] += ds;
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    for i in 0..self.nodes[a.0].value.len() {
                        adj[a.0][i] += g0 * self.nodes[b.0].value[i];
                        adj[b.0][i] += g0 * self.nodes[a.0].value[i];
                    }
                }
                Op::MatVec { mat, vec, rows, cols } => {
                    let mv = &self.nodes[mat.0].value;
                    let xv = &self.nodes[vec.0].value;
                    for i in 0..*rows {
                        let gi = g[i];
                        if gi == T::zero() {
                            continue;
                        }
                        for j in 0..*cols {
                            adj[mat.0][i * cols + j] += gi * xv[j];
                            adj[vec.0][j] += gi * mv[i * cols + j];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        for i in 0..len {
                            adj[p.0][i] += g[off + i];
                        }
                        off += len;
                    }
                }
                Op::Slice { src, start } => {
                    for (i, &gi) in g.iter().enumerate() {
                        adj[src.0][start + i] += gi;
                    }
                }
                Op::PNorm { src, norm } => {
                    let g0 = g[0];
                    let x = &self.nodes[src.0].value;
                    match norm {
                        Norm::L1 => {
                            for (i, &xi) in x.iter().enumerate() {
                                let s = if xi > T::zero() {
                                    T::one()
                                } else if xi < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                };
                                adj[src.0][i] += g0 * s;
                            }
                        }
                        Norm::L2 => {
                            let nv = node.value[0];
                            if nv > T::zero() {
                                for (i, &xi) in x.iter().enumerate() {
                                    adj[src.0][i] += g0 * xi / nv;
                                }
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    for (i, &gi) in g.iter().enumerate() {
                        if self.nodes[a.0].value[i] > T::zero() {
                            adj[a.0][i] += gi;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dot: T = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                    for i in 0..g.len() {
                        adj[a.0][i] += y[i] * (g[i] - dot);
                    }
                }
                Op::LogSoftmax(a) => {
                    let gsum: T = g.iter().cloned().sum();
                    for i in 0..g.len() {
                        adj[a.0][i] += g[i] - node.value[i].exp() * gsum;
                    }
                }
                Op::Softplus(a) => {
                    for (i, &gi) in g.iter().enumerate() {
                        adj[a.0][i] += gi * logistic(self.nodes[a.0].value[i]);
                    }
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    for slot in adj[a.0].iter_mut() {
                        *slot += g0;
                    }
                }
                Op::ConvRows { cols, filters, bias, m } => {
                    let rows = self.nodes[cols[0].0].value.len();
                    for i in 0..rows {
                        for k in 0..*m {
                            let gi = g[i * m + k];
                            if gi == T::zero() {
                                continue;
                            }
                            adj[bias.0][k] += gi;
                            for (c, col) in cols.iter().enumerate() {
                                let fv = self.nodes[filters.0].value[k * 3 + c];
                                let cv = self.nodes[col.0].value[i];
                                adj[col.0][i] += gi * fv;
                                adj[filters.0][k * 3 + c] += gi * cv;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Max relative error between `analytic_grad` and a central finite
/// difference of `f` over every coordinate of parameter `id`.
///
/// Coordinates where the step-`h` and step-`h/2` central differences
/// disagree are treated as sitting next to a ReLU kink (or a top-n
/// selection boundary) and skipped.
pub fn finite_diff_check<T: Real>(
    store: &mut ParamStore<T>,
    id: ParamId,
    analytic_grad: &[T],
    mut f: impl FnMut(&ParamStore<T>) -> T,
    h: T,
) -> T {
    let n = store.values(id).len();
    assert_eq!(analytic_grad.len(), n, "gradient length mismatch");
    let one = T::one();
    let two = T::from_f64_c(2.0);
    let kink_tol = T::from_f64_c(1e-3);
    let mut worst = T::zero();
    for i in 0..n {
        let x0 = store.values(id)[i];
        let mut eval_at = |store: &mut ParamStore<T>, x: T| {
            store.values_mut(id)[i] = x;
            f(store)
        };
        let cd = |store: &mut ParamStore<T>, eval: &mut dyn FnMut(&mut ParamStore<T>, T) -> T,
                  step: T| {
            let plus = eval(store, x0 + step);
            let minus = eval(store, x0 - step);
            (plus - minus) / (two * step)
        };
        let d_full = cd(store, &mut eval_at, h);
        let d_half = cd(store, &mut eval_at, h / two);
        store.values_mut(id)[i] = x0;
        let scale = one.max(d_full.abs()).max(d_half.abs());
        if (d_full - d_half).abs() > kink_tol * scale {
            continue; // nonsmooth point
        }
        let err = (analytic_grad[i] - d_half).abs() / one.max(analytic_grad[i].abs());
        worst = worst.max(err);
    }
    worst
}
