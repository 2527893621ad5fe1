//! A small reverse-mode tape over [`Matrix`] values.
//!
//! One [`Tape`] records a single forward pass. Parameters are borrowed from a
//! [`ParamStore`] rather than copied, so a tape is cheap to build per sample
//! and many tapes can run against one frozen store from different threads.
//! Loss functions with hand-derived gradients plug in through [`Backward`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable parameters. Insertion order is the canonical order for
/// checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name; parameter layout is fixed at construction.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Gradients for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn new(num_params: usize) -> Self {
        Self {
            slots: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Matrix) {
        match &mut self.slots[id.0] {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    /// Adds `other` into `self`; slot order is fixed, so the sum is
    /// deterministic for a fixed sequence of merges.
    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Hand-written backward rule for a custom node.
pub trait Backward: Send + Sync {
    /// Given the node's inputs, its forward value and the upstream gradient,
    /// return one gradient per input (same shapes as the inputs).
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Matrix>;
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Gelu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    Custom(Vec<Var>, Box<dyn Backward>),
}

enum Value<'a> {
    Owned(Matrix),
    Borrowed(&'a Matrix),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }

    /// A constant or an input whose gradient the caller may want to read back.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter node; repeated requests for the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(self.store.get(id)),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let r = r.data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let p = crate::tensor::softmax(x.row(r));
            value.row_mut(r).copy_from_slice(&p);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        assert_eq!(g.len(), cols);
        let mut normalized = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let n = (row[c] - mean) * is;
                normalized.set(r, c, n);
                value.set(r, c, n * g[c] + b[c]);
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            value.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows(), "slice_rows out of range");
        let c = x.cols();
        let value = Matrix::from_vec(len, c, x.data()[start * c..(start + len) * c].to_vec());
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                value.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Row lookup; indices may repeat (gradients scatter-add).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(x.row(i));
        }
        self.push(
            Matrix::from_vec(indices.len(), c, data),
            Op::Gather(a, indices.to_vec()),
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = x.column_sums().scaled(1.0 / x.rows() as f64);
        self.push(value, Op::MeanRows(a))
    }

    /// Records a node whose value was computed by the caller and whose
    /// gradient is supplied by `rule`.
    pub fn custom(&mut self, inputs: &[Var], value: Matrix, rule: Box<dyn Backward>) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), rule))
    }

    /// Runs the reverse sweep from the given seed gradients.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> TapeGrads {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed gradient shape mismatch");
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        TapeGrads { grads }
    }

    /// Backward from a `1 x 1` scalar with unit seed.
    pub fn backward_scalar(&self, loss: Var) -> TapeGrads {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        self.backward(&[(loss, Matrix::filled(1, 1, 1.0))])
    }

    /// Collects parameter gradients into a [`Grads`] sized for the store.
    pub fn param_grads(&self, tg: &TapeGrads) -> Grads {
        let mut out = Grads::new(self.store.len());
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (id, var) in ids {
            if let Some(g) = tg.wrt(*var) {
                out.accumulate(*id, g);
            }
        }
        out
    }

    fn backward_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                accumulate(grads, *a, g.matmul_t(bv));
                accumulate(grads, *b, av.t_matmul(g));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, g.column_sums());
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scaled(*s)),
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    let inner = GELU_C * (xv + 0.044_715 * xv * xv * xv);
                    let t = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * 0.044_715 * xv * xv);
                    *dv *= 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner;
                }
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let y = self.value(Var(idx));
                let mut d = g.clone();
                for (dv, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *dv *= 1.0 - yv * yv;
                }
                accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(Var(idx));
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let s: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = yr[c] * (gr[c] - s);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let (rows, cols) = normalized.shape();
                let mut dx = Matrix::zeros(rows, cols);
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                for r in 0..rows {
                    let gr = g.row(r);
                    let nr = normalized.row(r);
                    let mut dn = vec![0.0; cols];
                    for c in 0..cols {
                        dgamma.data_mut()[c] += gr[c] * nr[c];
                        dbeta.data_mut()[c] += gr[c];
                        dn[c] = gr[c] * gv[c];
                    }
                    let mean_dn = dn.iter().sum::<f64>() / cols as f64;
                    let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for (c, v) in dx.row_mut(r).iter_mut().enumerate() {
                        *v = inv_std[r] * (dn[c] - mean_dn - nr[c] * mean_dn_n);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut d = Matrix::zeros(rows, cols);
                let w = g.cols();
                for r in 0..rows {
                    d.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut d = Matrix::zeros(rows, cols);
                d.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, w) = self.value(p).shape();
                    let mut d = Matrix::zeros(rows, w);
                    for r in 0..rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    accumulate(grads, p, d);
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let d = Matrix::from_vec(rows, cols, g.data()[off * cols..(off + rows) * cols].to_vec());
                    off += rows;
                    accumulate(grads, p, d);
                }
            }
            Op::Gather(a, indices) => {
                let (rows, cols) = self.value(*a).shape();
                let mut d = Matrix::zeros(rows, cols);
                for (k, &i) in indices.iter().enumerate() {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *dv += gv;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.value(*a).shape();
                let mut d = Matrix::zeros(rows, cols);
                let inv = 1.0 / rows as f64;
                for r in 0..rows {
                    for (dv, gv) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *dv = gv * inv;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Custom(inputs, rule) => {
                let in_vals: Vec<&Matrix> = inputs.iter().map(|&v| self.value(v)).collect();
                let out = self.value(Var(idx));
                let gs = rule.backward(&in_vals, out, g);
                assert_eq!(gs.len(), inputs.len(), "custom backward arity mismatch");
                for (&v, d) in inputs.iter().zip(gs) {
                    accumulate(grads, v, d);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse sweep: one optional gradient per tape node.
pub struct TapeGrads {
    grads: Vec<Option<Matrix>>,
}

impl TapeGrads {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + h;
            let fp = f(&xp);
            xp.data_mut()[i] = orig - h;
            let fm = f(&xp);
            xp.data_mut()[i] = orig;
            out.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::uniform_fan_in(rows, cols, 1, &mut rng)
    }

    /// Scalar head used by every op check: sum of entries weighted by a fixed pattern.
    fn weighted_sum(tape: &mut Tape, v: Var) -> Var {
        let (r, c) = tape.value(v).shape();
        let w = Matrix::from_vec(r * c, 1, (0..r * c).map(|i| 0.3 + 0.1 * i as f64).collect());
        let flat = Matrix::from_vec(1, r * c, tape.value(v).data().to_vec());
        // Flatten through a custom node so the head is a plain dot product.
        struct Flatten(usize, usize);
        impl Backward for Flatten {
            fn backward(&self, _: &[&Matrix], _: &Matrix, g: &Matrix) -> Vec<Matrix> {
                vec![Matrix::from_vec(self.0, self.1, g.data().to_vec())]
            }
        }
        let f = tape.custom(&[v], flat, Box::new(Flatten(r, c)));
        let wv = tape.leaf(w);
        tape.matmul(f, wv)
    }

    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x: Matrix) {
        let store = ParamStore::new();
        let eval = |xm: &Matrix| {
            let mut t = Tape::new(&store);
            let xv = t.leaf(xm.clone());
            let y = build(&mut t, xv);
            let s = weighted_sum(&mut t, y);
            t.value(s).get(0, 0)
        };
        let mut t = Tape::new(&store);
        let xv = t.leaf(x.clone());
        let y = build(&mut t, xv);
        let s = weighted_sum(&mut t, y);
        let tg = t.backward_scalar(s);
        let analytic = tg.wrt(xv).unwrap().clone();
        let numeric = numeric_grad(&x, eval);
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-7, "gradient mismatch {err}: {analytic:?} vs {numeric:?}");
    }

    #[test]
    fn elementwise_and_shape_ops_match_finite_differences() {
        let x = random(3, 4, 1);
        check_unary(|t, v| t.gelu(v), x.clone());
        check_unary(|t, v| t.tanh(v), x.clone());
        check_unary(|t, v| t.softmax_rows(v), x.clone());
        check_unary(|t, v| t.transpose(v), x.clone());
        check_unary(|t, v| t.scale(v, -2.5), x.clone());
        check_unary(|t, v| t.mean_rows(v), x.clone());
        check_unary(|t, v| t.slice_cols(v, 1, 2), x.clone());
        check_unary(|t, v| t.slice_rows(v, 1, 2), x.clone());
        check_unary(|t, v| t.gather_rows(v, &[2, 0, 2]), x.clone());
        check_unary(
            |t, v| {
                let a = t.slice_cols(v, 0, 2);
                let b = t.slice_cols(v, 2, 2);
                t.concat_rows(&[b, a])
            },
            x.clone(),
        );
        check_unary(
            |t, v| {
                let a = t.slice_rows(v, 0, 1);
                let b = t.slice_rows(v, 1, 2);
                let c = t.concat_rows(&[b, a]);
                t.concat_cols(&[c, v])
            },
            x.clone(),
        );
        check_unary(
            |t, v| {
                let vt = t.transpose(v);
                let p = t.matmul(v, vt);
                t.add(p, p)
            },
            x,
        );
    }

    #[test]
    fn layer_norm_and_params_match_finite_differences() {
        let mut store = ParamStore::new();
        let gamma = store.add("g", random(1, 5, 2));
        let beta = store.add("b", random(1, 5, 3));
        let w = store.add("w", random(5, 5, 4));
        let x = random(3, 5, 5);

        let forward = |store: &ParamStore, xm: &Matrix| {
            let mut t = Tape::new(store);
            let xv = t.leaf(xm.clone());
            let wv = t.param(w);
            let h = t.matmul(xv, wv);
            let g = t.param(gamma);
            let b = t.param(beta);
            let y = t.layer_norm(h, g, b);
            let y = t.add_row(y, b);
            let s = weighted_sum(&mut t, y);
            (t.value(s).get(0, 0), {
                let tg = t.backward_scalar(s);
                (t.param_grads(&tg), tg.wrt(xv).unwrap().clone())
            })
        };
        let (_, (pg, xg)) = forward(&store, &x);
        let numeric_x = numeric_grad(&x, |xm| forward(&store, xm).0);
        assert!(xg.max_abs_diff(&numeric_x) < 1e-7);

        for id in [gamma, beta, w] {
            let base = store.get(id).clone();
            let numeric = numeric_grad(&base, |pm| {
                let mut s2 = store.clone();
                *s2.get_mut(id) = pm.clone();
                forward(&s2, &x).0
            });
            let err = pg.get(id).unwrap().max_abs_diff(&numeric);
            assert!(err < 1e-7, "param {} err {err}", store.name(id));
        }
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::filled(1, 1, 3.0));
        let mut t = Tape::new(&store);
        let a = t.param(p);
        let b = t.param(p);
        assert_eq!(a, b);
        let s = t.matmul(a, b);
        let tg = t.backward_scalar(s);
        let g = t.param_grads(&tg);
        assert_eq!(g.get(p).unwrap().get(0, 0), 6.0);
    }
}
