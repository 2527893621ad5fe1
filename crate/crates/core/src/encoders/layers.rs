use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Matrix;

/// Affine map `x W + b` applied row-wise.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Matrix::uniform_fan_in(in_dim, out_dim, in_dim, rng),
        );
        let bias = store.add(format!("{name}.bias"), Matrix::uniform_fan_in(1, out_dim, in_dim, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }

    /// Single-vector evaluation outside any tape.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let xm = Matrix::row_vector(x.to_vec());
        let mut out = xm.matmul(store.get(self.weight));
        out.add_assign(store.get(self.bias));
        out.into_vec()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0));
        let beta = store.add(format!("{name}.beta"), Matrix::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Pre-norm transformer block: self-attention then a GELU feed-forward,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct Block {
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    num_heads: usize,
    dim: usize,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, num_heads: usize, rng: &mut R) -> Self {
        let ff = 4 * dim;
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            query: Linear::new(store, &format!("{name}.attn.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.attn.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.attn.value"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), dim, dim, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff_in: Linear::new(store, &format!("{name}.ff.in"), dim, ff, rng),
            ff_out: Linear::new(store, &format!("{name}.ff.out"), ff, dim, rng),
            num_heads,
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.ln_attn.forward(tape, x);
        let q = self.query.forward(tape, h);
        let k = self.key.forward(tape, h);
        let v = self.value.forward(tape, h);
        let head_dim = self.dim / self.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        for i in 0..self.num_heads {
            let qh = tape.slice_cols(q, i * head_dim, head_dim);
            let kh = tape.slice_cols(k, i * head_dim, head_dim);
            let vh = tape.slice_cols(v, i * head_dim, head_dim);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let merged = tape.concat_cols(&heads);
        let attn_out = self.out.forward(tape, merged);
        let x = tape.add(x, attn_out);

        let h = self.ln_ff.forward(tape, x);
        let h = self.ff_in.forward(tape, h);
        let h = tape.gelu(h);
        let h = self.ff_out.forward(tape, h);
        tape.add(x, h)
    }
}

/// Blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Stack {
    blocks: Vec<Block>,
    final_ln: LayerNorm,
}

impl Stack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        num_layers: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..num_layers)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), dim, num_heads, rng))
            .collect();
        Self {
            blocks,
            final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var) -> Var {
        for b in &self.blocks {
            x = b.forward(tape, x);
        }
        self.final_ln.forward(tape, x)
    }
}
