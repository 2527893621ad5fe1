//! Text, patch and fusion transformers plus the joint-space projection heads.
//!
//! All three encoders are pre-norm transformer stacks with learned positional
//! embeddings. The fusion encoder reads `concat(text, adapt(visual[1..]))`, so
//! its output has one summary position followed by `N` token positions and `K`
//! patch positions.

mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

pub use layers::{Block, LayerNorm, Linear, Stack};

/// Reserved rows appended to the token table for relation entity markers.
pub const MARKER_TOKENS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub num_patches: usize,
    pub patch_feature_dim: usize,
    pub hidden_dim: usize,
    pub visual_hidden_dim: usize,
    pub patch_proj_dim: usize,
    pub joint_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            max_text_len: 80,
            num_patches: 16,
            patch_feature_dim: 24,
            hidden_dim: 32,
            visual_hidden_dim: 32,
            patch_proj_dim: 16,
            joint_dim: 16,
            num_layers: 2,
            num_heads: 4,
            temperature: 0.07,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("num_patches", self.num_patches),
            ("patch_feature_dim", self.patch_feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("visual_hidden_dim", self.visual_hidden_dim),
            ("patch_proj_dim", self.patch_proj_dim),
            ("joint_dim", self.joint_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("encoder.{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "encoder.hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !self.visual_hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "encoder.visual_hidden_dim {} not divisible by num_heads {}",
                self.visual_hidden_dim, self.num_heads
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("encoder.temperature must be positive"));
        }
        Ok(())
    }

    /// Rows in the token embedding table, marker rows included.
    pub fn embedding_rows(&self) -> usize {
        self.vocab_size + MARKER_TOKENS
    }

    /// Token id of entity marker `i` (0..4: E1 start, E1 end, E2 start, E2 end).
    pub fn marker_id(&self, i: usize) -> usize {
        debug_assert!(i < MARKER_TOKENS);
        self.vocab_size + i
    }

    /// Side length of the square patch grid, if `num_patches` is a square.
    pub fn grid_side(&self) -> Option<usize> {
        let s = (self.num_patches as f64).sqrt().round() as usize;
        (s * s == self.num_patches).then_some(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::input("token sequence must contain at least one token"));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `K` patch feature vectors in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid(Matrix);

impl PatchGrid {
    pub fn new(patches: Matrix) -> Result<Self> {
        if patches.rows() == 0 || patches.cols() == 0 {
            return Err(Error::input("patch grid must be non-empty"));
        }
        if let Some(i) = patches.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "non-finite patch feature at patch {}, dim {}",
                i / patches.cols(),
                i % patches.cols()
            )));
        }
        Ok(Self(patches))
    }

    pub fn features(&self) -> &Matrix {
        &self.0
    }

    pub fn num_patches(&self) -> usize {
        self.0.rows()
    }
}

/// `(N+1) x d`; row 0 is the text summary.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingSequence {
    pub embeddings: Matrix,
}

impl TextEmbeddingSequence {
    pub fn summary(&self) -> &[f64] {
        self.embeddings.row(0)
    }

    pub fn num_tokens(&self) -> usize {
        self.embeddings.rows() - 1
    }
}

/// `(K+1) x d_v`; row 0 is the visual summary.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbeddingSequence {
    pub embeddings: Matrix,
}

impl VisualEmbeddingSequence {
    pub fn summary(&self) -> &[f64] {
        self.embeddings.row(0)
    }

    pub fn num_patches(&self) -> usize {
        self.embeddings.rows() - 1
    }
}

/// `(N+K+1) x d`: summary, then `N` token rows, then `K` patch rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbeddingSequence {
    pub embeddings: Matrix,
    num_tokens: usize,
    num_patches: usize,
}

impl FusedEmbeddingSequence {
    pub fn new(embeddings: Matrix, num_tokens: usize, num_patches: usize) -> Result<Self> {
        if embeddings.rows() != num_tokens + num_patches + 1 {
            return Err(Error::internal(format!(
                "fused sequence has {} rows, expected {}",
                embeddings.rows(),
                num_tokens + num_patches + 1
            )));
        }
        Ok(Self {
            embeddings,
            num_tokens,
            num_patches,
        })
    }

    pub fn summary(&self) -> &[f64] {
        self.embeddings.row(0)
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    /// Fused row of token `i` (0-based): `1 + i`.
    pub fn token_position(&self, i: usize) -> Option<usize> {
        (i < self.num_tokens).then_some(1 + i)
    }

    /// Fused row of patch `k` (1-based, as in `1..=K`): `N + k`.
    pub fn patch_position(&self, k: usize) -> Option<usize> {
        (1..=self.num_patches).contains(&k).then_some(self.num_tokens + k)
    }
}

/// Learned maps of the text and visual summaries into the joint space.
#[derive(Clone, Debug)]
pub struct JointProjectionPair {
    pub text_projection: Linear,
    pub visual_projection: Linear,
}

impl JointProjectionPair {
    pub fn project_text(&self, store: &ParamStore, t: &[f64]) -> Vec<f64> {
        self.text_projection.apply(store, t)
    }

    pub fn project_visual(&self, store: &ParamStore, v: &[f64]) -> Vec<f64> {
        self.visual_projection.apply(store, v)
    }
}

/// Joint-space similarity `proj_v(v) . proj_t(t)`.
pub fn joint_similarity(
    store: &ParamStore,
    v_summary: &[f64],
    t_summary: &[f64],
    proj: &JointProjectionPair,
) -> Result<f64> {
    if v_summary.len() != proj.visual_projection.in_dim || t_summary.len() != proj.text_projection.in_dim {
        return Err(Error::input("summary width does not match projection input"));
    }
    if !v_summary.iter().chain(t_summary).all(|x| x.is_finite()) {
        return Err(Error::input("non-finite summary passed to joint_similarity"));
    }
    let zv = proj.project_visual(store, v_summary);
    let zt = proj.project_text(store, t_summary);
    Ok(dot(&zv, &zt))
}

#[derive(Clone, Debug)]
struct TextEncoder {
    token_embed: ParamId,
    cls: ParamId,
    positions: ParamId,
    stack: Stack,
}

#[derive(Clone, Debug)]
struct VisualEncoder {
    patch_proj: Linear,
    patch_embed: Linear,
    cls: ParamId,
    positions: ParamId,
    stack: Stack,
}

#[derive(Clone, Debug)]
struct FusionEncoder {
    adapter: Linear,
    modality: ParamId,
    stack: Stack,
}

/// Text, visual and fusion encoders plus the joint projections, all backed
/// by one [`ParamStore`] under a common name prefix.
#[derive(Clone, Debug)]
pub struct MultimodalEncoder {
    config: EncoderConfig,
    text: TextEncoder,
    visual: VisualEncoder,
    fusion: FusionEncoder,
    joint: JointProjectionPair,
}

impl MultimodalEncoder {
    /// Registers all parameters under `prefix`; initialization is seeded by
    /// `config.seed` and independent of anything already in the store.
    pub fn new(config: &EncoderConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let dv = config.visual_hidden_dim;
        let rng = &mut rng;

        let text = TextEncoder {
            token_embed: store.add(
                format!("{prefix}text.token_embed"),
                Matrix::uniform_fan_in(config.embedding_rows(), d, d, rng),
            ),
            cls: store.add(format!("{prefix}text.cls"), Matrix::uniform_fan_in(1, d, d, rng)),
            positions: store.add(
                format!("{prefix}text.positions"),
                Matrix::uniform_fan_in(config.max_text_len + 1, d, d, rng),
            ),
            stack: Stack::new(
                store,
                &format!("{prefix}text.stack"),
                d,
                config.num_layers,
                config.num_heads,
                rng,
            ),
        };
        let visual = VisualEncoder {
            patch_proj: Linear::new(
                store,
                &format!("{prefix}visual.patch_proj"),
                config.patch_feature_dim,
                config.patch_proj_dim,
                rng,
            ),
            patch_embed: Linear::new(
                store,
                &format!("{prefix}visual.patch_embed"),
                config.patch_proj_dim,
                dv,
                rng,
            ),
            cls: store.add(format!("{prefix}visual.cls"), Matrix::uniform_fan_in(1, dv, dv, rng)),
            positions: store.add(
                format!("{prefix}visual.positions"),
                Matrix::uniform_fan_in(config.num_patches + 1, dv, dv, rng),
            ),
            stack: Stack::new(
                store,
                &format!("{prefix}visual.stack"),
                dv,
                config.num_layers,
                config.num_heads,
                rng,
            ),
        };
        let fusion = FusionEncoder {
            adapter: Linear::new(store, &format!("{prefix}fusion.adapter"), dv, d, rng),
            modality: store.add(format!("{prefix}fusion.modality"), Matrix::uniform_fan_in(2, d, d, rng)),
            stack: Stack::new(
                store,
                &format!("{prefix}fusion.stack"),
                d,
                config.num_layers,
                config.num_heads,
                rng,
            ),
        };
        let joint = JointProjectionPair {
            text_projection: Linear::new(store, &format!("{prefix}joint.text"), d, config.joint_dim, rng),
            visual_projection: Linear::new(store, &format!("{prefix}joint.visual"), dv, config.joint_dim, rng),
        };
        Ok(Self {
            config: config.clone(),
            text,
            visual,
            fusion,
            joint,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn joint(&self) -> &JointProjectionPair {
        &self.joint
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.len() > self.config.max_text_len {
            return Err(Error::input(format!(
                "sequence of {} tokens exceeds max_text_len {}",
                tokens.len(),
                self.config.max_text_len
            )));
        }
        let rows = self.config.embedding_rows();
        if let Some((pos, id)) = tokens.ids().iter().enumerate().find(|(_, &id)| id >= rows) {
            return Err(Error::input(format!(
                "token id {id} at position {pos} outside vocabulary of {rows}"
            )));
        }
        Ok(())
    }

    fn check_patches(&self, patches: &PatchGrid) -> Result<()> {
        let f = patches.features();
        if f.rows() != self.config.num_patches {
            return Err(Error::input(format!(
                "expected {} patches, got {}",
                self.config.num_patches,
                f.rows()
            )));
        }
        if f.cols() != self.config.patch_feature_dim {
            return Err(Error::input(format!(
                "expected patch dimension {}, got {}",
                self.config.patch_feature_dim,
                f.cols()
            )));
        }
        Ok(())
    }

    /// `(N+1) x d` text embeddings on the tape.
    pub fn text_forward(&self, tape: &mut Tape, tokens: &TokenSequence) -> Result<Var> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let table = tape.param(self.text.token_embed);
        let tok = tape.gather_rows(table, tokens.ids());
        let cls = tape.param(self.text.cls);
        let x = tape.concat_rows(&[cls, tok]);
        let pos_table = tape.param(self.text.positions);
        let pos_ids: Vec<usize> = (0..=n).collect();
        let pos = tape.gather_rows(pos_table, &pos_ids);
        let x = tape.add(x, pos);
        Ok(self.text.stack.forward(tape, x))
    }

    /// `(K+1) x d_v` visual embeddings on the tape.
    pub fn visual_forward(&self, tape: &mut Tape, patches: &PatchGrid) -> Result<Var> {
        self.check_patches(patches)?;
        let raw = tape.leaf(patches.features().clone());
        let m = self.visual.patch_proj.forward(tape, raw);
        let h = self.visual.patch_embed.forward(tape, m);
        let cls = tape.param(self.visual.cls);
        let x = tape.concat_rows(&[cls, h]);
        let pos = tape.param(self.visual.positions);
        let x = tape.add(x, pos);
        Ok(self.visual.stack.forward(tape, x))
    }

    /// Fuses `(N+1) x d` text and `(K+1) x d_v` visual embeddings into
    /// `(N+K+1) x d`. The visual summary row is dropped; the text summary
    /// row seeds the fused summary.
    pub fn fuse_forward(&self, tape: &mut Tape, text: Var, visual: Var) -> Result<Var> {
        let (t_rows, t_cols) = tape.value(text).shape();
        let (v_rows, v_cols) = tape.value(visual).shape();
        if t_cols != self.config.hidden_dim || v_cols != self.config.visual_hidden_dim || v_rows < 2 {
            return Err(Error::internal(format!(
                "fusion inputs {t_rows}x{t_cols} and {v_rows}x{v_cols} do not match the encoder config"
            )));
        }
        let k = v_rows - 1;
        let body = tape.slice_rows(visual, 1, k);
        let adapted = self.fusion.adapter.forward(tape, body);
        if tape.value(adapted).cols() != t_cols {
            return Err(Error::internal("adapter output width differs from text width"));
        }
        let x = tape.concat_rows(&[text, adapted]);
        let modality_table = tape.param(self.fusion.modality);
        let ids: Vec<usize> = std::iter::repeat_n(0, t_rows)
            .chain(std::iter::repeat_n(1, k))
            .collect();
        let modality = tape.gather_rows(modality_table, &ids);
        let x = tape.add(x, modality);
        Ok(self.fusion.stack.forward(tape, x))
    }

    /// Joint-space projections of the two summaries: `(1 x joint, 1 x joint)`.
    pub fn project_summaries(&self, tape: &mut Tape, text: Var, visual: Var) -> (Var, Var) {
        let t = tape.slice_rows(text, 0, 1);
        let v = tape.slice_rows(visual, 0, 1);
        let zt = self.joint.text_projection.forward(tape, t);
        let zv = self.joint.visual_projection.forward(tape, v);
        (zv, zt)
    }

    pub fn encode_text(&self, store: &ParamStore, tokens: &TokenSequence) -> Result<TextEmbeddingSequence> {
        let mut tape = Tape::new(store);
        let out = self.text_forward(&mut tape, tokens)?;
        Ok(TextEmbeddingSequence {
            embeddings: tape.value(out).clone(),
        })
    }

    pub fn encode_image(&self, store: &ParamStore, patches: &PatchGrid) -> Result<VisualEmbeddingSequence> {
        let mut tape = Tape::new(store);
        let out = self.visual_forward(&mut tape, patches)?;
        Ok(VisualEmbeddingSequence {
            embeddings: tape.value(out).clone(),
        })
    }

    pub fn fuse_multimodal(
        &self,
        store: &ParamStore,
        text: &TextEmbeddingSequence,
        visual: &VisualEmbeddingSequence,
    ) -> Result<FusedEmbeddingSequence> {
        let mut tape = Tape::new(store);
        let t = tape.leaf(text.embeddings.clone());
        let v = tape.leaf(visual.embeddings.clone());
        let out = self.fuse_forward(&mut tape, t, v)?;
        FusedEmbeddingSequence::new(tape.value(out).clone(), text.num_tokens(), visual.num_patches())
    }
}
