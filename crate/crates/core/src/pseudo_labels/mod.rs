//! Self-supervision signals for pre-training: candidate entity mining,
//! prompt templates, prompt embedding, soft pseudo-label distributions and
//! the on-disk cache that stores them.

mod cache;
mod detector;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::alignment::SoftLabelDistribution;
use crate::autograd::ParamStore;
use crate::encoders::{JointProjectionPair, MultimodalEncoder, PatchGrid};
use crate::error::{Error, Result};
use crate::tensor::{dot, softmax, Matrix};
use crate::tokenizer::Tokenizer;

pub use cache::{
    attach_labels, build_cache, read_cache, write_cache, CacheSample, LabelKind, PseudoLabelCacheEntry,
    CACHE_SCHEMA_VERSION,
};
pub use detector::{
    collect_proposals, patches_covered, propose_objects, FixtureDetector, ObjectDetector, ProposalReport,
    RandomCropDetector,
};

/// A token with the part-of-speech tag assigned by a [`PosTagger`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedToken {
    pub text: String,
    pub pos: String,
}

/// Tag used for nouns; only tokens carrying it are candidate entities.
pub const NOUN_TAG: &str = "NOUN";

pub trait PosTagger: Send + Sync {
    fn tag(&self, words: &[String]) -> Vec<TaggedToken>;
}

/// Looks each lowercased word up in a fixed word-to-tag table; unknown
/// words get `X`.
#[derive(Clone, Debug, Default)]
pub struct LexiconTagger {
    lexicon: BTreeMap<String, String>,
}

impl LexiconTagger {
    pub fn new(lexicon: BTreeMap<String, String>) -> Self {
        Self { lexicon }
    }

    /// `word<TAB>TAG` per line; blank lines and `#` comments are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lexicon = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, tag) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected `word<TAB>TAG`".into(),
            })?;
            lexicon.insert(word.trim().to_lowercase(), tag.trim().to_string());
        }
        Ok(Self { lexicon })
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, words: &[String]) -> Vec<TaggedToken> {
        words
            .iter()
            .map(|w| {
                let text = w.to_lowercase();
                let pos = self.lexicon.get(&text).cloned().unwrap_or_else(|| "X".into());
                TaggedToken { text, pos }
            })
            .collect()
    }
}

/// The `M` most frequent caption nouns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateEntitySet {
    pub entities: Vec<String>,
    pub source_counts: Vec<usize>,
}

impl CandidateEntitySet {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

/// Top-`m` nouns by frequency, ties broken lexicographically. Returns every
/// noun, with a warning, when fewer than `m` exist.
pub fn extract_candidate_entities(captions: &[Vec<TaggedToken>], m: usize) -> Result<CandidateEntitySet> {
    if m == 0 {
        return Err(Error::config("candidate entity count M must be at least 1"));
    }
    if captions.iter().all(Vec::is_empty) {
        return Err(Error::input("empty caption corpus"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for tok in captions.iter().flatten().filter(|t| t.pos == NOUN_TAG) {
        *counts.entry(tok.text.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    // BTreeMap order is lexicographic, and the sort is stable.
    ranked.sort_by_key(|b| std::cmp::Reverse(b.1));
    if ranked.len() < m {
        warn!("only {} distinct nouns in corpus, fewer than M = {m}", ranked.len());
    }
    ranked.truncate(m);
    if ranked.is_empty() {
        return Err(Error::input("caption corpus contains no nouns"));
    }
    Ok(CandidateEntitySet {
        entities: ranked.iter().map(|(w, _)| w.to_string()).collect(),
        source_counts: ranked.iter().map(|(_, c)| *c).collect(),
    })
}

/// Ordered relation names; the order defines label indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTagSet {
    tags: Vec<String>,
}

impl RelationTagSet {
    pub fn new(tags: Vec<String>) -> Result<Self> {
        if tags.is_empty() {
            return Err(Error::config("relation tag set is empty"));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = tags.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(Error::config(format!("duplicate relation tag `{dup}`")));
        }
        Ok(Self { tags })
    }

    /// One tag per line; surrounding whitespace is trimmed and blank lines
    /// are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    E1,
    E2,
    RA,
    RB,
    RC,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [Self::E1, Self::E2, Self::RA, Self::RB, Self::RC];

    pub fn kind(self) -> LabelKind {
        match self {
            Self::E1 | Self::E2 => LabelKind::Entity,
            Self::RA | Self::RB | Self::RC => LabelKind::Relation,
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for TemplateId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown template id `{s}`")))
    }
}

pub const PLACEHOLDER: &str = "{}";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    id: TemplateId,
    pattern: String,
}

impl PromptTemplate {
    pub fn new(id: TemplateId, pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        let n = pattern.matches(PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::config(format!(
                "template {id} has {n} placeholders, expected exactly one"
            )));
        }
        Ok(Self { id, pattern })
    }

    pub fn builtin(id: TemplateId) -> Self {
        let pattern = match id {
            TemplateId::E1 => "This is an image of {}",
            TemplateId::E2 => "An image of {} is shown here",
            TemplateId::RA => "The image shows the relation of {}",
            TemplateId::RB => "The relation of {} is shown in this image",
            TemplateId::RC => "The relation between the objects in the image is {}",
        };
        Self {
            id,
            pattern: pattern.to_string(),
        }
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn render(&self, item: &str) -> String {
        self.pattern.replacen(PLACEHOLDER, item, 1)
    }
}

pub fn render_prompts(items: &[String], template: &PromptTemplate) -> Vec<String> {
    items.iter().map(|i| template.render(i)).collect()
}

/// `softmax(sims / tau)`.
pub fn soft_label_from_similarities(sims: &[f64], tau: f64) -> Result<SoftLabelDistribution> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    if sims.is_empty() {
        return Err(Error::input("no prompts to score against"));
    }
    if sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::input("non-finite similarity"));
    }
    let scaled: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    SoftLabelDistribution::new(softmax(&scaled))
}

/// Scores a visual summary against each prompt's text summary in the joint
/// space and normalizes with temperature `tau`.
pub fn soft_label(
    store: &ParamStore,
    target_embedding: &[f64],
    prompt_embeddings: &[Vec<f64>],
    proj: &JointProjectionPair,
    tau: f64,
) -> Result<SoftLabelDistribution> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    if prompt_embeddings.is_empty() {
        return Err(Error::input("no prompts to score against"));
    }
    let sims = prompt_embeddings
        .iter()
        .map(|t| crate::encoders::joint_similarity(store, target_embedding, t, proj))
        .collect::<Result<Vec<_>>>()?;
    soft_label_from_similarities(&sims, tau)
}

/// Text-summary embedding of each prompt.
pub fn embed_prompts(
    encoder: &MultimodalEncoder,
    store: &ParamStore,
    tokenizer: &Tokenizer,
    prompts: &[String],
) -> Result<Vec<Vec<f64>>> {
    prompts
        .iter()
        .map(|p| Ok(encoder.encode_text(store, &tokenizer.tokenize(p)?)?.summary().to_vec()))
        .collect()
}

/// Resamples the bbox region of the patch grid onto a full grid of the same
/// size by nearest-neighbour lookup, so an object crop can be fed to the
/// visual encoder like a whole image.
pub fn crop_patches(image: &PatchGrid, bbox: &crate::alignment::BBox, side: usize) -> Result<PatchGrid> {
    let feats = image.features();
    if side == 0 || side * side != feats.rows() {
        return Err(Error::input(format!(
            "patch grid with {} patches is not a {side}x{side} square",
            feats.rows()
        )));
    }
    let [x0, y0, x1, y1] = bbox.0;
    let cell = |lo: f64, hi: f64, i: usize| {
        let centre = lo + (i as f64 + 0.5) / side as f64 * (hi - lo);
        ((centre * side as f64).floor() as usize).min(side - 1)
    };
    let mut out = Matrix::zeros(feats.rows(), feats.cols());
    for r in 0..side {
        let src_r = cell(y0, y1, r);
        for c in 0..side {
            let src_c = cell(x0, x1, c);
            out.row_mut(r * side + c)
                .copy_from_slice(feats.row(src_r * side + src_c));
        }
    }
    PatchGrid::new(out)
}

/// Pseudo-label generator. Holds prompt embeddings projected into the joint
/// space so each target costs one visual forward pass.
pub struct PseudoLabeler<'a> {
    encoder: &'a MultimodalEncoder,
    store: &'a ParamStore,
    grid_side: usize,
    tau: f64,
    entity_template: TemplateId,
    relation_template: TemplateId,
    entity_prompts: Vec<Vec<f64>>,
    relation_prompts: Vec<Vec<f64>>,
}

impl<'a> PseudoLabeler<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        encoder: &'a MultimodalEncoder,
        store: &'a ParamStore,
        tokenizer: &Tokenizer,
        entities: &CandidateEntitySet,
        relations: &RelationTagSet,
        entity_template: &PromptTemplate,
        relation_template: &PromptTemplate,
        tau: f64,
    ) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        if entity_template.id().kind() != LabelKind::Entity || relation_template.id().kind() != LabelKind::Relation {
            return Err(Error::config("template kinds do not match entity/relation roles"));
        }
        let grid_side = encoder
            .config()
            .grid_side()
            .ok_or_else(|| Error::config("patch count is not a perfect square"))?;
        let project = |texts: Vec<String>| -> Result<Vec<Vec<f64>>> {
            Ok(embed_prompts(encoder, store, tokenizer, &texts)?
                .iter()
                .map(|t| encoder.joint().project_text(store, t))
                .collect())
        };
        Ok(Self {
            encoder,
            store,
            grid_side,
            tau,
            entity_template: entity_template.id(),
            relation_template: relation_template.id(),
            entity_prompts: project(render_prompts(&entities.entities, entity_template))?,
            relation_prompts: project(render_prompts(relations.tags(), relation_template))?,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn entity_template(&self) -> TemplateId {
        self.entity_template
    }

    pub fn relation_template(&self) -> TemplateId {
        self.relation_template
    }

    fn label(&self, image: &PatchGrid, prompts: &[Vec<f64>]) -> Result<SoftLabelDistribution> {
        let v = self.encoder.encode_image(self.store, image)?;
        let zv = self.encoder.joint().project_visual(self.store, v.summary());
        let sims: Vec<f64> = prompts.iter().map(|zt| dot(&zv, zt)).collect();
        soft_label_from_similarities(&sims, self.tau)
    }

    /// Distribution over candidate entities for the object inside `bbox`.
    pub fn entity_label(&self, image: &PatchGrid, bbox: &crate::alignment::BBox) -> Result<SoftLabelDistribution> {
        let crop = crop_patches(image, bbox, self.grid_side)?;
        self.label(&crop, &self.entity_prompts)
    }

    /// Distribution over relation tags for the whole image.
    pub fn relation_label(&self, image: &PatchGrid) -> Result<SoftLabelDistribution> {
        self.label(image, &self.relation_prompts)
    }
}
