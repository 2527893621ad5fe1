//! Multimodal NER head: emissions from the fused token positions, a BIO
//! constrained linear-chain CRF, span extraction and span-level F1.

pub mod crf;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, ParamId, ParamStore, Tape, Var};
use crate::encoders::{EncoderConfig, Linear, MultimodalEncoder, PatchGrid, TokenSequence};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::metrics::{LabelScore, Prf};
use crate::tensor::Matrix;

pub use crf::{crf_log_prob, log_partition, sequence_score, viterbi_decode, CrfParams, TransitionMask};

/// `O` plus `B-c`/`I-c` for every entity type `c`. `O` is index 0; type `c`
/// owns `B = 1 + 2c` and `I = 2 + 2c`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    entity_types: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    Outside,
    Begin(usize),
    Inside(usize),
}

impl LabelSchema {
    pub const OUTSIDE: usize = 0;

    pub fn new(entity_types: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = entity_types.iter().collect();
        if unique.len() != entity_types.len() {
            return Err(Error::config("duplicate entity type"));
        }
        if entity_types
            .iter()
            .any(|t| t.is_empty() || t.contains(char::is_whitespace))
        {
            return Err(Error::config("entity type names must be non-empty without whitespace"));
        }
        Ok(Self { entity_types })
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn num_labels(&self) -> usize {
        2 * self.entity_types.len() + 1
    }

    pub fn tag(&self, index: usize) -> Tag {
        match index {
            0 => Tag::Outside,
            i if i % 2 == 1 => Tag::Begin((i - 1) / 2),
            i => Tag::Inside((i - 2) / 2),
        }
    }

    pub fn begin(&self, ty: usize) -> usize {
        1 + 2 * ty
    }

    pub fn inside(&self, ty: usize) -> usize {
        2 + 2 * ty
    }

    pub fn label_name(&self, index: usize) -> String {
        match self.tag(index) {
            Tag::Outside => "O".to_string(),
            Tag::Begin(c) => format!("B-{}", self.entity_types[c]),
            Tag::Inside(c) => format!("I-{}", self.entity_types[c]),
        }
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        if name == "O" {
            return Some(Self::OUTSIDE);
        }
        let (prefix, ty) = name.split_once('-')?;
        let c = self.entity_types.iter().position(|t| t == ty)?;
        match prefix {
            "B" => Some(self.begin(c)),
            "I" => Some(self.inside(c)),
            _ => None,
        }
    }

    /// `I-c` may only follow `B-c` or `I-c`, and may not start a sentence.
    pub fn transition_mask(&self) -> TransitionMask {
        let n = self.num_labels();
        let mut transition = vec![true; n * n];
        let mut start = vec![true; n];
        for next in 0..n {
            if let Tag::Inside(c) = self.tag(next) {
                start[next] = false;
                for prev in 0..n {
                    let ok = matches!(self.tag(prev), Tag::Begin(p) | Tag::Inside(p) if p == c);
                    transition[prev * n + next] = ok;
                }
            }
        }
        TransitionMask { transition, start }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BIOLabelSequence(pub Vec<usize>);

impl BIOLabelSequence {
    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// First position where an `I-c` lacks a `B-c`/`I-c` predecessor.
    pub fn first_violation(&self, schema: &LabelSchema) -> Option<usize> {
        let mut prev: Option<Tag> = None;
        for (i, &l) in self.0.iter().enumerate() {
            let t = schema.tag(l);
            if let Tag::Inside(c) = t {
                let ok = matches!(prev, Some(Tag::Begin(p)) | Some(Tag::Inside(p)) if p == c);
                if !ok {
                    return Some(i);
                }
            }
            prev = Some(t);
        }
        None
    }

    /// Rewrites every unsupported `I-c` to `B-c`, the same spans
    /// [`extract_spans`] would read from the unrepaired sequence.
    pub fn repaired(&self, schema: &LabelSchema) -> BIOLabelSequence {
        let mut out = self.0.clone();
        let mut prev: Option<Tag> = None;
        for l in out.iter_mut() {
            let t = schema.tag(*l);
            let t = match t {
                Tag::Inside(c) if !matches!(prev, Some(Tag::Begin(p)) | Some(Tag::Inside(p)) if p == c) => {
                    *l = schema.begin(c);
                    Tag::Begin(c)
                }
                other => other,
            };
            prev = Some(t);
        }
        BIOLabelSequence(out)
    }
}

/// Half-open token span `[start, end)` with its entity type.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

impl Span {
    pub fn new(start: usize, end: usize, entity_type: impl Into<String>) -> Self {
        Self {
            start,
            end,
            entity_type: entity_type.into(),
        }
    }
}

/// Maximal `B I*` runs; an `I-c` without a compatible predecessor opens a new span.
pub fn extract_spans(labels: &BIOLabelSequence, schema: &LabelSchema) -> BTreeSet<Span> {
    let mut spans = BTreeSet::new();
    let mut open: Option<(usize, usize)> = None;
    let close = |open: &mut Option<(usize, usize)>, end: usize, spans: &mut BTreeSet<Span>| {
        if let Some((start, c)) = open.take() {
            spans.insert(Span::new(start, end, schema.entity_types()[c].clone()));
        }
    };
    for (i, &l) in labels.0.iter().enumerate() {
        match schema.tag(l) {
            Tag::Outside => close(&mut open, i, &mut spans),
            Tag::Begin(c) => {
                close(&mut open, i, &mut spans);
                open = Some((i, c));
            }
            Tag::Inside(c) => match open {
                Some((_, oc)) if oc == c => {}
                _ => {
                    close(&mut open, i, &mut spans);
                    open = Some((i, c));
                }
            },
        }
    }
    close(&mut open, labels.0.len(), &mut spans);
    spans
}

/// Exact-match span precision/recall/F1.
pub fn span_f1(pred: &BTreeSet<Span>, gold: &BTreeSet<Span>) -> Prf {
    let tp = pred.intersection(gold).count();
    Prf::from_counts(tp, pred.len(), gold.len())
}

/// Corpus-level span scores accumulated over sentences, with a per-type table.
#[derive(Clone, Debug, Default)]
pub struct SpanCounter {
    per_type: BTreeMap<String, (usize, usize, usize)>,
}

impl SpanCounter {
    pub fn add(&mut self, pred: &BTreeSet<Span>, gold: &BTreeSet<Span>) {
        for s in pred {
            let e = self.per_type.entry(s.entity_type.clone()).or_default();
            e.1 += 1;
            if gold.contains(s) {
                e.0 += 1;
            }
        }
        for s in gold {
            self.per_type.entry(s.entity_type.clone()).or_default().2 += 1;
        }
    }

    pub fn overall(&self) -> Prf {
        let (tp, p, g) = self
            .per_type
            .values()
            .fold((0, 0, 0), |acc, v| (acc.0 + v.0, acc.1 + v.1, acc.2 + v.2));
        Prf::from_counts(tp, p, g)
    }

    pub fn per_label(&self) -> Vec<LabelScore> {
        self.per_type
            .iter()
            .map(|(label, &(tp, p, g))| LabelScore {
                label: label.clone(),
                true_positives: tp,
                predicted: p,
                gold: g,
                scores: Prf::from_counts(tp, p, g),
            })
            .collect()
    }
}

/// Mean negative log-likelihood over `(emissions, gold)` pairs.
pub fn mner_loss(batch: &[(Matrix, BIOLabelSequence)], params: &CrfParams) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let mut total = 0.0;
    for (em, gold) in batch {
        total -= crf_log_prob(em, params, gold.labels())?;
    }
    Ok(total / batch.len() as f64)
}

/// Records `-log p(gold)` as a tape node over emission and CRF parameter vars.
pub fn crf_nll_node(
    tape: &mut Tape,
    emissions: Var,
    transitions: Var,
    start: Var,
    end: Var,
    gold: &[usize],
    mask: Option<TransitionMask>,
) -> Result<Var> {
    let rule = crf::CrfNllRule {
        gold: gold.to_vec(),
        mask,
    };
    let inputs = [emissions, transitions, start, end];
    let vals: Vec<&Matrix> = inputs.iter().map(|&v| tape.value(v)).collect();
    let params = rule.params_from(&vals);
    let lp = crf_log_prob(vals[0], &params, gold)?;
    if !lp.is_finite() {
        return Err(Error::input(
            "gold label sequence violates the BIO transition constraints",
        ));
    }
    Ok(tape.custom(&inputs, Matrix::filled(1, 1, -lp), Box::new(rule)))
}

#[derive(Clone, Debug)]
pub struct NerExample {
    pub id: String,
    pub tokens: TokenSequence,
    pub patches: PatchGrid,
    pub labels: BIOLabelSequence,
}

/// Encoders + emission projection + CRF scores.
#[derive(Clone, Debug)]
pub struct NerModel {
    pub encoder: MultimodalEncoder,
    pub schema: LabelSchema,
    emission: Linear,
    transitions: ParamId,
    start: ParamId,
    end: ParamId,
    mask: TransitionMask,
}

impl NerModel {
    pub fn new(config: &EncoderConfig, schema: LabelSchema, store: &mut ParamStore) -> Result<Self> {
        let encoder = MultimodalEncoder::new(config, store, "enc.")?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
        let y = schema.num_labels();
        let emission = Linear::new(store, "ner.emission", config.hidden_dim, y, &mut rng);
        let transitions = store.add("ner.crf.transitions", Matrix::zeros(y, y));
        let start = store.add("ner.crf.start", Matrix::zeros(1, y));
        let end = store.add("ner.crf.end", Matrix::zeros(1, y));
        let mask = schema.transition_mask();
        Ok(Self {
            encoder,
            schema,
            emission,
            transitions,
            start,
            end,
            mask,
        })
    }

    /// Masked CRF parameters as currently stored.
    pub fn crf_params(&self, store: &ParamStore) -> CrfParams {
        CrfParams {
            transitions: store.get(self.transitions).clone(),
            start: store.get(self.start).data().to_vec(),
            end: store.get(self.end).data().to_vec(),
        }
        .masked(&self.mask)
    }

    fn emissions(&self, tape: &mut Tape, tokens: &TokenSequence, patches: &PatchGrid) -> Result<Var> {
        let text = self.encoder.text_forward(tape, tokens)?;
        let visual = self.encoder.visual_forward(tape, patches)?;
        let fused = self.encoder.fuse_forward(tape, text, visual)?;
        let token_rows = tape.slice_rows(fused, 1, tokens.len());
        Ok(self.emission.forward(tape, token_rows))
    }

    pub fn emission_scores(&self, store: &ParamStore, tokens: &TokenSequence, patches: &PatchGrid) -> Result<Matrix> {
        let mut tape = Tape::new(store);
        let e = self.emissions(&mut tape, tokens, patches)?;
        Ok(tape.value(e).clone())
    }

    pub fn predict(&self, store: &ParamStore, tokens: &TokenSequence, patches: &PatchGrid) -> Result<BIOLabelSequence> {
        let em = self.emission_scores(store, tokens, patches)?;
        Ok(BIOLabelSequence(viterbi_decode(&em, &self.crf_params(store))?))
    }

    /// Mean CRF negative log-likelihood of the batch and its parameter gradients.
    pub fn loss_and_grads(&self, store: &ParamStore, batch: &[NerExample], par: Parallelism) -> Result<(f64, Grads)> {
        if batch.is_empty() {
            return Err(Error::input("empty NER batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let per: Vec<Result<(f64, Grads)>> = par.map(batch, |ex| {
            if ex.labels.len() != ex.tokens.len() {
                return Err(Error::input(format!(
                    "{}: {} labels for {} tokens",
                    ex.id,
                    ex.labels.len(),
                    ex.tokens.len()
                )));
            }
            let mut tape = Tape::new(store);
            let em = self.emissions(&mut tape, &ex.tokens, &ex.patches)?;
            let t = tape.param(self.transitions);
            let s = tape.param(self.start);
            let e = tape.param(self.end);
            let nll = crf_nll_node(&mut tape, em, t, s, e, ex.labels.labels(), Some(self.mask.clone()))?;
            let value = tape.value(nll).get(0, 0);
            let tg = tape.backward(&[(nll, Matrix::filled(1, 1, scale))]);
            Ok((value, tape.param_grads(&tg)))
        });
        let mut total = 0.0;
        let mut grads = Grads::new(store.len());
        for r in per {
            let (v, g) = r?;
            total += v;
            grads.merge(&g);
        }
        Ok((total * scale, grads))
    }
}
