//! Multimodal relation extraction head.
//!
//! The head and tail spans are wrapped in four reserved marker tokens; the
//! relation representation concatenates the fused embeddings at the two
//! start markers and feeds a linear classifier.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{argmax, soft_cross_entropy, soft_cross_entropy_node};
use crate::autograd::{Grads, ParamStore, Tape, Var};
use crate::encoders::{EncoderConfig, FusedEmbeddingSequence, Linear, MultimodalEncoder, PatchGrid, TokenSequence};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::metrics::{LabelScore, Prf};
use crate::tensor::Matrix;

/// Marker slots, in the order of [`EncoderConfig::marker_id`].
pub const E1_START: usize = 0;
pub const E1_END: usize = 1;
pub const E2_START: usize = 2;
pub const E2_END: usize = 3;

#[derive(Clone, Debug)]
pub struct RelationInstance {
    pub id: String,
    pub tokens: TokenSequence,
    /// Half-open `[start, end)` token range of the head entity.
    pub head: (usize, usize),
    pub tail: (usize, usize),
    pub patches: PatchGrid,
    pub relation: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MarkedSequence {
    pub tokens: TokenSequence,
    /// Indices of `[E1_start]` and `[E2_start]` in `tokens`.
    pub marker_positions: (usize, usize),
}

fn check_span(name: &str, span: (usize, usize), n: usize) -> Result<()> {
    if span.1 <= span.0 || span.1 > n {
        return Err(Error::input(format!(
            "{name} span [{}, {}) invalid for {n} tokens",
            span.0, span.1
        )));
    }
    Ok(())
}

/// Wraps head and tail spans in entity markers.
pub fn inject_entity_markers(
    tokens: &TokenSequence,
    head: (usize, usize),
    tail: (usize, usize),
    config: &EncoderConfig,
) -> Result<MarkedSequence> {
    let n = tokens.len();
    check_span("head", head, n)?;
    check_span("tail", tail, n)?;
    if head.0 < tail.1 && tail.0 < head.1 {
        return Err(Error::input(format!(
            "head [{}, {}) and tail [{}, {}) overlap",
            head.0, head.1, tail.0, tail.1
        )));
    }
    if n + 4 > config.max_text_len {
        return Err(Error::input(format!(
            "marked sequence of {} tokens exceeds max_text_len {}; truncate upstream",
            n + 4,
            config.max_text_len
        )));
    }
    // (insert position, opens a span, marker slot). At a shared position an
    // end marker must precede a start marker in the output, so starts are
    // inserted first when walking right to left.
    let mut inserts = [
        (head.0, true, E1_START),
        (head.1, false, E1_END),
        (tail.0, true, E2_START),
        (tail.1, false, E2_END),
    ];
    inserts.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)));
    let mut ids = tokens.ids().to_vec();
    for (pos, _, slot) in inserts {
        ids.insert(pos, config.marker_id(slot));
    }
    let find = |slot| {
        ids.iter()
            .position(|&t| t == config.marker_id(slot))
            .expect("marker inserted")
    };
    let positions = (find(E1_START), find(E2_START));
    Ok(MarkedSequence {
        tokens: TokenSequence::new(ids)?,
        marker_positions: positions,
    })
}

/// Drops the four marker tokens.
pub fn strip_markers(marked: &TokenSequence, config: &EncoderConfig) -> Vec<usize> {
    marked
        .ids()
        .iter()
        .copied()
        .filter(|&t| t < config.vocab_size)
        .collect()
}

/// `concat(fused[E1_start], fused[E2_start])`, with marker positions given as
/// token indices of the marked sequence.
pub fn relation_representation(fused: &FusedEmbeddingSequence, marker_positions: (usize, usize)) -> Result<Vec<f64>> {
    let (a, b) = marker_positions;
    let pa = fused
        .token_position(a)
        .ok_or_else(|| Error::internal(format!("marker position {a} outside the text region")))?;
    let pb = fused
        .token_position(b)
        .ok_or_else(|| Error::internal(format!("marker position {b} outside the text region")))?;
    let mut out = fused.embeddings.row(pa).to_vec();
    out.extend_from_slice(fused.embeddings.row(pb));
    Ok(out)
}

/// Mean categorical cross-entropy of `B x N_r` logits against gold indices.
pub fn mre_loss(logits: &Matrix, gold: &[usize]) -> Result<f64> {
    if logits.rows() != gold.len() || gold.is_empty() {
        return Err(Error::input(format!(
            "{} logit rows for {} gold labels",
            logits.rows(),
            gold.len()
        )));
    }
    let mut total = 0.0;
    for (i, &g) in gold.iter().enumerate() {
        if g >= logits.cols() {
            return Err(Error::input(format!("gold relation {g} outside 0..{}", logits.cols())));
        }
        let mut onehot = vec![0.0; logits.cols()];
        onehot[g] = 1.0;
        total += soft_cross_entropy(logits.row(i), &onehot);
    }
    Ok(total / gold.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationReport {
    pub overall: Prf,
    /// One row per label observed in gold or predictions.
    pub per_label: Vec<LabelScore>,
}

/// Micro P/R/F1. With a declared negative label, predictions and golds of
/// that label are excluded from the counts; otherwise micro-F1 is accuracy.
pub fn relation_metrics(
    preds: &[usize],
    golds: &[usize],
    labels: &[String],
    negative: Option<usize>,
) -> Result<RelationReport> {
    if preds.len() != golds.len() {
        return Err(Error::input(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    let name = |i: usize| labels.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
    let mut table: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for (&p, &g) in preds.iter().zip(golds) {
        table.entry(p).or_default().1 += 1;
        table.entry(g).or_default().2 += 1;
        if p == g {
            table.entry(g).or_default().0 += 1;
        }
    }
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (&l, &(t, p, g)) in &table {
        if Some(l) != negative {
            tp += t;
            np += p;
            ng += g;
        }
    }
    let per_label = table
        .iter()
        .map(|(&l, &(t, p, g))| LabelScore {
            label: name(l),
            true_positives: t,
            predicted: p,
            gold: g,
            scores: Prf::from_counts(t, p, g),
        })
        .collect();
    Ok(RelationReport {
        overall: Prf::from_counts(tp, np, ng),
        per_label,
    })
}

/// One relation prediction with the gap between the top two logits.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationPrediction {
    pub relation: usize,
    pub logit_margin: f64,
}

#[derive(Clone, Debug)]
pub struct RelationModel {
    pub encoder: MultimodalEncoder,
    pub labels: Vec<String>,
    classifier: Linear,
}

impl RelationModel {
    pub fn new(config: &EncoderConfig, labels: Vec<String>, store: &mut ParamStore) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::config("relation label set is empty"));
        }
        let encoder = MultimodalEncoder::new(config, store, "enc.")?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0003);
        let classifier = Linear::new(store, "re.classifier", 2 * config.hidden_dim, labels.len(), &mut rng);
        Ok(Self {
            encoder,
            labels,
            classifier,
        })
    }

    fn logits(&self, tape: &mut Tape, inst: &RelationInstance) -> Result<Var> {
        let marked = inject_entity_markers(&inst.tokens, inst.head, inst.tail, self.encoder.config())?;
        let text = self.encoder.text_forward(tape, &marked.tokens)?;
        let visual = self.encoder.visual_forward(tape, &inst.patches)?;
        let fused = self.encoder.fuse_forward(tape, text, visual)?;
        let (a, b) = marked.marker_positions;
        let rows = tape.gather_rows(fused, &[1 + a, 1 + b]);
        let e1 = tape.slice_rows(rows, 0, 1);
        let e2 = tape.slice_rows(rows, 1, 1);
        let rel = tape.concat_cols(&[e1, e2]);
        Ok(self.classifier.forward(tape, rel))
    }

    pub fn predict(&self, store: &ParamStore, inst: &RelationInstance) -> Result<RelationPrediction> {
        let mut tape = Tape::new(store);
        let l = self.logits(&mut tape, inst)?;
        let logits = tape.value(l).data();
        let best = argmax(logits);
        let runner_up = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != best)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let margin = if runner_up.is_finite() {
            logits[best] - runner_up
        } else {
            0.0
        };
        Ok(RelationPrediction {
            relation: best,
            logit_margin: margin,
        })
    }

    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        batch: &[RelationInstance],
        par: Parallelism,
    ) -> Result<(f64, Grads)> {
        if batch.is_empty() {
            return Err(Error::input("empty RE batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let per: Vec<Result<(f64, Grads)>> = par.map(batch, |inst| {
            if inst.relation >= self.labels.len() {
                return Err(Error::input(format!(
                    "{}: relation index {} outside 0..{}",
                    inst.id,
                    inst.relation,
                    self.labels.len()
                )));
            }
            let mut tape = Tape::new(store);
            let logits = self.logits(&mut tape, inst)?;
            let mut onehot = vec![0.0; self.labels.len()];
            onehot[inst.relation] = 1.0;
            let loss = soft_cross_entropy_node(&mut tape, logits, &onehot);
            let v = tape.value(loss).get(0, 0);
            let tg = tape.backward(&[(loss, Matrix::filled(1, 1, scale))]);
            Ok((v, tape.param_grads(&tg)))
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

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 100,
            max_text_len: 12,
            ..EncoderConfig::default()
        }
    }

    fn toks(ids: &[usize]) -> TokenSequence {
        TokenSequence::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn marker_injection_examples() {
        let c = cfg();
        let [e1s, e1e, e2s, e2e] = [0, 1, 2, 3].map(|i| c.marker_id(i));
        let (a, b, cc, d) = (10, 11, 12, 13);
        let m = inject_entity_markers(&toks(&[a, b, cc, d]), (0, 1), (2, 3), &c).unwrap();
        assert_eq!(m.tokens.ids(), &[e1s, a, e1e, b, e2s, cc, e2e, d]);
        assert_eq!(m.marker_positions, (0, 4));

        // tail before head in the text
        let m = inject_entity_markers(&toks(&[a, b, cc, d]), (2, 3), (0, 1), &c).unwrap();
        assert_eq!(m.tokens.ids(), &[e2s, a, e2e, b, e1s, cc, e1e, d]);
        assert_eq!(m.marker_positions, (4, 0));

        // adjacent spans
        let m = inject_entity_markers(&toks(&[a, b, cc]), (0, 1), (1, 2), &c).unwrap();
        assert_eq!(m.tokens.ids(), &[e1s, a, e1e, e2s, b, e2e, cc]);
        let m = inject_entity_markers(&toks(&[a, b, cc]), (1, 2), (0, 1), &c).unwrap();
        assert_eq!(m.tokens.ids(), &[e2s, a, e2e, e1s, b, e1e, cc]);
    }

    #[test]
    fn marker_injection_errors() {
        let c = cfg();
        let t = toks(&[1, 2, 3, 4]);
        assert!(inject_entity_markers(&t, (0, 2), (1, 3), &c).is_err());
        assert!(inject_entity_markers(&t, (0, 0), (1, 3), &c).is_err());
        assert!(inject_entity_markers(&t, (0, 1), (3, 5), &c).is_err());
        let long = toks(&[1; 9]);
        let err = inject_entity_markers(&long, (0, 1), (2, 3), &c).unwrap_err();
        assert!(err.to_string().contains("truncate"), "{err}");
    }

    #[test]
    fn representation_examples() {
        // N = 3 marked tokens, K = 1 patch, d = 2
        let emb = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 2.0],
            vec![9.0, 9.0],
            vec![3.0, 4.0],
            vec![7.0, 7.0],
        ]);
        let fused = FusedEmbeddingSequence::new(emb, 3, 1).unwrap();
        assert_eq!(
            relation_representation(&fused, (0, 2)).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(
            relation_representation(&fused, (2, 0)).unwrap(),
            vec![3.0, 4.0, 1.0, 2.0]
        );
        assert!(matches!(
            relation_representation(&fused, (0, 3)),
            Err(Error::Internal(_))
        ));
        let zero = FusedEmbeddingSequence::new(Matrix::zeros(5, 2), 3, 1).unwrap();
        assert_eq!(relation_representation(&zero, (0, 1)).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn loss_examples() {
        let peaked = Matrix::from_rows(&[vec![100.0, -100.0], vec![-100.0, 100.0]]);
        assert!(mre_loss(&peaked, &[0, 1]).unwrap() < 1e-12);
        let v = mre_loss(&Matrix::zeros(1, 23), &[5]).unwrap();
        assert!((v - 23f64.ln()).abs() < 1e-12);
        assert!((v - 3.135_494).abs() < 1e-6);
        let v = mre_loss(&Matrix::row_vector(vec![2.0, 0.0]), &[0]).unwrap();
        assert!((v - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!(mre_loss(&Matrix::zeros(1, 2), &[2]).is_err());
    }

    #[test]
    fn metric_examples() {
        let labels: Vec<String> = ["a", "b", "c", "none"].iter().map(|s| s.to_string()).collect();
        let r = relation_metrics(&[0, 1, 2], &[0, 1, 2], &labels, None).unwrap();
        assert_eq!(r.overall.f1, 1.0);
        let r = relation_metrics(&[1, 2, 0], &[0, 1, 2], &labels, None).unwrap();
        assert_eq!(r.overall, Prf::default());
        let r = relation_metrics(&[0, 1, 2, 0], &[0, 1, 2, 1], &labels, None).unwrap();
        assert_eq!(r.overall.f1, 0.75);

        // negative label excluded from counts
        let r = relation_metrics(&[3, 0, 1, 3], &[0, 0, 3, 3], &labels, Some(3)).unwrap();
        assert_eq!(r.overall.precision, 0.5);
        assert_eq!(r.overall.recall, 0.5);
    }

    #[test]
    fn per_label_rows_aggregate_to_micro() {
        let labels: Vec<String> = ["a", "b", "c", "none"].iter().map(|s| s.to_string()).collect();
        let preds = [0, 0, 1, 2, 3, 3, 1, 2];
        let golds = [0, 1, 1, 3, 3, 0, 2, 2];
        for negative in [None, Some(3)] {
            let r = relation_metrics(&preds, &golds, &labels, negative).unwrap();
            assert_eq!(r.per_label.len(), 4);
            let rows = r
                .per_label
                .iter()
                .filter(|row| Some(labels.iter().position(|l| *l == row.label).unwrap()) != negative);
            let (tp, p, g) = rows.fold((0, 0, 0), |a, row| {
                (a.0 + row.true_positives, a.1 + row.predicted, a.2 + row.gold)
            });
            assert_eq!(Prf::from_counts(tp, p, g), r.overall);
        }
    }

    #[test]
    fn stripping_markers_round_trips() {
        let c = cfg();
        let t = toks(&[5, 6, 7, 8, 9]);
        for (h, tl) in [
            ((0, 1), (2, 4)),
            ((3, 5), (0, 2)),
            ((1, 2), (2, 3)),
            ((0, 5 - 1), (4, 5)),
        ] {
            let m = inject_entity_markers(&t, h, tl, &c).unwrap();
            assert_eq!(strip_markers(&m.tokens, &c), t.ids());
        }
    }
}
