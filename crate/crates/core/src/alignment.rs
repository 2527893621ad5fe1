//! Pre-training objectives: image-text matching, symmetric contrastive
//! image-text, object-entity and image-relation soft-label cross-entropy,
//! and their weighted sum.
//!
//! The plain functions (`itm_loss`, `cit_loss`, ...) evaluate each objective
//! on concrete values. [`PretrainModel::step`] runs the same objectives on
//! per-sample tapes and returns parameter gradients for one batch.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, Grads, ParamStore, Tape, Var};
use crate::encoders::{EncoderConfig, FusedEmbeddingSequence, Linear, MultimodalEncoder, PatchGrid, TokenSequence};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::tensor::{dot, log_softmax, softmax, Matrix};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Normalized `[x0, y0, x1, y1]` rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let ok = [x0, y0, x1, y1].iter().all(|v| (0.0..=1.0).contains(v)) && x0 < x1 && y0 < y1;
        if !ok {
            return Err(Error::input(format!(
                "bbox [{x0}, {y0}, {x1}, {y1}] is not a normalized rectangle"
            )));
        }
        Ok(Self([x0, y0, x1, y1]))
    }

    pub fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.0;
        (x1 - x0) * (y1 - y0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let [a0, b0, a1, b1] = self.0;
        let [c0, d0, c1, d1] = other.0;
        let w = (a1.min(c1) - a0.max(c0)).max(0.0);
        let h = (b1.min(d1) - b0.max(d0)).max(0.0);
        w * h
    }
}

/// A detected object: its box and the 1-based indices of the patches it covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectProposal {
    pub bbox: BBox,
    pub patch_indices: Vec<usize>,
}

impl ObjectProposal {
    pub fn validate(&self, num_patches: usize) -> Result<()> {
        if self.patch_indices.is_empty() {
            return Err(Error::input("object proposal covers no patches"));
        }
        if let Some(k) = self.patch_indices.iter().find(|&&k| k == 0 || k > num_patches) {
            return Err(Error::input(format!("patch index {k} outside 1..={num_patches}")));
        }
        Ok(())
    }
}

/// A probability vector used as a soft training target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SoftLabelDistribution(Vec<f64>);

impl SoftLabelDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::input("empty distribution"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::input("distribution entries must be finite and nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::input(format!("distribution sums to {total}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for SoftLabelDistribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SoftLabelDistribution> for Vec<f64> {
    fn from(d: SoftLabelDistribution) -> Self {
        d.0
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub itm: f64,
    pub cit: f64,
    pub coe: f64,
    pub cir: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            itm: 1.0,
            cit: 1.0,
            coe: 1.0,
            cir: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("itm", self.itm),
            ("cit", self.cit),
            ("coe", self.coe),
            ("cir", self.cir),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(format!("loss weight {name} = {w} must be nonnegative")));
            }
        }
        Ok(())
    }

    pub fn all_zero(&self) -> bool {
        self.itm == 0.0 && self.cit == 0.0 && self.coe == 0.0 && self.cir == 0.0
    }
}

/// The four objective values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub itm: f64,
    pub cit: f64,
    pub coe: f64,
    pub cir: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean binary cross-entropy of matching probabilities against 0/1 labels.
pub fn itm_loss(match_probs: &[f64], labels: &[bool]) -> Result<f64> {
    if match_probs.len() != labels.len() {
        return Err(Error::input(format!(
            "{} probabilities for {} labels",
            match_probs.len(),
            labels.len()
        )));
    }
    if match_probs.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let total: f64 = match_probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / match_probs.len() as f64)
}

/// Symmetric in-batch contrastive loss over an `N_m x N_m` similarity matrix
/// whose diagonal holds the matched pairs. Zero (with a warning) for `N_m = 0`.
pub fn cit_loss(sim: &Matrix, tau: f64) -> Result<f64> {
    Ok(cit_loss_with_grad(sim, tau)?.0)
}

/// [`cit_loss`] together with its gradient with respect to `sim`.
pub fn cit_loss_with_grad(sim: &Matrix, tau: f64) -> Result<(f64, Matrix)> {
    if !(tau > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let n = sim.rows();
    if sim.cols() != n {
        return Err(Error::input("similarity matrix must be square"));
    }
    if n == 0 {
        warn!("no matched pairs in batch; contrastive image-text loss set to 0");
        return Ok((0.0, Matrix::zeros(0, 0)));
    }
    let scaled = sim.scaled(1.0 / tau);
    let mut grad = Matrix::zeros(n, n);
    let mut image_to_text = 0.0;
    for i in 0..n {
        let lp = log_softmax(scaled.row(i));
        image_to_text -= lp[i];
        for (j, l) in lp.iter().enumerate() {
            let d = l.exp() - if i == j { 1.0 } else { 0.0 };
            grad.set(i, j, grad.get(i, j) + d);
        }
    }
    let cols = scaled.transpose();
    let mut text_to_image = 0.0;
    for j in 0..n {
        let lp = log_softmax(cols.row(j));
        text_to_image -= lp[j];
        for (i, l) in lp.iter().enumerate() {
            let d = l.exp() - if i == j { 1.0 } else { 0.0 };
            grad.set(i, j, grad.get(i, j) + d);
        }
    }
    let nf = n as f64;
    let loss = 0.5 * (image_to_text / nf + text_to_image / nf);
    Ok((loss, grad.scaled(0.5 / (nf * tau))))
}

/// Mean fused embedding over the proposal's patch positions.
pub fn pool_object_region(fused: &FusedEmbeddingSequence, proposal: &ObjectProposal) -> Result<Vec<f64>> {
    proposal.validate(fused.num_patches())?;
    let d = fused.embeddings.cols();
    let mut out = vec![0.0; d];
    for &k in &proposal.patch_indices {
        let pos = fused
            .patch_position(k)
            .ok_or_else(|| Error::input(format!("patch index {k} out of range")))?;
        for (o, v) in out.iter_mut().zip(fused.embeddings.row(pos)) {
            *o += v;
        }
    }
    let inv = 1.0 / proposal.patch_indices.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

fn soft_cross_entropy_batch(logits: &Matrix, pseudo: &[SoftLabelDistribution]) -> Result<f64> {
    if logits.rows() != pseudo.len() {
        return Err(Error::input(format!(
            "{} logit rows for {} pseudo-labels",
            logits.rows(),
            pseudo.len()
        )));
    }
    if pseudo.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, q) in pseudo.iter().enumerate() {
        if q.len() != logits.cols() {
            return Err(Error::input(format!(
                "distribution over {} labels for {} logits",
                q.len(),
                logits.cols()
            )));
        }
        total += soft_cross_entropy(logits.row(i), q.probs());
    }
    Ok(total / pseudo.len() as f64)
}

/// `-sum_j q_j log softmax(logits)_j`.
pub fn soft_cross_entropy(logits: &[f64], q: &[f64]) -> f64 {
    let lp = log_softmax(logits);
    -q.iter()
        .zip(&lp)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, l)| q * l)
        .sum::<f64>()
}

/// Object-entity loss: mean soft cross-entropy of entity logits against
/// entity pseudo-labels, over the samples that carry one.
pub fn coe_loss(entity_logits: &Matrix, pseudo: &[SoftLabelDistribution]) -> Result<f64> {
    soft_cross_entropy_batch(entity_logits, pseudo)
}

/// Image-relation loss: same form as [`coe_loss`] over relation tags.
pub fn cir_loss(relation_logits: &Matrix, pseudo: &[SoftLabelDistribution]) -> Result<f64> {
    soft_cross_entropy_batch(relation_logits, pseudo)
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.itm * parts.itm + w.cit * parts.cit + w.coe * parts.coe + w.cir * parts.cir)
}

struct BceRule {
    label: f64,
}

impl Backward for BceRule {
    fn backward(&self, inputs: &[&Matrix], _: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let z = inputs[0].get(0, 0);
        let p = sigmoid(z);
        let d = if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
            0.0
        } else {
            p - self.label
        };
        vec![Matrix::filled(1, 1, d * grad.get(0, 0))]
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `label`, as a tape node.
pub fn bce_with_logit(tape: &mut Tape, logit: Var, label: bool) -> Var {
    let z = tape.value(logit).get(0, 0);
    let p = clamp_prob(sigmoid(z));
    let y = if label { 1.0 } else { 0.0 };
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    tape.custom(&[logit], Matrix::filled(1, 1, loss), Box::new(BceRule { label: y }))
}

struct SoftCeRule {
    target: Vec<f64>,
}

impl Backward for SoftCeRule {
    fn backward(&self, inputs: &[&Matrix], _: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let p = softmax(inputs[0].data());
        let qsum: f64 = self.target.iter().sum();
        let g = grad.get(0, 0);
        let d = p.iter().zip(&self.target).map(|(p, q)| g * (qsum * p - q)).collect();
        vec![Matrix::row_vector(d)]
    }
}

/// Soft-target cross-entropy on a `1 x C` logit row, as a tape node.
pub fn soft_cross_entropy_node(tape: &mut Tape, logits: Var, target: &[f64]) -> Var {
    let loss = soft_cross_entropy(tape.value(logits).data(), target);
    tape.custom(
        &[logits],
        Matrix::filled(1, 1, loss),
        Box::new(SoftCeRule {
            target: target.to_vec(),
        }),
    )
}

/// Mean of the fused rows at the proposal's patch positions, as a tape node.
pub fn pool_object_region_node(tape: &mut Tape, fused: Var, num_tokens: usize, proposal: &ObjectProposal) -> Var {
    let positions: Vec<usize> = proposal.patch_indices.iter().map(|k| num_tokens + k).collect();
    let rows = tape.gather_rows(fused, &positions);
    tape.mean_rows(rows)
}

/// One detected object of a pre-training sample and its entity pseudo-label.
#[derive(Clone, Debug)]
pub struct ObjectTarget {
    pub proposal: ObjectProposal,
    pub entity_label: SoftLabelDistribution,
}

#[derive(Clone, Debug)]
pub struct PretrainSample {
    pub id: String,
    pub tokens: TokenSequence,
    pub patches: PatchGrid,
    pub matched: bool,
    pub objects: Vec<ObjectTarget>,
    pub relation_label: Option<SoftLabelDistribution>,
}

/// Classifier heads on top of the fused encoder.
#[derive(Clone, Debug)]
pub struct PretrainHeads {
    pub itm: Linear,
    pub entity: Linear,
    pub relation: Linear,
}

/// Encoders plus the three pre-training heads.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub encoder: MultimodalEncoder,
    pub heads: PretrainHeads,
}

/// Per-batch statistics and summed parameter gradients.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub parts: LossParts,
    pub total: f64,
    pub grads: Option<Grads>,
    pub batch_size: usize,
    pub matched: usize,
    pub itm_correct: usize,
    pub coe_samples: usize,
    /// Samples without any object proposal, left out of the object-entity term.
    pub coe_excluded: usize,
    pub cir_samples: usize,
}

struct SampleForward<'a> {
    tape: Tape<'a>,
    itm: Var,
    itm_prob: f64,
    coe: Option<Var>,
    cir: Option<Var>,
    zv: Var,
    zt: Var,
}

impl PretrainModel {
    pub fn new(
        config: &EncoderConfig,
        num_entities: usize,
        num_relations: usize,
        store: &mut ParamStore,
    ) -> Result<Self> {
        use rand::SeedableRng;
        if num_entities == 0 || num_relations == 0 {
            return Err(Error::config("entity and relation label sets must be nonempty"));
        }
        let encoder = MultimodalEncoder::new(config, store, "enc.")?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
        let d = config.hidden_dim;
        let heads = PretrainHeads {
            itm: Linear::new(store, "pretrain.itm", d, 1, &mut rng),
            entity: Linear::new(store, "pretrain.entity", d, num_entities, &mut rng),
            relation: Linear::new(store, "pretrain.relation", d, num_relations, &mut rng),
        };
        Ok(Self { encoder, heads })
    }

    pub fn num_entities(&self) -> usize {
        self.heads.entity.out_dim
    }

    pub fn num_relations(&self) -> usize {
        self.heads.relation.out_dim
    }

    fn forward_sample<'a>(&self, store: &'a ParamStore, s: &PretrainSample) -> Result<SampleForward<'a>> {
        let mut tape = Tape::new(store);
        let text = self.encoder.text_forward(&mut tape, &s.tokens)?;
        let visual = self.encoder.visual_forward(&mut tape, &s.patches)?;
        let fused = self.encoder.fuse_forward(&mut tape, text, visual)?;
        let summary = tape.slice_rows(fused, 0, 1);

        let logit = self.heads.itm.forward(&mut tape, summary);
        let itm_prob = sigmoid(tape.value(logit).get(0, 0));
        let itm = bce_with_logit(&mut tape, logit, s.matched);

        let coe = if s.objects.is_empty() {
            None
        } else {
            let mut terms = Vec::with_capacity(s.objects.len());
            for obj in &s.objects {
                obj.proposal.validate(s.patches.num_patches())?;
                if obj.entity_label.len() != self.num_entities() {
                    return Err(Error::input(format!(
                        "sample {}: entity pseudo-label over {} candidates, model has {}",
                        s.id,
                        obj.entity_label.len(),
                        self.num_entities()
                    )));
                }
                let pooled = pool_object_region_node(&mut tape, fused, s.tokens.len(), &obj.proposal);
                let logits = self.heads.entity.forward(&mut tape, pooled);
                terms.push(soft_cross_entropy_node(&mut tape, logits, obj.entity_label.probs()));
            }
            let stacked = tape.concat_rows(&terms);
            Some(tape.mean_rows(stacked))
        };

        let cir = match &s.relation_label {
            Some(q) => {
                if q.len() != self.num_relations() {
                    return Err(Error::input(format!(
                        "sample {}: relation pseudo-label over {} tags, model has {}",
                        s.id,
                        q.len(),
                        self.num_relations()
                    )));
                }
                let logits = self.heads.relation.forward(&mut tape, summary);
                Some(soft_cross_entropy_node(&mut tape, logits, q.probs()))
            }
            None => None,
        };

        let (zv, zt) = self.encoder.project_summaries(&mut tape, text, visual);
        Ok(SampleForward {
            tape,
            itm,
            itm_prob,
            coe,
            cir,
            zv,
            zt,
        })
    }

    /// Matching probability for one sample.
    pub fn match_probability(&self, store: &ParamStore, s: &PretrainSample) -> Result<f64> {
        Ok(self.forward_sample(store, s)?.itm_prob)
    }

    /// Evaluates all four objectives on a batch and, unless every weight is
    /// zero, backpropagates the weighted total into parameter gradients.
    ///
    /// Samples are processed independently under `par`; the contrastive term
    /// couples them only through the projected summaries, whose gradients are
    /// injected before the per-sample reverse sweeps. Gradients are summed in
    /// batch order.
    pub fn step(
        &self,
        store: &ParamStore,
        batch: &[PretrainSample],
        weights: &LossWeights,
        tau: f64,
        par: Parallelism,
    ) -> Result<StepOutput> {
        weights.validate()?;
        if batch.is_empty() {
            return Err(Error::input("empty pre-training batch"));
        }
        let forwards: Vec<Result<SampleForward>> = par.map(batch, |s| self.forward_sample(store, s));
        let mut forwards = forwards.into_iter().collect::<Result<Vec<_>>>()?;

        let b = batch.len();
        let matched: Vec<usize> = (0..b).filter(|&i| batch[i].matched).collect();
        let nm = matched.len();
        let mut sim = Matrix::zeros(nm, nm);
        for (a, &i) in matched.iter().enumerate() {
            for (c, &j) in matched.iter().enumerate() {
                let zv = forwards[i].tape.value(forwards[i].zv).data();
                let zt = forwards[j].tape.value(forwards[j].zt).data();
                sim.set(a, c, dot(zv, zt));
            }
        }
        let (cit, dsim) = cit_loss_with_grad(&sim, tau)?;

        let itm_total: f64 = forwards.iter().map(|f| f.tape.value(f.itm).get(0, 0)).sum();
        let coe_vals: Vec<f64> = forwards
            .iter()
            .filter_map(|f| f.coe.map(|v| f.tape.value(v).get(0, 0)))
            .collect();
        let cir_vals: Vec<f64> = forwards
            .iter()
            .filter_map(|f| f.cir.map(|v| f.tape.value(v).get(0, 0)))
            .collect();
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        let parts = LossParts {
            itm: itm_total / b as f64,
            cit,
            coe: mean(&coe_vals),
            cir: mean(&cir_vals),
        };
        let total = total_loss(&parts, weights)?;
        let itm_correct = forwards
            .iter()
            .zip(batch)
            .filter(|(f, s)| (f.itm_prob > 0.5) == s.matched)
            .count();
        let coe_excluded = batch.iter().filter(|s| s.objects.is_empty()).count();

        let grads = if weights.all_zero() {
            None
        } else {
            let joint = self.encoder.config().joint_dim;
            let mut seeds: Vec<Vec<(Var, Matrix)>> = vec![Vec::new(); b];
            if weights.cit > 0.0 && nm > 0 {
                for (a, &i) in matched.iter().enumerate() {
                    let mut gv = vec![0.0; joint];
                    let mut gt = vec![0.0; joint];
                    for (c, &j) in matched.iter().enumerate() {
                        let zt_j = forwards[j].tape.value(forwards[j].zt).data();
                        let zv_j = forwards[j].tape.value(forwards[j].zv).data();
                        // d sim[a][c] / d zv_i = zt_j ; d sim[c][a] / d zt_i = zv_j
                        for k in 0..joint {
                            gv[k] += dsim.get(a, c) * zt_j[k];
                            gt[k] += dsim.get(c, a) * zv_j[k];
                        }
                    }
                    let f = &forwards[i];
                    seeds[i].push((f.zv, Matrix::row_vector(gv).scaled(weights.cit)));
                    seeds[i].push((f.zt, Matrix::row_vector(gt).scaled(weights.cit)));
                }
            }
            for (i, f) in forwards.iter().enumerate() {
                if weights.itm > 0.0 {
                    seeds[i].push((f.itm, Matrix::filled(1, 1, weights.itm / b as f64)));
                }
                if let (Some(v), true) = (f.coe, weights.coe > 0.0) {
                    seeds[i].push((v, Matrix::filled(1, 1, weights.coe / coe_vals.len() as f64)));
                }
                if let (Some(v), true) = (f.cir, weights.cir > 0.0) {
                    seeds[i].push((v, Matrix::filled(1, 1, weights.cir / cir_vals.len() as f64)));
                }
            }
            let mut work: Vec<(SampleForward, Vec<(Var, Matrix)>)> = forwards.drain(..).zip(seeds).collect();
            let per_sample: Vec<Option<Grads>> = par.map_mut(&mut work, |(f, seeds)| {
                if seeds.is_empty() {
                    return None;
                }
                let tg = f.tape.backward(seeds);
                Some(f.tape.param_grads(&tg))
            });
            let mut acc = Grads::new(store.len());
            for g in per_sample.iter().flatten() {
                acc.merge(g);
            }
            Some(acc)
        };

        Ok(StepOutput {
            parts,
            total,
            grads,
            batch_size: b,
            matched: nm,
            itm_correct,
            coe_samples: coe_vals.len(),
            coe_excluded,
            cir_samples: cir_vals.len(),
        })
    }
}
