//! Small random fixtures and a finite-difference gradient checker.

#![allow(dead_code)]

use promalign_core::alignment::{
    BBox, LossWeights, ObjectProposal, ObjectTarget, PretrainModel, PretrainSample, SoftLabelDistribution,
};
use promalign_core::autograd::{Grads, ParamStore};
use promalign_core::encoders::{EncoderConfig, PatchGrid, TokenSequence};
use promalign_core::mner::{BIOLabelSequence, LabelSchema, NerExample, NerModel};
use promalign_core::mre::{RelationInstance, RelationModel};
use promalign_core::tensor::Matrix;
use promalign_core::Parallelism;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn tiny_config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 12,
        max_text_len: 12,
        num_patches: 4,
        patch_feature_dim: 5,
        hidden_dim: 8,
        visual_hidden_dim: 8,
        patch_proj_dim: 4,
        joint_dim: 4,
        num_layers: 1,
        num_heads: 2,
        temperature: 0.5,
        seed,
    }
}

pub fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> SoftLabelDistribution {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    SoftLabelDistribution::new(raw.iter().map(|x| x / s).collect()).unwrap()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, len: usize) -> TokenSequence {
    TokenSequence::new((0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect()).unwrap()
}

pub fn random_patches(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> PatchGrid {
    let data = (0..cfg.num_patches * cfg.patch_feature_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    PatchGrid::new(Matrix::from_vec(cfg.num_patches, cfg.patch_feature_dim, data)).unwrap()
}

/// Moves every parameter off its initial value so zero-initialized
/// tensors (CRF scores, biases) are checked at a generic point.
pub fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
}

pub struct PretrainFixture {
    pub store: ParamStore,
    pub model: PretrainModel,
    pub batch: Vec<PretrainSample>,
    pub tau: f64,
}

pub fn pretrain_fixture(seed: u64) -> PretrainFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(seed);
    let (m, r) = (rng.random_range(2..5), rng.random_range(2..4));
    let mut store = ParamStore::new();
    let model = PretrainModel::new(&cfg, m, r, &mut store).unwrap();
    jitter(&mut store, &mut rng);
    let b = rng.random_range(3..5);
    let batch = (0..b)
        .map(|i| {
            let len = rng.random_range(2..6);
            // At least two matched pairs so the contrastive term is non-trivial.
            let matched = i < 2 || rng.random_bool(0.5);
            let objects = (0..rng.random_range(0..3))
                .map(|_| {
                    let mut idx: Vec<usize> = (1..=cfg.num_patches).collect();
                    idx.shuffle(&mut rng);
                    idx.truncate(rng.random_range(1..=cfg.num_patches));
                    idx.sort_unstable();
                    ObjectTarget {
                        proposal: ObjectProposal {
                            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                            patch_indices: idx,
                        },
                        entity_label: random_dist(&mut rng, m),
                    }
                })
                .collect();
            PretrainSample {
                id: format!("s{i}"),
                tokens: random_tokens(&mut rng, &cfg, len),
                patches: random_patches(&mut rng, &cfg),
                matched,
                objects,
                relation_label: rng.random_bool(0.8).then(|| random_dist(&mut rng, r)),
            }
        })
        .collect();
    PretrainFixture {
        store,
        model,
        batch,
        tau: rng.random_range(0.3..1.5),
    }
}

pub struct NerFixture {
    pub store: ParamStore,
    pub model: NerModel,
    pub batch: Vec<NerExample>,
}

pub fn ner_fixture(seed: u64) -> NerFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(seed);
    let schema = LabelSchema::new(vec!["PER".into(), "LOC".into()]).unwrap();
    let mut store = ParamStore::new();
    let model = NerModel::new(&cfg, schema.clone(), &mut store).unwrap();
    jitter(&mut store, &mut rng);
    let batch = (0..rng.random_range(2..4))
        .map(|i| {
            let len = rng.random_range(2..6);
            let raw: Vec<usize> = (0..len).map(|_| rng.random_range(0..schema.num_labels())).collect();
            NerExample {
                id: format!("n{i}"),
                tokens: random_tokens(&mut rng, &cfg, len),
                patches: random_patches(&mut rng, &cfg),
                labels: BIOLabelSequence(raw).repaired(&schema),
            }
        })
        .collect();
    NerFixture { store, model, batch }
}

pub struct ReFixture {
    pub store: ParamStore,
    pub model: RelationModel,
    pub batch: Vec<RelationInstance>,
}

pub fn re_fixture(seed: u64) -> ReFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(seed);
    let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut store = ParamStore::new();
    let model = RelationModel::new(&cfg, labels, &mut store).unwrap();
    jitter(&mut store, &mut rng);
    let batch = (0..rng.random_range(2..4))
        .map(|i| {
            let len = rng.random_range(3..7);
            let h0 = rng.random_range(0..len - 1);
            let t0 = rng.random_range(h0 + 1..len);
            RelationInstance {
                id: format!("r{i}"),
                tokens: random_tokens(&mut rng, &cfg, len),
                head: (h0, t0),
                tail: (t0, rng.random_range(t0 + 1..=len)),
                patches: random_patches(&mut rng, &cfg),
                relation: rng.random_range(0..3),
            }
        })
        .collect();
    ReFixture { store, model, batch }
}

/// Weights selecting exactly one pre-training objective.
pub fn only(term: &str) -> LossWeights {
    let mut w = LossWeights {
        itm: 0.0,
        cit: 0.0,
        coe: 0.0,
        cir: 0.0,
    };
    match term {
        "itm" => w.itm = 1.0,
        "cit" => w.cit = 1.0,
        "coe" => w.coe = 1.0,
        "cir" => w.cir = 1.0,
        other => panic!("unknown term {other}"),
    }
    w
}

/// Relative error `||a - n|| / max(||a||, ||n||)` between the analytic gradient
/// and central differences, taken over a random sample of coordinates with
/// at least one coordinate from every parameter tensor.
pub fn gradient_error(
    store: &ParamStore,
    analytic: &Grads,
    seed: u64,
    per_tensor: usize,
    loss: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut probe = store.clone();
    let mut a = Vec::new();
    let mut n = Vec::new();
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let len = store.get(id).len();
        for _ in 0..per_tensor.min(len) {
            let k = rng.random_range(0..len);
            let x0 = probe.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = x0 + FD_STEP;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[k] = x0 - FD_STEP;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[k] = x0;
            n.push((up - down) / (2.0 * FD_STEP));
            a.push(analytic.get(id).map_or(0.0, |g| g.data()[k]));
        }
    }
    let diff = a.iter().zip(&n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst gradient error of one pre-training objective on one fixture.
pub fn pretrain_gradient_error(term: &str, seed: u64) -> f64 {
    let f = pretrain_fixture(seed);
    let w = only(term);
    let out = f
        .model
        .step(&f.store, &f.batch, &w, f.tau, Parallelism::Sequential)
        .unwrap();
    let grads = out.grads.expect("nonzero weight");
    gradient_error(&f.store, &grads, seed, 2, |s| {
        f.model
            .step(s, &f.batch, &w, f.tau, Parallelism::Sequential)
            .unwrap()
            .total
    })
}

pub fn ner_gradient_error(seed: u64) -> f64 {
    let f = ner_fixture(seed);
    let (_, grads) = f
        .model
        .loss_and_grads(&f.store, &f.batch, Parallelism::Sequential)
        .unwrap();
    gradient_error(&f.store, &grads, seed, 2, |s| {
        f.model.loss_and_grads(s, &f.batch, Parallelism::Sequential).unwrap().0
    })
}

pub fn re_gradient_error(seed: u64) -> f64 {
    let f = re_fixture(seed);
    let (_, grads) = f
        .model
        .loss_and_grads(&f.store, &f.batch, Parallelism::Sequential)
        .unwrap();
    gradient_error(&f.store, &grads, seed, 2, |s| {
        f.model.loss_and_grads(s, &f.batch, Parallelism::Sequential).unwrap().0
    })
}
