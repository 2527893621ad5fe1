use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, DataCursor, ModelKind};
use super::config::{required, DetectorKind, RunConfig};
use super::data::{read_patch_file, read_pretrain_corpus, PretrainRecord};
use super::optim::AdamW;
use super::{epoch_order, resolve_vocab};
use crate::alignment::{ObjectProposal, PretrainModel, PretrainSample};
use crate::autograd::ParamStore;
use crate::encoders::{MultimodalEncoder, PatchGrid};
use crate::error::{Error, Result};
use crate::pseudo_labels::{
    attach_labels, build_cache, collect_proposals, extract_candidate_entities, read_cache, render_prompts, write_cache,
    CacheSample, CandidateEntitySet, FixtureDetector, LabelKind, LexiconTagger, ObjectDetector, PosTagger,
    PromptTemplate, PseudoLabelCacheEntry, PseudoLabeler, RandomCropDetector, RelationTagSet,
};
use crate::tokenizer::{segment, Tokenizer};

/// One line of the pre-training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub itm: f64,
    pub cit: f64,
    pub coe: f64,
    pub cir: f64,
    pub total: f64,
    pub itm_accuracy: f64,
    pub grad_norm: f64,
    pub coe_samples: usize,
    pub coe_excluded: usize,
    pub cir_samples: usize,
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub log: Vec<StepLog>,
    pub checkpoint: PathBuf,
    /// Matching accuracy over the whole corpus after the last step.
    pub final_itm_accuracy: f64,
    pub truncations: usize,
    pub label_refreshes: usize,
    pub detector_failures: usize,
}

/// Corpus, label sets and proposals shared by pre-training and cache generation.
pub struct PretrainSetup {
    pub records: Vec<PretrainRecord>,
    pub samples: Vec<PretrainSample>,
    pub entities: CandidateEntitySet,
    pub relations: RelationTagSet,
    /// `None` where the detector failed; such samples get no pseudo-labels.
    pub proposals: Vec<Option<Vec<ObjectProposal>>>,
    pub detector_failures: usize,
    pub tokenizer: Tokenizer,
    pub init: Option<Checkpoint>,
}

impl PretrainSetup {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let records = read_pretrain_corpus(required(&cfg.paths.train, "train")?)?;
        let tagger = LexiconTagger::from_file(required(&cfg.paths.pos_lexicon, "pos_lexicon")?)?;
        let tagged: Vec<_> = records.iter().map(|r| tagger.tag(&segment(&r.caption))).collect();
        let entities = extract_candidate_entities(&tagged, cfg.pseudo_labels.num_entities)?;
        let relations = RelationTagSet::from_file(required(&cfg.paths.relation_tags, "relation_tags")?)?;
        let init = cfg.paths.init_checkpoint.as_deref().map(Checkpoint::load).transpose()?;

        let mut texts: Vec<String> = records.iter().map(|r| r.caption.clone()).collect();
        texts.extend(render_prompts(
            &entities.entities,
            &PromptTemplate::builtin(cfg.pseudo_labels.entity_template),
        ));
        texts.extend(render_prompts(
            relations.tags(),
            &PromptTemplate::builtin(cfg.pseudo_labels.relation_template),
        ));
        let vocab = resolve_vocab(cfg, init.as_ref(), &texts)?;
        let tokenizer = Tokenizer::new(vocab, cfg.encoder.max_text_len);

        let enc = &cfg.encoder;
        let grids = cfg.parallelism.map(&records, |r| {
            read_patch_file(&r.patch_file, enc.num_patches, enc.patch_feature_dim)
        });
        let mut samples = Vec::with_capacity(records.len());
        for (r, g) in records.iter().zip(grids) {
            samples.push(PretrainSample {
                id: r.id.clone(),
                tokens: tokenizer.tokenize(&r.caption)?,
                patches: g?,
                matched: r.matched == 1,
                objects: Vec::new(),
                relation_label: None,
            });
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = samples.iter().find(|s| !seen.insert(s.id.as_str())) {
            return Err(Error::input(format!("duplicate sample id `{}`", dup.id)));
        }

        let side = enc
            .grid_side()
            .ok_or_else(|| Error::config("encoder.num_patches must be a perfect square"))?;
        let detector: Box<dyn ObjectDetector> = match cfg.pseudo_labels.detector {
            DetectorKind::Fixture => Box::new(FixtureDetector::from_file(required(
                &cfg.paths.proposals,
                "proposals",
            )?)?),
            DetectorKind::RandomCrop => Box::new(RandomCropDetector::new(cfg.seed, cfg.pseudo_labels.random_crops)),
        };
        let pairs: Vec<(String, PatchGrid)> = samples.iter().map(|s| (s.id.clone(), s.patches.clone())).collect();
        let report = collect_proposals(&pairs, side, detector.as_ref(), cfg.parallelism);
        Ok(Self {
            records,
            samples,
            entities,
            relations,
            proposals: report.proposals,
            detector_failures: report.failures.len(),
            tokenizer,
            init,
        })
    }

    pub fn build_model(&self, cfg: &RunConfig, store: &mut ParamStore) -> Result<PretrainModel> {
        let model = PretrainModel::new(&cfg.encoder, self.entities.len(), self.relations.len(), store)?;
        if let Some(init) = &self.init {
            let n = init.restore_prefix(store, "enc.")?;
            info!("initialized {n} encoder tensors from checkpoint");
        }
        Ok(model)
    }

    /// Pseudo-labels for every sample whose detector call succeeded.
    pub fn generate_labels(
        &self,
        cfg: &RunConfig,
        encoder: &MultimodalEncoder,
        store: &ParamStore,
    ) -> Result<Vec<PseudoLabelCacheEntry>> {
        let labeler = PseudoLabeler::new(
            encoder,
            store,
            &self.tokenizer,
            &self.entities,
            &self.relations,
            &PromptTemplate::builtin(cfg.pseudo_labels.entity_template),
            &PromptTemplate::builtin(cfg.pseudo_labels.relation_template),
            cfg.pseudo_label_tau(),
        )?;
        let inputs: Vec<CacheSample> = self
            .samples
            .iter()
            .zip(&self.proposals)
            .filter_map(|(s, p)| {
                p.as_ref().map(|p| CacheSample {
                    id: s.id.clone(),
                    patches: s.patches.clone(),
                    proposals: p.clone(),
                })
            })
            .collect();
        build_cache(&inputs, &labeler, cfg.parallelism)
    }

    fn check_cache(&self, entries: &[PseudoLabelCacheEntry]) -> Result<()> {
        for e in entries {
            let want = match e.kind {
                LabelKind::Entity => self.entities.len(),
                LabelKind::Relation => self.relations.len(),
            };
            if e.probs.len() != want {
                return Err(Error::config(format!(
                    "cached {:?} label for `{}` has {} classes, expected {want}",
                    e.kind,
                    e.sample_id,
                    e.probs.len()
                )));
            }
        }
        Ok(())
    }
}

fn save_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    setup: &PretrainSetup,
    store: &ParamStore,
    step: u64,
    cursor: DataCursor,
    opt: &AdamW,
) -> Result<()> {
    Checkpoint::capture(
        ModelKind::Pretrain,
        store,
        setup.tokenizer.vocab().tokens().to_vec(),
        setup.entities.entities.clone(),
        setup.relations.tags().to_vec(),
        cfg,
        step,
        cursor,
        Some(opt),
    )
    .save(path)
}

/// Writes the pseudo-label cache for the configured corpus and returns its path.
pub fn run_gen_pseudo_labels(cfg: &RunConfig) -> Result<(PathBuf, Vec<PseudoLabelCacheEntry>)> {
    let setup = PretrainSetup::load(cfg)?;
    let mut store = ParamStore::new();
    let model = setup.build_model(cfg, &mut store)?;
    let entries = setup.generate_labels(cfg, &model.encoder, &store)?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = cfg
        .paths
        .pseudo_label_cache
        .clone()
        .unwrap_or_else(|| out.join("pseudo_labels.jsonl"));
    write_cache(&path, &entries)?;
    let ents = out.join("entities.tsv");
    let listing: String = setup
        .entities
        .entities
        .iter()
        .zip(&setup.entities.source_counts)
        .map(|(e, c)| format!("{e}\t{c}\n"))
        .collect();
    std::fs::write(&ents, listing).map_err(|e| Error::io(&ents, e))?;
    info!(
        "wrote {} pseudo-labels to {} ({} detector failures)",
        entries.len(),
        path.display(),
        setup.detector_failures
    );
    Ok((path, entries))
}

/// Pre-trains encoders and heads on the configured corpus, writing
/// `pretrain_log.jsonl` and `checkpoint.json` into the output directory.
pub fn run_pretrain(cfg: &RunConfig) -> Result<PretrainReport> {
    let mut setup = PretrainSetup::load(cfg)?;
    let mut store = ParamStore::new();
    let model = setup.build_model(cfg, &mut store)?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let pl = &cfg.pseudo_labels;
    if !pl.on_the_fly {
        let path = cfg
            .paths
            .pseudo_label_cache
            .as_deref()
            .filter(|p| p.is_file())
            .ok_or_else(|| Error::config("pseudo-label cache missing and on-the-fly generation disabled"))?;
        let entries = read_cache(path)?;
        setup.check_cache(&entries)?;
        attach_labels(&mut setup.samples, &entries)?;
    }
    // A frozen copy of the initial weights labels the data when the
    // generator does not share the trained encoder.
    let generator_store = (!pl.share_encoder).then(|| store.clone());

    let log_path = out.join("pretrain_log.jsonl");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut opt = AdamW::new(cfg.optimizer.clone(), store.len());
    let n = setup.samples.len();
    let b = cfg.batch.pretrain.min(n);
    let tau = cfg.encoder.temperature;
    let mut log = Vec::with_capacity(cfg.max_steps);
    let mut refreshes = 0;
    let mut step = 0u64;
    let mut epoch = 0u64;
    let mut cursor = DataCursor {
        seed: cfg.seed,
        ..DataCursor::default()
    };

    while (step as usize) < cfg.max_steps {
        if pl.on_the_fly && (epoch == 0 || !pl.freeze) {
            let entries = setup.generate_labels(cfg, &model.encoder, generator_store.as_ref().unwrap_or(&store))?;
            attach_labels(&mut setup.samples, &entries)?;
            refreshes += 1;
        }
        let order = epoch_order(n, cfg.seed, epoch);
        // Incomplete trailing batches are dropped so every step sees `b` samples.
        for (bi, chunk) in order.chunks_exact(b).enumerate() {
            if step as usize >= cfg.max_steps {
                break;
            }
            let batch: Vec<PretrainSample> = chunk.iter().map(|&i| setup.samples[i].clone()).collect();
            let out_step = model.step(&store, &batch, &cfg.loss_weights, tau, cfg.parallelism)?;
            let grad_norm = match &out_step.grads {
                Some(g) => opt.update(&mut store, g)?,
                None => 0.0,
            };
            step += 1;
            cursor = DataCursor {
                seed: cfg.seed,
                epoch,
                offset: (bi + 1) * b,
            };
            let entry = StepLog {
                step,
                epoch,
                itm: out_step.parts.itm,
                cit: out_step.parts.cit,
                coe: out_step.parts.coe,
                cir: out_step.parts.cir,
                total: out_step.total,
                itm_accuracy: out_step.itm_correct as f64 / out_step.batch_size as f64,
                grad_norm,
                coe_samples: out_step.coe_samples,
                coe_excluded: out_step.coe_excluded,
                cir_samples: out_step.cir_samples,
            };
            serde_json::to_writer(&mut log_file, &entry)?;
            log_file.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
            if step == 1 || step.is_multiple_of(50) {
                info!(
                    "step {step}: total {:.4} (itm {:.4}, cit {:.4}, coe {:.4}, cir {:.4}), itm acc {:.3}",
                    entry.total, entry.itm, entry.cit, entry.coe, entry.cir, entry.itm_accuracy
                );
            }
            log.push(entry);
            if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every as u64) {
                save_checkpoint(
                    &out.join(format!("checkpoint_step{step}.json")),
                    cfg,
                    &setup,
                    &store,
                    step,
                    cursor,
                    &opt,
                )?;
            }
        }
        epoch += 1;
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;

    let probs = cfg
        .parallelism
        .map(&setup.samples, |s| model.match_probability(&store, s));
    let mut correct = 0;
    for (p, s) in probs.into_iter().zip(&setup.samples) {
        if (p? > 0.5) == s.matched {
            correct += 1;
        }
    }
    let checkpoint = out.join("checkpoint.json");
    save_checkpoint(&checkpoint, cfg, &setup, &store, step, cursor, &opt)?;
    if setup.tokenizer.truncation_count() > 0 {
        warn!(
            "{} captions truncated to {} tokens",
            setup.tokenizer.truncation_count(),
            cfg.encoder.max_text_len
        );
    }
    Ok(PretrainReport {
        log,
        checkpoint,
        final_itm_accuracy: correct as f64 / n as f64,
        truncations: setup.tokenizer.truncation_count(),
        label_refreshes: refreshes,
        detector_failures: setup.detector_failures,
    })
}
