use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, DataCursor, ModelKind};
use super::config::{required, RunConfig, Task};
use super::data::{image_path, read_mner_corpus, read_mre_corpus, read_patch_file, MreRecord, NerSentence};
use super::optim::AdamW;
use super::report::{ner_report, re_report, EvalReport};
use super::{epoch_order, resolve_vocab};
use crate::autograd::{Grads, ParamStore};
use crate::encoders::{EncoderConfig, PatchGrid, MARKER_TOKENS};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::mner::{BIOLabelSequence, LabelSchema, NerExample, NerModel};
use crate::mre::{RelationInstance, RelationModel};
use crate::pseudo_labels::RelationTagSet;
use crate::tokenizer::Tokenizer;

/// Patch grids by image id, read once.
pub struct ImageCache {
    dir: PathBuf,
    num_patches: usize,
    feature_dim: usize,
    grids: HashMap<String, PatchGrid>,
}

impl ImageCache {
    pub fn new(dir: &Path, enc: &EncoderConfig) -> Self {
        Self {
            dir: dir.to_path_buf(),
            num_patches: enc.num_patches,
            feature_dim: enc.patch_feature_dim,
            grids: HashMap::new(),
        }
    }

    pub fn get(&mut self, image_id: &str) -> Result<PatchGrid> {
        if let Some(g) = self.grids.get(image_id) {
            return Ok(g.clone());
        }
        let g = read_patch_file(&image_path(&self.dir, image_id), self.num_patches, self.feature_dim)?;
        self.grids.insert(image_id.to_string(), g.clone());
        Ok(g)
    }
}

fn tag_types(sentences: &[NerSentence]) -> Vec<String> {
    let set: BTreeSet<&str> = sentences
        .iter()
        .flat_map(|s| &s.tags)
        .filter_map(|t| t.strip_prefix("B-").or_else(|| t.strip_prefix("I-")))
        .collect();
    set.into_iter().map(str::to_string).collect()
}

pub fn ner_examples(
    path: &Path,
    sentences: &[NerSentence],
    schema: &LabelSchema,
    tokenizer: &Tokenizer,
    images: &mut ImageCache,
) -> Result<Vec<NerExample>> {
    let mut out = Vec::with_capacity(sentences.len());
    let mut repaired = 0;
    for (k, s) in sentences.iter().enumerate() {
        let tokens = tokenizer.encode_words(&s.tokens, tokenizer.max_len())?;
        let mut labels = Vec::with_capacity(tokens.len());
        for (i, tag) in s.tags.iter().take(tokens.len()).enumerate() {
            labels.push(schema.label_index(tag).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: s.line + i,
                message: format!("unknown tag `{tag}`"),
            })?);
        }
        let mut labels = BIOLabelSequence(labels);
        if labels.first_violation(schema).is_some() {
            labels = labels.repaired(schema);
            repaired += 1;
        }
        out.push(NerExample {
            id: format!("{}#{k}", s.image_id),
            tokens,
            patches: images.get(&s.image_id)?,
            labels,
        });
    }
    if repaired > 0 {
        warn!(
            "{}: repaired {repaired} sentences with an I- tag that opens a span",
            path.display()
        );
    }
    Ok(out)
}

pub fn re_instances(
    records: &[(usize, MreRecord)],
    labels: &[String],
    tokenizer: &Tokenizer,
    images: &mut ImageCache,
) -> Result<Vec<RelationInstance>> {
    let limit = tokenizer.max_len().saturating_sub(MARKER_TOKENS);
    let mut out = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for (_, r) in records {
        let relation = labels
            .iter()
            .position(|l| *l == r.relation)
            .ok_or_else(|| Error::input(format!("{}: unknown relation `{}`", r.id, r.relation)))?;
        let tokens = tokenizer.encode_words(&r.tokens, limit)?;
        let (h, t) = ((r.h.span[0], r.h.span[1]), (r.t.span[0], r.t.span[1]));
        if h.1 > tokens.len() || t.1 > tokens.len() {
            dropped += 1;
            continue;
        }
        out.push(RelationInstance {
            id: r.id.clone(),
            tokens,
            head: h,
            tail: t,
            patches: images.get(&r.image_id)?,
            relation,
        });
    }
    if dropped > 0 {
        warn!("dropped {dropped} relation instances whose entities fall past the length limit");
    }
    if out.is_empty() {
        return Err(Error::input("no usable relation instances"));
    }
    Ok(out)
}

pub fn evaluate_ner(
    model: &NerModel,
    store: &ParamStore,
    examples: &[NerExample],
    split: &str,
    par: Parallelism,
) -> Result<(Vec<BIOLabelSequence>, EvalReport)> {
    let preds = par
        .map(examples, |ex| model.predict(store, &ex.tokens, &ex.patches))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<BIOLabelSequence> = examples.iter().map(|e| e.labels.clone()).collect();
    let report = ner_report(&preds, &golds, &model.schema, split)?;
    Ok((preds, report))
}

pub fn evaluate_re(
    model: &RelationModel,
    store: &ParamStore,
    instances: &[RelationInstance],
    negative: Option<usize>,
    split: &str,
    par: Parallelism,
) -> Result<(Vec<crate::mre::RelationPrediction>, EvalReport)> {
    let preds = par
        .map(instances, |inst| model.predict(store, inst))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let p: Vec<usize> = preds.iter().map(|p| p.relation).collect();
    let g: Vec<usize> = instances.iter().map(|i| i.relation).collect();
    let report = re_report(&p, &g, &model.labels, negative, split)?;
    Ok((preds, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub step: u64,
    pub mean_loss: f64,
    pub train_score: Option<f64>,
    pub dev_score: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub task: Task,
    /// `(step, batch loss)` for every step.
    pub losses: Vec<(u64, f64)>,
    pub epochs: Vec<EpochLog>,
    pub best_dev: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: PathBuf,
    /// First step after which the training split scored 1.0.
    pub first_perfect_train_step: Option<u64>,
}

struct Loop<'a, E> {
    cfg: &'a RunConfig,
    task: Task,
    train: &'a [E],
    dev: Option<&'a [E]>,
}

impl<E: Clone> Loop<'_, E> {
    /// Shared epoch loop. `score` returns the headline metric of a split.
    fn run(
        &self,
        store: &mut ParamStore,
        loss_and_grads: impl Fn(&ParamStore, &[E]) -> Result<(f64, Grads)>,
        score: impl Fn(&ParamStore, &[E], &str) -> Result<f64>,
        save: impl Fn(&ParamStore, u64, DataCursor, &AdamW, &Path) -> Result<()>,
    ) -> Result<FinetuneReport> {
        let cfg = self.cfg;
        let out = cfg.out_dir();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let mut opt = AdamW::new(cfg.optimizer.clone(), store.len());
        let n = self.train.len();
        let b = cfg.batch.finetune;
        let mut losses = Vec::new();
        let mut epochs = Vec::new();
        let mut best_dev: Option<f64> = None;
        let mut best_checkpoint = None;
        let mut first_perfect = None;
        let mut step = 0u64;
        let mut epoch = 0u64;
        let mut cursor = DataCursor {
            seed: cfg.seed,
            ..DataCursor::default()
        };
        'outer: while (step as usize) < cfg.max_steps {
            let order = epoch_order(n, cfg.seed, epoch);
            let mut epoch_loss = 0.0;
            let mut epoch_batches = 0;
            for (bi, chunk) in order.chunks(b).enumerate() {
                if step as usize >= cfg.max_steps {
                    break;
                }
                let batch: Vec<E> = chunk.iter().map(|&i| self.train[i].clone()).collect();
                let (loss, grads) = loss_and_grads(store, &batch)?;
                opt.update(store, &grads)?;
                step += 1;
                cursor = DataCursor {
                    seed: cfg.seed,
                    epoch,
                    offset: (bi * b + chunk.len()),
                };
                losses.push((step, loss));
                epoch_loss += loss;
                epoch_batches += 1;
                if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every as u64) {
                    save(
                        store,
                        step,
                        cursor,
                        &opt,
                        &out.join(format!("checkpoint_step{step}.json")),
                    )?;
                }
            }
            let train_score = if cfg.finetune.eval_train || cfg.finetune.stop_at_train_score.is_some() {
                Some(score(store, self.train, "train")?)
            } else {
                None
            };
            let dev_score = self.dev.map(|d| score(store, d, "dev")).transpose()?;
            if let Some(d) = dev_score {
                if best_dev.is_none_or(|b| d > b) {
                    best_dev = Some(d);
                    let p = out.join("best.json");
                    save(store, step, cursor, &opt, &p)?;
                    best_checkpoint = Some(p);
                }
            }
            if first_perfect.is_none() && train_score == Some(1.0) {
                first_perfect = Some(step);
            }
            let mean_loss = epoch_loss / epoch_batches.max(1) as f64;
            info!(
                "{:?} epoch {epoch} step {step}: loss {mean_loss:.4} train {train_score:?} dev {dev_score:?}",
                self.task
            );
            epochs.push(EpochLog {
                epoch,
                step,
                mean_loss,
                train_score,
                dev_score,
            });
            epoch += 1;
            if let (Some(target), Some(s)) = (cfg.finetune.stop_at_train_score, train_score) {
                if s >= target {
                    break 'outer;
                }
            }
        }
        let final_checkpoint = out.join("checkpoint.json");
        save(store, step, cursor, &opt, &final_checkpoint)?;
        let log_path = out.join(format!("finetune_{}_log.jsonl", task_name(self.task)));
        let mut text = String::new();
        for e in &epochs {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        std::fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
        Ok(FinetuneReport {
            task: self.task,
            losses,
            epochs,
            best_dev,
            best_checkpoint,
            final_checkpoint,
            first_perfect_train_step: first_perfect,
        })
    }
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Ner => "ner",
        Task::Re => "re",
    }
}

fn load_init(cfg: &RunConfig) -> Result<Option<Checkpoint>> {
    cfg.paths.init_checkpoint.as_deref().map(Checkpoint::load).transpose()
}

fn restore_encoder(init: Option<&Checkpoint>, store: &mut ParamStore) -> Result<()> {
    if let Some(c) = init {
        let n = c.restore_prefix(store, "enc.")?;
        info!("initialized {n} encoder tensors from checkpoint");
    }
    Ok(())
}

pub fn run_finetune_ner(cfg: &RunConfig) -> Result<FinetuneReport> {
    let train_path = required(&cfg.paths.train, "train")?;
    let train_s = read_mner_corpus(train_path)?;
    let dev_s = cfg.paths.dev.as_deref().map(read_mner_corpus).transpose()?;
    let init = load_init(cfg)?;
    let texts: Vec<String> = train_s
        .iter()
        .chain(dev_s.iter().flatten())
        .map(|s| s.tokens.join(" "))
        .collect();
    let tokenizer = Tokenizer::new(resolve_vocab(cfg, init.as_ref(), &texts)?, cfg.encoder.max_text_len);
    let types = if cfg.finetune.entity_types.is_empty() {
        let mut all = train_s.clone();
        all.extend(dev_s.iter().flatten().cloned());
        tag_types(&all)
    } else {
        cfg.finetune.entity_types.clone()
    };
    let schema = LabelSchema::new(types)?;
    let mut images = ImageCache::new(required(&cfg.paths.patch_dir, "patch_dir")?, &cfg.encoder);
    let train = ner_examples(train_path, &train_s, &schema, &tokenizer, &mut images)?;
    let dev = match (&dev_s, &cfg.paths.dev) {
        (Some(s), Some(p)) => Some(ner_examples(p, s, &schema, &tokenizer, &mut images)?),
        _ => None,
    };

    let mut store = ParamStore::new();
    let model = NerModel::new(&cfg.encoder, schema, &mut store)?;
    restore_encoder(init.as_ref(), &mut store)?;
    let par = cfg.parallelism;
    let vocab = tokenizer.vocab().tokens().to_vec();
    let labels = model.schema.entity_types().to_vec();
    Loop {
        cfg,
        task: Task::Ner,
        train: &train,
        dev: dev.as_deref(),
    }
    .run(
        &mut store,
        |s, batch| model.loss_and_grads(s, batch, par),
        |s, data, split| Ok(evaluate_ner(&model, s, data, split, par)?.1.overall.f1),
        |s, step, cursor, opt, path| {
            Checkpoint::capture(
                ModelKind::Ner,
                s,
                vocab.clone(),
                labels.clone(),
                vec![],
                cfg,
                step,
                cursor,
                Some(opt),
            )
            .save(path)
        },
    )
}

fn relation_labels(cfg: &RunConfig, records: &[&(usize, MreRecord)]) -> Result<Vec<String>> {
    if let Some(p) = &cfg.paths.relation_labels {
        return Ok(RelationTagSet::from_file(p)?.tags().to_vec());
    }
    let set: BTreeSet<&str> = records.iter().map(|(_, r)| r.relation.as_str()).collect();
    Ok(set.into_iter().map(str::to_string).collect())
}

fn negative_index(cfg: &RunConfig, labels: &[String]) -> Result<Option<usize>> {
    cfg.finetune
        .negative_relation
        .as_ref()
        .map(|n| {
            labels
                .iter()
                .position(|l| l == n)
                .ok_or_else(|| Error::config(format!("negative relation `{n}` is not a label")))
        })
        .transpose()
}

pub fn run_finetune_re(cfg: &RunConfig) -> Result<FinetuneReport> {
    let train_r = read_mre_corpus(required(&cfg.paths.train, "train")?)?;
    let dev_r = cfg.paths.dev.as_deref().map(read_mre_corpus).transpose()?;
    let init = load_init(cfg)?;
    let all: Vec<&(usize, MreRecord)> = train_r.iter().chain(dev_r.iter().flatten()).collect();
    let texts: Vec<String> = all.iter().map(|(_, r)| r.tokens.join(" ")).collect();
    let tokenizer = Tokenizer::new(resolve_vocab(cfg, init.as_ref(), &texts)?, cfg.encoder.max_text_len);
    let labels = relation_labels(cfg, &all)?;
    let negative = negative_index(cfg, &labels)?;
    let mut images = ImageCache::new(required(&cfg.paths.patch_dir, "patch_dir")?, &cfg.encoder);
    let train = re_instances(&train_r, &labels, &tokenizer, &mut images)?;
    let dev = dev_r
        .as_ref()
        .map(|d| re_instances(d, &labels, &tokenizer, &mut images))
        .transpose()?;

    let mut store = ParamStore::new();
    let model = RelationModel::new(&cfg.encoder, labels.clone(), &mut store)?;
    restore_encoder(init.as_ref(), &mut store)?;
    let par = cfg.parallelism;
    let vocab = tokenizer.vocab().tokens().to_vec();
    Loop {
        cfg,
        task: Task::Re,
        train: &train,
        dev: dev.as_deref(),
    }
    .run(
        &mut store,
        |s, batch| model.loss_and_grads(s, batch, par),
        |s, data, split| Ok(evaluate_re(&model, s, data, negative, split, par)?.1.overall.f1),
        |s, step, cursor, opt, path| {
            Checkpoint::capture(
                ModelKind::Re,
                s,
                vocab.clone(),
                labels.clone(),
                vec![],
                cfg,
                step,
                cursor,
                Some(opt),
            )
            .save(path)
        },
    )
}

/// Scores a fine-tuned checkpoint on one split and writes metrics, a
/// summary table and predictions into the output directory.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(required(&cfg.paths.checkpoint, "checkpoint")?)?;
    let split = cfg.eval.split.as_str();
    let split_path = match split {
        "train" => cfg.paths.train.as_deref(),
        "dev" => cfg.paths.dev.as_deref(),
        "test" => cfg.paths.test.as_deref(),
        other => return Err(Error::input(format!("unknown split `{other}`"))),
    }
    .ok_or_else(|| Error::input(format!("split `{split}` has no path configured")))?;
    if !split_path.is_file() {
        return Err(Error::input(format!(
            "split file {} does not exist",
            split_path.display()
        )));
    }
    let enc = ckpt.config.encoder.clone();
    let tokenizer = Tokenizer::new(crate::tokenizer::Vocab::new(ckpt.vocab.clone())?, enc.max_text_len);
    let mut images = ImageCache::new(required(&cfg.paths.patch_dir, "patch_dir")?, &enc);
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let par = cfg.parallelism;
    let mut store = ParamStore::new();
    let report = match (cfg.eval.task, ckpt.kind) {
        (Task::Ner, ModelKind::Ner) => {
            let model = NerModel::new(&enc, LabelSchema::new(ckpt.labels.clone())?, &mut store)?;
            ckpt.restore(&mut store)?;
            let sents = read_mner_corpus(split_path)?;
            let examples = ner_examples(split_path, &sents, &model.schema, &tokenizer, &mut images)?;
            let (preds, report) = evaluate_ner(&model, &store, &examples, split, par)?;
            let mut text = String::new();
            for ((s, ex), p) in sents.iter().zip(&examples).zip(&preds) {
                text.push_str(&format!("#image {}\n", s.image_id));
                for (i, tok) in s.tokens.iter().take(ex.tokens.len()).enumerate() {
                    text.push_str(&format!(
                        "{tok}\t{}\t{}\n",
                        model.schema.label_name(ex.labels.labels()[i]),
                        model.schema.label_name(p.labels()[i])
                    ));
                }
                text.push('\n');
            }
            let p = out.join(format!("predictions_{split}.txt"));
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            report
        }
        (Task::Re, ModelKind::Re) => {
            let model = RelationModel::new(&enc, ckpt.labels.clone(), &mut store)?;
            ckpt.restore(&mut store)?;
            let negative = negative_index(cfg, &ckpt.labels)?;
            let recs = read_mre_corpus(split_path)?;
            let instances = re_instances(&recs, &ckpt.labels, &tokenizer, &mut images)?;
            let (preds, report) = evaluate_re(&model, &store, &instances, negative, split, par)?;
            let mut text = String::new();
            for (inst, p) in instances.iter().zip(&preds) {
                text.push_str(&serde_json::to_string(&serde_json::json!({
                    "id": inst.id,
                    "gold": ckpt.labels[inst.relation],
                    "pred": ckpt.labels[p.relation],
                    "margin": p.logit_margin,
                }))?);
                text.push('\n');
            }
            let p = out.join(format!("predictions_{split}.jsonl"));
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            report
        }
        (task, kind) => {
            return Err(Error::config(format!(
                "eval task {task:?} does not match a {kind:?} checkpoint"
            )))
        }
    };
    report.write(&out)?;
    Ok(report)
}
