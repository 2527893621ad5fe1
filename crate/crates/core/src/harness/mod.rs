//! Configuration, corpus readers, training loops, evaluation and
//! checkpoints around the model modules.

mod checkpoint;
mod config;
mod data;
mod finetune;
mod optim;
mod pretrain;
mod report;
pub mod toy;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, DataCursor, ModelKind, NamedTensor, CHECKPOINT_SCHEMA_VERSION};
pub use config::{
    BatchConfig, DetectorKind, EvalConfig, FinetuneConfig, OptimizerConfig, Paths, PseudoLabelConfig, RunConfig, Stage,
    Task,
};
pub use data::{
    image_path, read_mner_corpus, read_mre_corpus, read_patch_file, read_pretrain_corpus, write_mner_corpus,
    write_patch_file, MreRecord, NerSentence, PretrainRecord, SpanRef, PATCH_MAGIC, PATCH_VERSION,
};
pub use finetune::{
    evaluate_ner, evaluate_re, ner_examples, re_instances, run_eval, run_finetune_ner, run_finetune_re, EpochLog,
    FinetuneReport, ImageCache,
};
pub use optim::AdamW;
pub use pretrain::{run_gen_pseudo_labels, run_pretrain, PretrainReport, PretrainSetup, StepLog};
pub use report::{ner_report, re_report, EvalReport};

use crate::error::{Error, Result};
use crate::tokenizer::Vocab;

/// Sample order for one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Vocabulary from the init checkpoint, else `paths.vocab`, else built from
/// `texts`. It must fit the encoder's token table.
pub(crate) fn resolve_vocab(cfg: &RunConfig, init: Option<&Checkpoint>, texts: &[String]) -> Result<Vocab> {
    let vocab = if let Some(c) = init {
        Vocab::new(c.vocab.clone())?
    } else if let Some(p) = &cfg.paths.vocab {
        Vocab::from_file(p)?
    } else {
        Vocab::build(texts.iter().map(String::as_str), cfg.encoder.vocab_size)?
    };
    if vocab.len() > cfg.encoder.vocab_size {
        return Err(Error::config(format!(
            "vocabulary has {} entries but encoder.vocab_size is {}",
            vocab.len(),
            cfg.encoder.vocab_size
        )));
    }
    Ok(vocab)
}

/// What a stage produced.
#[derive(Debug)]
pub enum StageOutcome {
    Pretrain(PretrainReport),
    Finetune(FinetuneReport),
    Eval(EvalReport),
    PseudoLabels { path: std::path::PathBuf, entries: usize },
}

pub fn run_stage(cfg: &RunConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    Ok(match cfg.stage {
        Stage::Pretrain => StageOutcome::Pretrain(run_pretrain(cfg)?),
        Stage::FinetuneNer => StageOutcome::Finetune(run_finetune_ner(cfg)?),
        Stage::FinetuneRe => StageOutcome::Finetune(run_finetune_re(cfg)?),
        Stage::Eval => StageOutcome::Eval(run_eval(cfg)?),
        Stage::GenPseudoLabels => {
            let (path, entries) = run_gen_pseudo_labels(cfg)?;
            StageOutcome::PseudoLabels {
                path,
                entries: entries.len(),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_keyed_by_seed_and_epoch() {
        let a = epoch_order(20, 1, 0);
        assert_eq!(a, epoch_order(20, 1, 0));
        assert_ne!(a, epoch_order(20, 1, 1));
        assert_ne!(a, epoch_order(20, 2, 0));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }
}
