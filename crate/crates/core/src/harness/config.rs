use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::LossWeights;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::pseudo_labels::TemplateId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    FinetuneNer,
    FinetuneRe,
    Eval,
    GenPseudoLabels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ner,
    Re,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchConfig {
    pub pretrain: usize,
    pub finetune: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            pretrain: 8,
            finetune: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// Boxes from the `proposals` sidecar file.
    Fixture,
    RandomCrop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    /// Number of candidate entities `M`.
    pub num_entities: usize,
    pub entity_template: TemplateId,
    pub relation_template: TemplateId,
    /// Soft-label temperature; falls back to `encoder.temperature`.
    pub tau: Option<f64>,
    /// Label with the encoder being trained. When false, labels come from a
    /// frozen copy of the initial encoder weights.
    pub share_encoder: bool,
    /// Compute labels once before the first step instead of every epoch.
    pub freeze: bool,
    /// Compute labels during pre-training rather than reading `paths.pseudo_label_cache`.
    pub on_the_fly: bool,
    pub detector: DetectorKind,
    pub random_crops: usize,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            num_entities: 50,
            entity_template: TemplateId::E1,
            relation_template: TemplateId::RA,
            tau: None,
            share_encoder: true,
            freeze: false,
            on_the_fly: true,
            detector: DetectorKind::Fixture,
            random_crops: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub vocab: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Directory of `<image_id>.bin` patch files for NER and RE corpora.
    pub patch_dir: Option<PathBuf>,
    pub relation_tags: Option<PathBuf>,
    pub relation_labels: Option<PathBuf>,
    pub proposals: Option<PathBuf>,
    pub pos_lexicon: Option<PathBuf>,
    pub pseudo_label_cache: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.vocab,
            &mut self.train,
            &mut self.dev,
            &mut self.test,
            &mut self.patch_dir,
            &mut self.relation_tags,
            &mut self.relation_labels,
            &mut self.proposals,
            &mut self.pos_lexicon,
            &mut self.pseudo_label_cache,
            &mut self.init_checkpoint,
            &mut self.checkpoint,
            &mut self.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

pub(crate) fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::config(format!("paths.{key} is required for this stage")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct FinetuneConfig {
    /// NER entity types in label order; derived from the training tags when empty.
    pub entity_types: Vec<String>,
    /// Relation label excluded from micro P/R/F1.
    pub negative_relation: Option<String>,
    /// Also score the training split after every epoch.
    pub eval_train: bool,
    /// Stop once the training-split score reaches this value.
    pub stop_at_train_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub task: Task,
    /// `train`, `dev` or `test`.
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task: Task::Ner,
            split: "dev".into(),
        }
    }
}

/// Everything one CLI invocation needs. Relative paths resolve against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub batch: BatchConfig,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub parallelism: Parallelism,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub pseudo_labels: PseudoLabelConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_max_steps() -> usize {
    500
}

impl RunConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            encoder: EncoderConfig::default(),
            loss_weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            batch: BatchConfig::default(),
            max_steps: default_max_steps(),
            seed: 0,
            checkpoint_every: 0,
            parallelism: Parallelism::default(),
            paths: Paths::default(),
            pseudo_labels: PseudoLabelConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.paths.resolve(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::internal(e.to_string()))
    }

    /// The seed also drives encoder initialization.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.encoder.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss_weights.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate must be positive"));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay must be nonnegative"));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::config(
                "optimizer betas must lie in [0, 1) and eps must be positive",
            ));
        }
        if o.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("optimizer.grad_clip must be positive"));
        }
        if self.batch.pretrain == 0 || self.batch.finetune == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if self.pseudo_labels.num_entities == 0 {
            return Err(Error::config("pseudo_labels.num_entities must be at least 1"));
        }
        if self.pseudo_labels.entity_template.kind() != crate::pseudo_labels::LabelKind::Entity
            || self.pseudo_labels.relation_template.kind() != crate::pseudo_labels::LabelKind::Relation
        {
            return Err(Error::config(
                "pseudo_labels templates must be E1/E2 for entities and RA/RB/RC for relations",
            ));
        }
        if self.pseudo_labels.tau.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::config("pseudo_labels.tau must be positive"));
        }
        Ok(())
    }

    pub fn pseudo_label_tau(&self) -> f64 {
        self.pseudo_labels.tau.unwrap_or(self.encoder.temperature)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_toml_str("stage = \"pretrain\"\n", Path::new("/base")).unwrap();
        assert_eq!(c.optimizer.learning_rate, 1e-4);
        assert_eq!(c.optimizer.weight_decay, 1e-3);
        assert_eq!(c.batch.finetune, 16);
        assert_eq!(c.batch.pretrain, 8);
        assert_eq!(c.encoder.max_text_len, 80);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("stage = \"pretrain\"\nbogus = 1\n", Path::new(".")).is_err());
        let nested = "stage = \"pretrain\"\n[optimizer]\nlearning_rat = 0.1\n";
        assert!(matches!(
            RunConfig::from_toml_str(nested, Path::new(".")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invariants() {
        let bad_lr = "stage = \"pretrain\"\n[optimizer]\nlearning_rate = 0.0\n";
        assert!(RunConfig::from_toml_str(bad_lr, Path::new(".")).is_err());
        let bad_batch = "stage = \"pretrain\"\n[batch]\npretrain = 0\n";
        assert!(RunConfig::from_toml_str(bad_batch, Path::new(".")).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let text = "stage = \"finetune_ner\"\n[paths]\ntrain = \"data/train.txt\"\ncheckpoint = \"/abs/c.json\"\n";
        let c = RunConfig::from_toml_str(text, Path::new("/cfg")).unwrap();
        assert_eq!(c.paths.train.unwrap(), PathBuf::from("/cfg/data/train.txt"));
        assert_eq!(c.paths.checkpoint.unwrap(), PathBuf::from("/abs/c.json"));
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::new(Stage::FinetuneRe).with_seed(9);
        c.finetune.negative_relation = Some("none".into());
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text, Path::new("/")).unwrap(), c);
    }
}
