//! Synthetic corpora for smoke tests and the acceptance suite.
//!
//! Images are 4x4 patch grids. Each object class has a fixed feature
//! prototype (a shared per-type component plus a class component) that is
//! painted into a 2x2 block of patches; everything else is low-amplitude
//! noise. Captions, NER sentences and relation instances name the objects
//! actually painted, and spatial relations follow the block positions.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::config::{DetectorKind, RunConfig, Stage, Task};
use super::data::{write_mner_corpus, write_patch_file, NerSentence};
use crate::encoders::{EncoderConfig, PatchGrid};
use crate::error::{Error, Result};
use crate::pseudo_labels::{PromptTemplate, TemplateId};
use crate::tensor::Matrix;
use crate::tokenizer::{segment, Vocab, UNK};

const SIDE: usize = 4;
const FEATURE_DIM: usize = 24;

/// `(surface form, entity type)`; the last word is the head noun.
const CLASSES: [(&str, &str); 10] = [
    ("dog", "ANIMAL"),
    ("cat", "ANIMAL"),
    ("horse", "ANIMAL"),
    ("sea lion", "ANIMAL"),
    ("car", "VEHICLE"),
    ("boat", "VEHICLE"),
    ("fire truck", "VEHICLE"),
    ("tree", "PLANT"),
    ("flower", "PLANT"),
    ("palm bush", "PLANT"),
];

const TYPES: [&str; 3] = ["ANIMAL", "VEHICLE", "PLANT"];

/// Pre-training relation tags and the matching RE labels.
const RELATIONS: [(&str, &str); 4] = [
    ("left of", "left_of"),
    ("right of", "right_of"),
    ("above", "above"),
    ("below", "below"),
];

const ADJECTIVES: [&str; 4] = ["small", "big", "young", "old"];

#[derive(Clone, Debug)]
pub struct ToyOptions {
    pub seed: u64,
    /// Image-caption pairs; a multiple of 8, half of each 8 mismatched.
    pub pairs: usize,
    pub ner_train: usize,
    pub ner_dev: usize,
    pub re_train: usize,
    pub re_dev: usize,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            pairs: 64,
            ner_train: 20,
            ner_dev: 20,
            re_train: 30,
            re_dev: 12,
        }
    }
}

/// Paths of everything [`generate`] writes.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub root: PathBuf,
    pub pretrain_config: PathBuf,
    pub gen_config: PathBuf,
    pub ner_config: PathBuf,
    pub re_config: PathBuf,
    pub eval_ner_config: PathBuf,
    pub eval_re_config: PathBuf,
}

struct World {
    prototypes: Vec<Vec<f64>>,
}

impl World {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut unit =
            |scale: f64| -> Vec<f64> { (0..FEATURE_DIM).map(|_| rng.random_range(-scale..=scale)).collect() };
        let type_vecs: Vec<Vec<f64>> = TYPES.iter().map(|_| unit(1.0)).collect();
        let prototypes = CLASSES
            .iter()
            .map(|(_, ty)| {
                let t = &type_vecs[TYPES.iter().position(|x| x == ty).expect("known type")];
                unit(1.0).iter().zip(t).map(|(c, t)| c + t).collect()
            })
            .collect();
        Self { prototypes }
    }

    /// Paints objects `(class, top-left row, col)` into a noise grid.
    fn render(&self, objects: &[(usize, usize, usize)], rng: &mut ChaCha8Rng) -> PatchGrid {
        let mut m = Matrix::zeros(SIDE * SIDE, FEATURE_DIM);
        for v in m.data_mut() {
            *v = rng.random_range(-0.2..=0.2);
        }
        for &(class, r, c) in objects {
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let row = m.row_mut((r + dr) * SIDE + c + dc);
                for (x, p) in row.iter_mut().zip(&self.prototypes[class]) {
                    *x = p + rng.random_range(-0.1..=0.1);
                }
            }
        }
        PatchGrid::new(m).expect("finite features")
    }
}

/// Two non-overlapping 2x2 blocks and the relation of the first to the second.
fn place_pair(rng: &mut ChaCha8Rng) -> ((usize, usize), (usize, usize), usize) {
    loop {
        let a = (rng.random_range(0..=2), rng.random_range(0..=2));
        let b = (rng.random_range(0..=2), rng.random_range(0..=2));
        let dr = b.0 as i64 - a.0 as i64;
        let dc = b.1 as i64 - a.1 as i64;
        if dr.abs() < 2 && dc.abs() < 2 {
            continue;
        }
        // Horizontal separation wins when both apply.
        let rel = if dc.abs() >= 2 {
            if dc > 0 {
                0
            } else {
                1
            }
        } else if dr > 0 {
            2
        } else {
            3
        };
        return (a, b, rel);
    }
}

fn bbox_json(pos: (usize, usize)) -> serde_json::Value {
    let s = SIDE as f64;
    json!([
        pos.1 as f64 / s,
        pos.0 as f64 / s,
        (pos.1 + 2) as f64 / s,
        (pos.0 + 2) as f64 / s
    ])
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The encoder used by every toy config.
pub fn toy_encoder() -> EncoderConfig {
    EncoderConfig {
        num_patches: SIDE * SIDE,
        patch_feature_dim: FEATURE_DIM,
        ..EncoderConfig::default()
    }
}

/// Writes corpora, fixtures and stage configs under `root`.
pub fn generate(root: &Path, opts: &ToyOptions) -> Result<ToyCorpus> {
    if opts.pairs == 0 || !opts.pairs.is_multiple_of(8) {
        return Err(Error::config("toy pair count must be a positive multiple of 8"));
    }
    let images = root.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let world = World::new(&mut rng);
    let mut texts: Vec<String> = Vec::new();

    // Pre-training pairs, in groups of 8: the first 4 matched, the last 4
    // carrying a cyclic shift of their own captions. Within a half every
    // noun is distinct, so a shifted caption never names a painted object.
    let mut pretrain = String::new();
    let mut proposals = String::new();
    for g in 0..opts.pairs / 8 {
        let mut classes: Vec<usize> = (0..CLASSES.len()).collect();
        let mut rows = Vec::new();
        for half in 0..2 {
            classes.shuffle(&mut rng);
            let mut half_rows = Vec::new();
            for j in 0..4 {
                let (c1, c2) = (classes[j], classes[4 + j]);
                let (p1, p2, rel) = place_pair(&mut rng);
                let adj = ADJECTIVES[rng.random_range(0..ADJECTIVES.len())];
                let caption = format!("a {adj} {} {} a {}", CLASSES[c1].0, RELATIONS[rel].0, CLASSES[c2].0);
                let grid = world.render(&[(c1, p1.0, p1.1), (c2, p2.0, p2.1)], &mut rng);
                half_rows.push((caption, grid, p1, p2, half == 0));
            }
            if half == 1 {
                let captions: Vec<String> = half_rows.iter().map(|r| r.0.clone()).collect();
                for (j, r) in half_rows.iter_mut().enumerate() {
                    r.0 = captions[(j + 1) % 4].clone();
                }
            }
            rows.extend(half_rows);
        }
        for (j, (caption, grid, p1, p2, matched)) in rows.into_iter().enumerate() {
            let id = format!("p{:03}", g * 8 + j);
            write_patch_file(&images.join(format!("{id}.bin")), &grid)?;
            pretrain.push_str(&serde_json::to_string(&json!({
                "id": id,
                "caption": caption,
                "patch_file": format!("images/{id}.bin"),
                "match": u8::from(matched),
            }))?);
            pretrain.push('\n');
            proposals.push_str(&serde_json::to_string(&json!({
                "sample_id": id,
                "bboxes": [bbox_json(p1), bbox_json(p2)],
            }))?);
            proposals.push('\n');
            texts.push(caption);
        }
    }
    write(&root.join("pretrain.jsonl"), &pretrain)?;
    write(&root.join("proposals.jsonl"), &proposals)?;

    let mut lexicon = String::new();
    let mut nouns = BTreeSet::new();
    for (name, _) in CLASSES {
        let w = words(name);
        for (i, t) in w.iter().enumerate() {
            let tag = if i + 1 == w.len() { "NOUN" } else { "ADJ" };
            if tag == "NOUN" {
                nouns.insert(t.clone());
            }
            let _ = writeln!(lexicon, "{t}\t{tag}");
        }
    }
    for a in ADJECTIVES {
        let _ = writeln!(lexicon, "{a}\tADJ");
    }
    for (w, tag) in [
        ("a", "DET"),
        ("the", "DET"),
        ("left", "ADJ"),
        ("right", "ADJ"),
        ("of", "ADP"),
        ("above", "ADP"),
        ("below", "ADP"),
    ] {
        let _ = writeln!(lexicon, "{w}\t{tag}");
    }
    write(&root.join("pos_lexicon.tsv"), &lexicon)?;
    let tags: String = RELATIONS.iter().map(|(t, _)| format!("{t}\n")).collect();
    write(&root.join("relation_tags.txt"), &tags)?;
    let labels: String = RELATIONS.iter().map(|(_, l)| format!("{l}\n")).collect();
    write(&root.join("relation_labels.txt"), &labels)?;

    // NER sentences: two painted objects, both mentioned and tagged.
    let mut ner_split = |n: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Result<Vec<NerSentence>> {
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let mut pick: Vec<usize> = (0..CLASSES.len()).collect();
            pick.shuffle(rng);
            let (c1, c2) = (pick[0], pick[1]);
            let (p1, p2, rel) = place_pair(rng);
            let image_id = format!("{prefix}{k:03}");
            write_patch_file(
                &images.join(format!("{image_id}.bin")),
                &world.render(&[(c1, p1.0, p1.1), (c2, p2.0, p2.1)], rng),
            )?;
            let mut tokens = Vec::new();
            let mut tags = Vec::new();
            let push_entity = |tokens: &mut Vec<String>, tags: &mut Vec<String>, c: usize| {
                for (i, w) in words(CLASSES[c].0).into_iter().enumerate() {
                    tags.push(format!("{}-{}", if i == 0 { "B" } else { "I" }, CLASSES[c].1));
                    tokens.push(w);
                }
            };
            let push_o = |tokens: &mut Vec<String>, tags: &mut Vec<String>, s: &str| {
                for w in words(s) {
                    tokens.push(w);
                    tags.push("O".into());
                }
            };
            push_o(&mut tokens, &mut tags, "the");
            push_entity(&mut tokens, &mut tags, c1);
            push_o(&mut tokens, &mut tags, &format!("is {} the", RELATIONS[rel].0));
            push_entity(&mut tokens, &mut tags, c2);
            push_o(&mut tokens, &mut tags, ".");
            texts.push(tokens.join(" "));
            out.push(NerSentence {
                image_id,
                tokens,
                tags,
                line: 0,
            });
        }
        Ok(out)
    };
    let ner_train = ner_split(opts.ner_train, "n", &mut rng)?;
    let ner_dev = ner_split(opts.ner_dev, "d", &mut rng)?;
    write_mner_corpus(&root.join("ner_train.txt"), &ner_train)?;
    write_mner_corpus(&root.join("ner_dev.txt"), &ner_dev)?;

    // Relation instances cycle through the labels so each appears.
    let mut re_split = |n: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Result<String> {
        let mut out = String::new();
        let mut k = 0;
        while k < n {
            let mut pick: Vec<usize> = (0..CLASSES.len()).collect();
            pick.shuffle(rng);
            let (c1, c2) = (pick[0], pick[1]);
            let (p1, p2, rel) = place_pair(rng);
            if rel != k % RELATIONS.len() {
                continue;
            }
            let image_id = format!("{prefix}{k:03}");
            write_patch_file(
                &images.join(format!("{image_id}.bin")),
                &world.render(&[(c1, p1.0, p1.1), (c2, p2.0, p2.1)], rng),
            )?;
            let h = words(CLASSES[c1].0);
            let t = words(CLASSES[c2].0);
            let mut tokens = vec!["the".to_string()];
            let hs = tokens.len();
            tokens.extend(h);
            let he = tokens.len();
            tokens.extend(words(&format!("is {} the", RELATIONS[rel].0)));
            let ts = tokens.len();
            tokens.extend(t);
            let te = tokens.len();
            tokens.push(".".into());
            texts.push(tokens.join(" "));
            out.push_str(&serde_json::to_string(&json!({
                "id": format!("{prefix}{k:03}"),
                "tokens": tokens,
                "h": {"span": [hs, he]},
                "t": {"span": [ts, te]},
                "relation": RELATIONS[rel].1,
                "image_id": image_id,
            }))?);
            out.push('\n');
            k += 1;
        }
        Ok(out)
    };
    let re_train = re_split(opts.re_train, "r", &mut rng)?;
    let re_dev = re_split(opts.re_dev, "s", &mut rng)?;
    write(&root.join("re_train.jsonl"), &re_train)?;
    write(&root.join("re_dev.jsonl"), &re_dev)?;

    for id in TemplateId::ALL {
        let t = PromptTemplate::builtin(id);
        let items: Vec<String> = match id.kind() {
            crate::pseudo_labels::LabelKind::Entity => nouns.iter().cloned().collect(),
            crate::pseudo_labels::LabelKind::Relation => RELATIONS.iter().map(|r| r.0.to_string()).collect(),
        };
        texts.extend(items.iter().map(|i| t.render(i)));
    }
    let mut vocab_words = BTreeSet::new();
    for t in &texts {
        vocab_words.extend(segment(t));
    }
    let vocab = Vocab::new(std::iter::once(UNK.to_string()).chain(vocab_words).collect())?;
    vocab.write(&root.join("vocab.txt"))?;

    let base = |stage: Stage| {
        let mut c = RunConfig::new(stage).with_seed(opts.seed);
        c.encoder = toy_encoder();
        c.encoder.seed = opts.seed;
        c.paths.vocab = Some("vocab.txt".into());
        c.paths.patch_dir = Some("images".into());
        c
    };
    let save = |cfg: &RunConfig, name: &str| -> Result<PathBuf> {
        let p = root.join(name);
        write(&p, &cfg.to_toml_string()?)?;
        Ok(p)
    };

    let mut pre = base(Stage::Pretrain);
    pre.paths.train = Some("pretrain.jsonl".into());
    pre.paths.pos_lexicon = Some("pos_lexicon.tsv".into());
    pre.paths.relation_tags = Some("relation_tags.txt".into());
    pre.paths.proposals = Some("proposals.jsonl".into());
    pre.paths.pseudo_label_cache = Some("out/pseudo_labels.jsonl".into());
    pre.paths.out_dir = Some("out/pretrain".into());
    pre.pseudo_labels.num_entities = nouns.len();
    pre.pseudo_labels.detector = DetectorKind::Fixture;
    pre.optimizer.learning_rate = TOY_PRETRAIN_LR;
    pre.max_steps = 500;
    let pretrain_config = save(&pre, "pretrain.toml")?;

    let mut gen = pre.clone();
    gen.stage = Stage::GenPseudoLabels;
    gen.paths.out_dir = Some("out".into());
    let gen_config = save(&gen, "gen_pseudo_labels.toml")?;

    let mut ner = base(Stage::FinetuneNer);
    ner.paths.train = Some("ner_train.txt".into());
    ner.paths.dev = Some("ner_dev.txt".into());
    ner.paths.out_dir = Some("out/ner".into());
    ner.finetune.entity_types = TYPES.iter().map(|t| t.to_string()).collect();
    ner.finetune.eval_train = true;
    ner.optimizer.learning_rate = TOY_FINETUNE_LR;
    ner.max_steps = 200;
    let ner_config = save(&ner, "finetune_ner.toml")?;

    let mut re = base(Stage::FinetuneRe);
    re.paths.train = Some("re_train.jsonl".into());
    re.paths.dev = Some("re_dev.jsonl".into());
    re.paths.relation_labels = Some("relation_labels.txt".into());
    re.paths.out_dir = Some("out/re".into());
    re.finetune.eval_train = true;
    re.optimizer.learning_rate = TOY_FINETUNE_LR;
    re.max_steps = 200;
    let re_config = save(&re, "finetune_re.toml")?;

    let mut eval_ner = ner.clone();
    eval_ner.stage = Stage::Eval;
    eval_ner.eval.task = Task::Ner;
    eval_ner.paths.checkpoint = Some("out/ner/checkpoint.json".into());
    eval_ner.paths.out_dir = Some("out/eval_ner".into());
    let eval_ner_config = save(&eval_ner, "eval_ner.toml")?;

    let mut eval_re = re.clone();
    eval_re.stage = Stage::Eval;
    eval_re.eval.task = Task::Re;
    eval_re.paths.checkpoint = Some("out/re/checkpoint.json".into());
    eval_re.paths.out_dir = Some("out/eval_re".into());
    let eval_re_config = save(&eval_re, "eval_re.toml")?;

    Ok(ToyCorpus {
        root: root.to_path_buf(),
        pretrain_config,
        gen_config,
        ner_config,
        re_config,
        eval_ner_config,
        eval_re_config,
    })
}

/// Learning rates of the generated configs.
pub const TOY_PRETRAIN_LR: f64 = 1e-4;
pub const TOY_FINETUNE_LR: f64 = 1e-4;
