use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::AdamW;
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Pretrain,
    Ner,
    Re,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
}

/// Position in the deterministic data order: the shuffle for `epoch` is
/// keyed by `(seed, epoch)` and `offset` samples of it have been consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataCursor {
    pub seed: u64,
    pub epoch: u64,
    pub offset: usize,
}

/// Parameters, run configuration and training position. Floats are written
/// in shortest round-trip form, so a reload is bit-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub kind: ModelKind,
    pub vocab: Vec<String>,
    /// Entity candidates (pretrain), entity types (ner) or relation labels (re).
    pub labels: Vec<String>,
    /// Relation tags of the pre-training relation head; empty otherwise.
    #[serde(default)]
    pub relation_tags: Vec<String>,
    pub config: RunConfig,
    pub step: u64,
    pub cursor: DataCursor,
    pub params: Vec<NamedTensor>,
    #[serde(default)]
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn capture(
        kind: ModelKind,
        store: &ParamStore,
        vocab: Vec<String>,
        labels: Vec<String>,
        relation_tags: Vec<String>,
        config: &RunConfig,
        step: u64,
        cursor: DataCursor,
        optimizer: Option<&AdamW>,
    ) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            kind,
            vocab,
            labels,
            relation_tags,
            config: config.clone(),
            step,
            cursor,
            params: store
                .iter()
                .map(|(_, name, value)| NamedTensor {
                    name: name.to_string(),
                    value: value.clone(),
                })
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Writes to a sibling temporary file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(bad) = self.params.iter().find(|t| !t.value.is_finite()) {
            return Err(Error::internal(format!("parameter `{}` is not finite", bad.name)));
        }
        let bytes = serde_json::to_vec(self)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "{}: checkpoint schema {} not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
                path.display(),
                ckpt.schema_version
            )));
        }
        Ok(ckpt)
    }

    fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.params.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    /// Overwrites every store parameter whose name starts with `prefix`.
    /// Each must be present in the checkpoint with the same shape.
    pub fn restore_prefix(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let targets: Vec<_> = store
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, n, m)| (id, n.to_string(), m.rows(), m.cols()))
            .collect();
        for (id, name, rows, cols) in &targets {
            let src = self
                .tensor(name)
                .ok_or_else(|| Error::config(format!("checkpoint has no parameter `{name}`")))?;
            if (src.rows(), src.cols()) != (*rows, *cols) {
                return Err(Error::config(format!(
                    "parameter `{name}` is {}x{} in the checkpoint but {rows}x{cols} in the model",
                    src.rows(),
                    src.cols()
                )));
            }
            *store.get_mut(*id) = src.clone();
        }
        Ok(targets.len())
    }

    /// Overwrites all parameters; the checkpoint must hold exactly the
    /// store's parameter set.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::config(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        self.restore_prefix(store, "").map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Stage;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("enc.a", Matrix::from_vec(1, 3, vec![0.1, 1.0 / 3.0, -2.5e-17]));
        s.add("head.b", Matrix::from_vec(2, 1, vec![std::f64::consts::PI, 7.0]));
        s
    }

    fn capture(s: &ParamStore) -> Checkpoint {
        Checkpoint::capture(
            ModelKind::Ner,
            s,
            vec!["[UNK]".into()],
            vec!["PER".into()],
            vec![],
            &RunConfig::new(Stage::FinetuneNer),
            3,
            DataCursor::default(),
            None,
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/c.json");
        let s = store();
        let c = capture(&s);
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, c);
        let mut other = ParamStore::new();
        other.add("enc.a", Matrix::zeros(1, 3));
        other.add("head.b", Matrix::zeros(2, 1));
        back.restore(&mut other).unwrap();
        for ((_, _, x), (_, _, y)) in s.iter().zip(other.iter()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let c = capture(&store());
        let mut other = ParamStore::new();
        other.add("enc.a", Matrix::zeros(1, 4));
        assert!(matches!(c.restore_prefix(&mut other, "enc."), Err(Error::Config(_))));
        let mut missing = ParamStore::new();
        missing.add("enc.z", Matrix::zeros(1, 1));
        assert!(matches!(c.restore_prefix(&mut missing, "enc."), Err(Error::Config(_))));
    }

    #[test]
    fn prefix_restore_leaves_other_params() {
        let c = capture(&store());
        let mut other = ParamStore::new();
        other.add("enc.a", Matrix::zeros(1, 3));
        other.add("re.head", Matrix::filled(1, 1, 5.0));
        assert_eq!(c.restore_prefix(&mut other, "enc.").unwrap(), 1);
        assert_eq!(other.get(other.id("re.head").unwrap()).data(), &[5.0]);
    }
}
