//! Corpus readers and the binary patch-feature format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::PatchGrid;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// First four bytes of every patch file; a little-endian `u32` version follows.
pub const PATCH_MAGIC: [u8; 4] = *b"PGRD";
pub const PATCH_VERSION: u32 = 1;

pub fn write_patch_file(path: &Path, grid: &PatchGrid) -> Result<()> {
    let feats = grid.features();
    let mut buf = Vec::with_capacity(8 + feats.len() * 4);
    buf.extend_from_slice(&PATCH_MAGIC);
    buf.extend_from_slice(&PATCH_VERSION.to_le_bytes());
    for &v in feats.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a `num_patches x feature_dim` grid and checks the header and size.
pub fn read_patch_file(path: &Path, num_patches: usize, feature_dim: usize) -> Result<PatchGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::input(format!("{}: {m}", path.display()));
    if bytes.len() < 8 || bytes[..4] != PATCH_MAGIC {
        return Err(bad("missing patch-file magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != PATCH_VERSION {
        return Err(bad(format!("unsupported patch-file version {version}")));
    }
    let want = num_patches * feature_dim * 4;
    if bytes.len() - 8 != want {
        return Err(bad(format!(
            "expected {num_patches}x{feature_dim} f32 values ({want} bytes), found {} bytes",
            bytes.len() - 8
        )));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    PatchGrid::new(Matrix::from_vec(num_patches, feature_dim, data)).map_err(|e| bad(e.to_string()))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads one JSON record per non-blank line.
fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| parse_error(path, i + 1, e.to_string()))?;
        out.push((i + 1, rec));
    }
    if out.is_empty() {
        return Err(Error::input(format!("{}: corpus has no records", path.display())));
    }
    Ok(out)
}

/// One image-caption pair. `patch_file` is relative to the corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRecord {
    pub id: String,
    pub caption: String,
    pub patch_file: PathBuf,
    #[serde(rename = "match")]
    pub matched: u8,
}

pub fn read_pretrain_corpus(path: &Path) -> Result<Vec<PretrainRecord>> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (line, mut rec) in read_jsonl::<PretrainRecord>(path)? {
        if rec.matched > 1 {
            return Err(parse_error(
                path,
                line,
                format!("match must be 0 or 1, got {}", rec.matched),
            ));
        }
        if rec.caption.trim().is_empty() {
            return Err(parse_error(path, line, "empty caption"));
        }
        if rec.patch_file.is_relative() {
            rec.patch_file = base.join(&rec.patch_file);
        }
        if !rec.patch_file.is_file() {
            return Err(parse_error(
                path,
                line,
                format!("patch file {} does not exist", rec.patch_file.display()),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

/// A tagged sentence with the id of its image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NerSentence {
    pub image_id: String,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    /// Line of the first token, for error messages.
    pub line: usize,
}

/// `token<TAB>tag` per line, blank lines between sentences, and one
/// `#image <id>` line before each sentence.
pub fn read_mner_corpus(path: &Path) -> Result<Vec<NerSentence>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    let mut image: Option<String> = None;
    let mut cur = NerSentence {
        image_id: String::new(),
        tokens: Vec::new(),
        tags: Vec::new(),
        line: 0,
    };
    let flush = |cur: &mut NerSentence, out: &mut Vec<NerSentence>| {
        if !cur.tokens.is_empty() {
            out.push(std::mem::replace(
                cur,
                NerSentence {
                    image_id: String::new(),
                    tokens: Vec::new(),
                    tags: Vec::new(),
                    line: 0,
                },
            ));
        }
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut cur, &mut out);
            continue;
        }
        if let Some(rest) = line.strip_prefix("#image") {
            if !cur.tokens.is_empty() {
                return Err(parse_error(path, line_no, "`#image` inside a sentence"));
            }
            let id = rest.trim();
            if id.is_empty() {
                return Err(parse_error(path, line_no, "`#image` without an id"));
            }
            image = Some(id.to_string());
            continue;
        }
        let (tok, tag) = line
            .split_once('\t')
            .ok_or_else(|| parse_error(path, line_no, "expected `token<TAB>tag`"))?;
        if tok.is_empty() || tag.trim().is_empty() {
            return Err(parse_error(path, line_no, "empty token or tag"));
        }
        if cur.tokens.is_empty() {
            cur.image_id = image
                .take()
                .ok_or_else(|| parse_error(path, line_no, "sentence has no `#image <id>` line"))?;
            cur.line = line_no;
        }
        cur.tokens.push(tok.to_string());
        cur.tags.push(tag.trim().to_string());
    }
    flush(&mut cur, &mut out);
    if out.is_empty() {
        return Err(Error::input(format!("{}: corpus has no sentences", path.display())));
    }
    Ok(out)
}

/// Writes sentences in the format [`read_mner_corpus`] reads.
pub fn write_mner_corpus(path: &Path, sentences: &[NerSentence]) -> Result<()> {
    let mut s = String::new();
    for sent in sentences {
        s.push_str(&format!("#image {}\n", sent.image_id));
        for (t, g) in sent.tokens.iter().zip(&sent.tags) {
            s.push_str(&format!("{t}\t{g}\n"));
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanRef {
    /// Half-open `[start, end)` token range.
    pub span: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MreRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub h: SpanRef,
    pub t: SpanRef,
    pub relation: String,
    pub image_id: String,
}

pub fn read_mre_corpus(path: &Path) -> Result<Vec<(usize, MreRecord)>> {
    let recs = read_jsonl::<MreRecord>(path)?;
    for (line, r) in &recs {
        let n = r.tokens.len();
        if n == 0 {
            return Err(parse_error(path, *line, "empty token list"));
        }
        for (name, s) in [("h", r.h.span), ("t", r.t.span)] {
            if s[0] >= s[1] || s[1] > n {
                return Err(parse_error(
                    path,
                    *line,
                    format!("{name}.span [{}, {}) invalid for {n} tokens", s[0], s[1]),
                ));
            }
        }
        if r.h.span[0] < r.t.span[1] && r.t.span[0] < r.h.span[1] {
            return Err(parse_error(path, *line, "head and tail spans overlap"));
        }
    }
    Ok(recs)
}

/// Patch file of a NER or RE image.
pub fn image_path(patch_dir: &Path, image_id: &str) -> PathBuf {
    patch_dir.join(format!("{image_id}.bin"))
}
