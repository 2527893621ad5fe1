use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PseudoLabeler, TemplateId};
use crate::alignment::{BBox, ObjectProposal, ObjectTarget, PretrainSample, SoftLabelDistribution};
use crate::encoders::PatchGrid;
use crate::error::{Error, Result};
use crate::exec::Parallelism;

pub const CACHE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Entity,
    Relation,
}

/// One cached pseudo-label. Entity entries carry their proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelCacheEntry {
    pub schema_version: u32,
    pub sample_id: String,
    pub kind: LabelKind,
    pub template_id: TemplateId,
    pub tau: f64,
    pub probs: SoftLabelDistribution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_indices: Option<Vec<usize>>,
}

impl PseudoLabelCacheEntry {
    pub fn proposal(&self) -> Option<ObjectProposal> {
        Some(ObjectProposal {
            bbox: self.bbox?,
            patch_indices: self.patch_indices.clone()?,
        })
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.schema_version != CACHE_SCHEMA_VERSION {
            return Err(format!(
                "schema version {} not supported (expected {CACHE_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.template_id.kind() != self.kind {
            return Err(format!(
                "template {} does not match kind {:?}",
                self.template_id, self.kind
            ));
        }
        match (self.kind, self.bbox.is_some(), self.patch_indices.is_some()) {
            (LabelKind::Entity, true, true) | (LabelKind::Relation, false, false) => Ok(()),
            (LabelKind::Entity, ..) => Err("entity entry without a proposal".into()),
            (LabelKind::Relation, ..) => Err("relation entry with a proposal".into()),
        }
    }
}

/// Keeps 9 significant digits so the cache text is stable across platforms.
fn round_sig9(p: f64) -> f64 {
    format!("{p:.8e}").parse().expect("formatted float parses")
}

fn rounded(d: &SoftLabelDistribution) -> Result<SoftLabelDistribution> {
    SoftLabelDistribution::new(d.probs().iter().map(|&p| round_sig9(p)).collect())
}

#[derive(Clone, Debug)]
pub struct CacheSample {
    pub id: String,
    pub patches: PatchGrid,
    pub proposals: Vec<ObjectProposal>,
}

fn sample_entries(s: &CacheSample, labeler: &PseudoLabeler) -> Result<Vec<PseudoLabelCacheEntry>> {
    let tau = labeler.tau();
    let mut out = Vec::with_capacity(s.proposals.len() + 1);
    for p in &s.proposals {
        p.validate(s.patches.num_patches())?;
        out.push(PseudoLabelCacheEntry {
            schema_version: CACHE_SCHEMA_VERSION,
            sample_id: s.id.clone(),
            kind: LabelKind::Entity,
            template_id: labeler.entity_template(),
            tau,
            probs: rounded(&labeler.entity_label(&s.patches, &p.bbox)?)?,
            bbox: Some(p.bbox),
            patch_indices: Some(p.patch_indices.clone()),
        });
    }
    out.push(PseudoLabelCacheEntry {
        schema_version: CACHE_SCHEMA_VERSION,
        sample_id: s.id.clone(),
        kind: LabelKind::Relation,
        template_id: labeler.relation_template(),
        tau,
        probs: rounded(&labeler.relation_label(&s.patches)?)?,
        bbox: None,
        patch_indices: None,
    });
    Ok(out)
}

/// Entity entries for each proposal followed by one relation entry, per
/// sample, in input order. Samples are labelled in parallel.
pub fn build_cache(
    samples: &[CacheSample],
    labeler: &PseudoLabeler,
    par: Parallelism,
) -> Result<Vec<PseudoLabelCacheEntry>> {
    let per_sample = par.map(samples, |s| {
        sample_entries(s, labeler).map_err(|e| match e {
            Error::Input(m) => Error::Input(format!("sample `{}`: {m}", s.id)),
            Error::Internal(m) => Error::Internal(format!("sample `{}`: {m}", s.id)),
            other => other,
        })
    });
    let mut out = Vec::new();
    for entries in per_sample {
        out.extend(entries?);
    }
    Ok(out)
}

/// Writes to a sibling temporary file and renames it into place, so readers
/// never see a partial cache.
pub fn write_cache(path: &Path, entries: &[PseudoLabelCacheEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<Vec<PseudoLabelCacheEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let entry: PseudoLabelCacheEntry = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        entry.check().map_err(parse_err)?;
        out.push(entry);
    }
    Ok(out)
}

/// Replaces each sample's object targets and relation label with the cached
/// ones. Samples without entries end up with neither.
pub fn attach_labels(samples: &mut [PretrainSample], entries: &[PseudoLabelCacheEntry]) -> Result<()> {
    let mut by_id: HashMap<&str, Vec<&PseudoLabelCacheEntry>> = HashMap::new();
    for e in entries {
        by_id.entry(e.sample_id.as_str()).or_default().push(e);
    }
    for s in samples.iter_mut() {
        s.objects.clear();
        s.relation_label = None;
        for e in by_id.remove(s.id.as_str()).unwrap_or_default() {
            match e.kind {
                LabelKind::Entity => s.objects.push(ObjectTarget {
                    proposal: e
                        .proposal()
                        .ok_or_else(|| Error::input(format!("entity entry for `{}` lacks a proposal", s.id)))?,
                    entity_label: e.probs.clone(),
                }),
                LabelKind::Relation => {
                    if s.relation_label.replace(e.probs.clone()).is_some() {
                        return Err(Error::input(format!("duplicate relation entry for `{}`", s.id)));
                    }
                }
            }
        }
    }
    if let Some(id) = by_id.keys().min() {
        log::warn!("{} cache entries name unknown samples, e.g. `{id}`", by_id.len());
    }
    Ok(())
}
