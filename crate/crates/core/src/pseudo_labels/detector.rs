use std::collections::HashMap;
use std::path::Path;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::alignment::{BBox, ObjectProposal};
use crate::encoders::PatchGrid;
use crate::error::{Error, Result};
use crate::exec::Parallelism;

/// Minimum fraction of a patch's area a box must cover to include it.
pub const PATCH_COVERAGE: f64 = 0.5;

/// Source of object boxes for an image.
pub trait ObjectDetector: Send + Sync {
    fn detect(&self, sample_id: &str, image: &PatchGrid) -> Result<Vec<BBox>>;
}

/// Boxes read from a sidecar file of `{sample_id, bboxes}` lines. Samples
/// absent from the file have no objects.
#[derive(Clone, Debug, Default)]
pub struct FixtureDetector {
    boxes: HashMap<String, Vec<BBox>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureLine {
    sample_id: String,
    bboxes: Vec<[f64; 4]>,
}

impl FixtureDetector {
    pub fn new(boxes: HashMap<String, Vec<BBox>>) -> Self {
        Self { boxes }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut boxes = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureLine = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            let bbs = rec
                .bboxes
                .iter()
                .map(|&[x0, y0, x1, y1]| BBox::new(x0, y0, x1, y1))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| parse_err(i + 1, e.to_string()))?;
            if boxes.insert(rec.sample_id.clone(), bbs).is_some() {
                return Err(parse_err(i + 1, format!("duplicate sample `{}`", rec.sample_id)));
            }
        }
        Ok(Self { boxes })
    }
}

impl ObjectDetector for FixtureDetector {
    fn detect(&self, sample_id: &str, _image: &PatchGrid) -> Result<Vec<BBox>> {
        Ok(self.boxes.get(sample_id).cloned().unwrap_or_default())
    }
}

/// Random axis-aligned crops, seeded per sample so results do not depend on
/// call order.
#[derive(Clone, Debug)]
pub struct RandomCropDetector {
    pub seed: u64,
    pub crops_per_image: usize,
    pub min_side: f64,
    pub max_side: f64,
}

impl RandomCropDetector {
    pub fn new(seed: u64, crops_per_image: usize) -> Self {
        Self {
            seed,
            crops_per_image,
            min_side: 0.3,
            max_side: 0.7,
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl ObjectDetector for RandomCropDetector {
    fn detect(&self, sample_id: &str, _image: &PatchGrid) -> Result<Vec<BBox>> {
        if !(0.0 < self.min_side && self.min_side <= self.max_side && self.max_side <= 1.0) {
            return Err(Error::config(
                "random crop side bounds must satisfy 0 < min <= max <= 1",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(sample_id));
        (0..self.crops_per_image)
            .map(|_| {
                let w = rng.random_range(self.min_side..=self.max_side);
                let h = rng.random_range(self.min_side..=self.max_side);
                let x0 = rng.random_range(0.0..=1.0 - w);
                let y0 = rng.random_range(0.0..=1.0 - h);
                BBox::new(x0, y0, (x0 + w).min(1.0), (y0 + h).min(1.0))
            })
            .collect()
    }
}

/// 1-based indices of the grid patches whose area `bbox` covers by at least
/// [`PATCH_COVERAGE`].
pub fn patches_covered(bbox: &BBox, side: usize) -> Vec<usize> {
    let s = side as f64;
    let cell_area = 1.0 / (s * s);
    let mut out = Vec::new();
    for r in 0..side {
        for c in 0..side {
            let cell = BBox([c as f64 / s, r as f64 / s, (c + 1) as f64 / s, (r + 1) as f64 / s]);
            if bbox.intersection_area(&cell) / cell_area >= PATCH_COVERAGE - 1e-12 {
                out.push(r * side + c + 1);
            }
        }
    }
    out
}

/// Detects objects and maps each box to the patches it covers. Boxes that
/// cover no patch are dropped. Detector failures become
/// [`Error::External`] tagged with the sample id.
pub fn propose_objects(
    sample_id: &str,
    image: &PatchGrid,
    side: usize,
    detector: &dyn ObjectDetector,
) -> Result<Vec<ObjectProposal>> {
    if side * side != image.num_patches() {
        return Err(Error::input(format!(
            "sample `{sample_id}`: {} patches do not form a {side}x{side} grid",
            image.num_patches()
        )));
    }
    let boxes = detector.detect(sample_id, image).map_err(|e| match e {
        e @ Error::External { .. } => e,
        other => Error::External {
            sample_id: sample_id.to_string(),
            message: other.to_string(),
        },
    })?;
    Ok(boxes
        .into_iter()
        .filter_map(|bbox| {
            let patch_indices = patches_covered(&bbox, side);
            if patch_indices.is_empty() {
                debug!("sample `{sample_id}`: box {:?} covers no patch, dropped", bbox.0);
                return None;
            }
            Some(ObjectProposal { bbox, patch_indices })
        })
        .collect())
}

/// Proposals per sample; `None` where the detector failed.
#[derive(Clone, Debug, Default)]
pub struct ProposalReport {
    pub proposals: Vec<Option<Vec<ObjectProposal>>>,
    pub failures: Vec<(String, String)>,
}

pub fn collect_proposals(
    samples: &[(String, PatchGrid)],
    side: usize,
    detector: &dyn ObjectDetector,
    par: Parallelism,
) -> ProposalReport {
    let results = par.map(samples, |(id, grid)| propose_objects(id, grid, side, detector));
    let mut report = ProposalReport::default();
    for ((id, _), r) in samples.iter().zip(results) {
        match r {
            Ok(p) => report.proposals.push(Some(p)),
            Err(e) => {
                log::warn!("skipping sample `{id}`: {e}");
                report.failures.push((id.clone(), e.to_string()));
                report.proposals.push(None);
            }
        }
    }
    report
}
