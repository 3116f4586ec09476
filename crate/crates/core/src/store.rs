//! Labeled frames accumulated across phases, tagged by where the labels
//! came from.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LabeledBox;
use crate::world::io::{load_sequence, read_json, save_sequence, write_json};
use crate::world::{ExplorationSequence, FrameRecord};

/// Tolerance, in pixels, for labels poking out of the frame.
const BOUNDS_TOL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    AutoDepth,
    Human,
    Tracker,
    SelfSupervised,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::AutoDepth => "auto_depth",
            LabelSource::Human => "human",
            LabelSource::Tracker => "tracker",
            LabelSource::SelfSupervised => "self_supervised",
        }
    }
}

/// A frame's proposals together with training labels. The labels live in
/// `frame.ground_truth`; they are whatever the source produced, not the
/// true boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredFrame {
    pub sequence: String,
    pub source: LabelSource,
    pub frame: FrameRecord,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetStore {
    frames: Vec<StoredFrame>,
    keys: HashSet<(String, u64)>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    sequences: Vec<ManifestSequence>,
    frames: Vec<ManifestFrame>,
}

#[derive(Serialize, Deserialize)]
struct ManifestSequence {
    name: String,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestFrame {
    sequence: String,
    frame_id: u64,
    source: LabelSource,
}

const MANIFEST: &str = "manifest.json";

impl DatasetStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[StoredFrame] {
        &self.frames
    }

    /// Stores `frame` with `labels` in place of its ground truth. The depth
    /// map is dropped; training only needs proposals.
    pub fn add(
        &mut self,
        sequence: &str,
        frame: &FrameRecord,
        labels: Vec<LabeledBox>,
        source: LabelSource,
    ) -> Result<()> {
        let key = (sequence.to_string(), frame.frame_id);
        if self.keys.contains(&key) {
            return Err(Error::InvalidInput(format!(
                "frame {} of sequence {sequence:?} already stored",
                frame.frame_id
            )));
        }
        let (w, h) = (frame.width as f64, frame.height as f64);
        if let Some(bad) = labels
            .iter()
            .find(|l| !l.bbox.within_frame(w, h, BOUNDS_TOL))
        {
            return Err(Error::InvalidInput(format!(
                "label {:?} outside {}x{} frame",
                bad.bbox, frame.width, frame.height
            )));
        }
        self.keys.insert(key);
        self.frames.push(StoredFrame {
            sequence: sequence.to_string(),
            source,
            frame: FrameRecord {
                frame_id: frame.frame_id,
                width: frame.width,
                height: frame.height,
                ground_truth: labels,
                proposals: frame.proposals.clone(),
                depth: None,
            },
        });
        Ok(())
    }

    pub fn count_by_source(&self) -> BTreeMap<LabelSource, usize> {
        let mut out = BTreeMap::new();
        for f in &self.frames {
            *out.entry(f.source).or_insert(0) += 1;
        }
        out
    }

    /// Sorted class ids that carry at least one label.
    pub fn labeled_classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self
            .frames
            .iter()
            .flat_map(|f| f.frame.ground_truth.iter().map(|l| l.class_id))
            .collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Writes one gzipped sequence file per sequence plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut grouped: Vec<(String, Vec<FrameRecord>)> = Vec::new();
        for f in &self.frames {
            match grouped.iter_mut().find(|(n, _)| *n == f.sequence) {
                Some((_, v)) => v.push(f.frame.clone()),
                None => grouped.push((f.sequence.clone(), vec![f.frame.clone()])),
            }
        }
        let mut sequences = Vec::with_capacity(grouped.len());
        for (i, (name, mut frames)) in grouped.into_iter().enumerate() {
            frames.sort_by_key(|f| f.frame_id);
            let file = format!("{i:03}-{}.json.gz", sanitize(&name));
            let seq = ExplorationSequence {
                domain_tag: name.clone(),
                frames,
            };
            save_sequence(&seq, &dir.join(&file))?;
            sequences.push(ManifestSequence { name, file });
        }
        let manifest = Manifest {
            sequences,
            frames: self
                .frames
                .iter()
                .map(|f| ManifestFrame {
                    sequence: f.sequence.clone(),
                    frame_id: f.frame.frame_id,
                    source: f.source,
                })
                .collect(),
        };
        write_json(&dir.join(MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
        let mut by_key: BTreeMap<(String, u64), FrameRecord> = BTreeMap::new();
        for s in &manifest.sequences {
            let seq = load_sequence(&dir.join(&s.file))?;
            for f in seq.frames {
                by_key.insert((s.name.clone(), f.frame_id), f);
            }
        }
        let mut store = DatasetStore::new();
        for m in manifest.frames {
            let key = (m.sequence.clone(), m.frame_id);
            let frame = by_key.remove(&key).ok_or_else(|| Error::Schema {
                path: dir.join(MANIFEST),
                message: format!(
                    "frame {} of {:?} missing from sequence files",
                    m.frame_id, m.sequence
                ),
            })?;
            let labels = frame.ground_truth.clone();
            store.add(&m.sequence, &frame, labels, m.source)?;
        }
        Ok(store)
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
