//! Sequence files: one JSON document per exploration sequence, gzip-wrapped
//! when the path ends in `.gz`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ExplorationSequence, FrameRecord, Proposal};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::LabeledBox;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SequenceFile {
    schema_version: u32,
    domain_tag: String,
    frames: Vec<FrameEntry>,
}

#[derive(Serialize, Deserialize)]
struct FrameEntry {
    frame_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<usize>,
    ground_truth: Vec<LabeledBox>,
    proposals: Vec<Proposal>,
    depth: Option<DepthMap>,
}

impl From<&FrameRecord> for FrameEntry {
    fn from(f: &FrameRecord) -> Self {
        FrameEntry {
            frame_id: f.frame_id,
            width: Some(f.width),
            height: Some(f.height),
            ground_truth: f.ground_truth.clone(),
            proposals: f.proposals.clone(),
            depth: f.depth.clone(),
        }
    }
}

impl FrameEntry {
    /// Frames written by external tools may omit the size; fall back to the
    /// depth map, then to the extent of every box in the frame.
    fn into_record(self) -> FrameRecord {
        let extent = |pick: fn(&crate::geometry::BoundingBox) -> f64| {
            self.ground_truth
                .iter()
                .map(|g| pick(&g.bbox))
                .chain(self.proposals.iter().map(|p| pick(&p.bbox)))
                .fold(1.0f64, f64::max)
                .ceil() as usize
        };
        let width = self
            .width
            .or(self.depth.as_ref().map(|d| d.width))
            .unwrap_or_else(|| extent(|b| b.x_max()));
        let height = self
            .height
            .or(self.depth.as_ref().map(|d| d.height))
            .unwrap_or_else(|| extent(|b| b.y_max()));
        FrameRecord {
            frame_id: self.frame_id,
            width,
            height,
            ground_truth: self.ground_truth,
            proposals: self.proposals,
            depth: self.depth,
        }
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Serializes `value` as JSON to `path`, gzip-compressed for `.gz` paths.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let map_err = |e: serde_json::Error| match e.io_error_kind() {
        Some(kind) => Error::io(path, std::io::Error::new(kind, e)),
        None => Error::Json(e),
    };
    if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        serde_json::to_writer(&mut enc, value).map_err(map_err)?;
        enc.finish()
            .and_then(|mut w| w.flush())
            .map_err(|e| Error::io(path, e))?;
    } else {
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, value).map_err(map_err)?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Reads and parses a JSON (or `.gz` JSON) file.
///
/// Truncated input surfaces as an I/O error; well-formed JSON with the wrong
/// shape surfaces as a schema error.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    if is_gz(path) {
        GzDecoder::new(BufReader::new(file))
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    } else {
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    }
    serde_json::from_slice(&bytes).map_err(|e| classify(path, e))
}

fn classify(path: &Path, e: serde_json::Error) -> Error {
    use serde_json::error::Category;
    match e.classify() {
        Category::Eof | Category::Io => Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::UnexpectedEof, e.to_string()),
        ),
        Category::Syntax | Category::Data => Error::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
    }
}

pub fn save_sequence(seq: &ExplorationSequence, path: &Path) -> Result<()> {
    let doc = SequenceFile {
        schema_version: SCHEMA_VERSION,
        domain_tag: seq.domain_tag.clone(),
        frames: seq.frames.iter().map(FrameEntry::from).collect(),
    };
    write_json(path, &doc)
}

pub fn load_sequence(path: &Path) -> Result<ExplorationSequence> {
    let doc: SequenceFile = read_json(path)?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                doc.schema_version
            ),
        });
    }
    let seq = ExplorationSequence {
        domain_tag: doc.domain_tag,
        frames: doc
            .frames
            .into_iter()
            .map(FrameEntry::into_record)
            .collect(),
    };
    seq.validate().map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{World, WorldConfig};

    fn small_sequence(with_depth: bool) -> ExplorationSequence {
        let world = World::new(WorldConfig {
            frame_w: 64,
            frame_h: 48,
            min_object_side: 8.0,
            max_object_side: 16.0,
            proposals_per_frame: 12,
            jittered_proposals: 8,
            feature_dim: 6,
            objects_per_scene: 2,
            ..Default::default()
        })
        .unwrap();
        let scene = world.generate_scene(1).unwrap();
        let traj = world.tabletop_trajectory(3, 1);
        world
            .make_exploration_sequence(&scene, &traj, 0.5, "tabletop", with_depth, 2)
            .unwrap()
    }

    #[test]
    fn round_trip_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        for (name, depth) in [
            ("seq.json", true),
            ("seq.json.gz", true),
            ("nodepth.json", false),
        ] {
            let seq = small_sequence(depth);
            let path = dir.path().join(name);
            save_sequence(&seq, &path).unwrap();
            assert_eq!(load_sequence(&path).unwrap(), seq, "{name}");
        }
    }

    #[test]
    fn missing_proposals_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"schema_version":1,"domain_tag":"x","frames":[{"frame_id":0,"ground_truth":[],"depth":null}]}"#,
        )
        .unwrap();
        let err = load_sequence(&path).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }), "{err}");
    }

    #[test]
    fn wrong_version_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v2.json");
        std::fs::write(
            &path,
            r#"{"schema_version":2,"domain_tag":"x","frames":[]}"#,
        )
        .unwrap();
        assert!(matches!(load_sequence(&path), Err(Error::Schema { .. })));
    }

    #[test]
    fn truncated_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let seq = small_sequence(false);
        for name in ["t.json", "t.json.gz"] {
            let path = dir.path().join(name);
            save_sequence(&seq, &path).unwrap();
            let bytes = std::fs::read(&path).unwrap();
            std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
            let err = load_sequence(&path).unwrap_err();
            assert!(matches!(err, Error::Io { .. }), "{name}: {err}");
        }
    }

    #[test]
    fn external_frames_without_size_use_box_extent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.json");
        std::fs::write(
            &path,
            r#"{"schema_version":1,"domain_tag":"x","frames":[{"frame_id":3,
               "ground_truth":[{"x":1,"y":1,"w":10,"h":10,"class":0}],
               "proposals":[{"box":{"x":0,"y":0,"w":30,"h":20},"feature":[1.0,0.0]}],
               "depth":null}]}"#,
        )
        .unwrap();
        let seq = load_sequence(&path).unwrap();
        assert_eq!((seq.frames[0].width, seq.frames[0].height), (30, 20));
    }
}
