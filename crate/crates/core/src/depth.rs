//! Automatic in-hand supervision from depth: segment the blob closest to the
//! camera and box it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Row-major depth image in meters; `0.0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDepth", into = "RawDepth")]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct RawDepth {
    w: usize,
    h: usize,
    values: Vec<f32>,
}

impl TryFrom<RawDepth> for DepthMap {
    type Error = Error;

    fn try_from(r: RawDepth) -> Result<Self> {
        DepthMap::new(r.w, r.h, r.values)
    }
}

impl From<DepthMap> for RawDepth {
    fn from(d: DepthMap) -> Self {
        RawDepth {
            w: d.width,
            h: d.height,
            values: d.values,
        }
    }
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width * height != values.len() {
            return Err(Error::InvalidInput(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "depth values must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, depth: f32) -> Self {
        Self {
            width,
            height,
            values: vec![depth; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, depth: f32) {
        self.values[row * self.width + col] = depth;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobConfig {
    /// Pixels within this many meters of the closest valid depth join the mask.
    pub depth_delta: f32,
    pub min_area: usize,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            depth_delta: 0.15,
            min_area: 9,
        }
    }
}

impl BlobConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_delta > 0.0) || self.min_area < 1 {
            return Err(Error::Config(
                "blob config needs depth_delta > 0 and min_area >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Tight box around the largest 4-connected component of pixels lying within
/// `depth_delta` of the nearest valid depth.
///
/// Components smaller than `min_area` are ignored; among equally large
/// components the first one in row-major order wins.
pub fn nearest_blob_box(map: &DepthMap, cfg: &BlobConfig) -> Result<BoundingBox> {
    cfg.validate()?;
    let no_blob = Error::NoBlob {
        min_area: cfg.min_area,
    };
    let d0 = map
        .values
        .iter()
        .copied()
        .filter(|v| *v > 0.0)
        .fold(f32::INFINITY, f32::min);
    if !d0.is_finite() {
        return Err(no_blob);
    }
    let limit = d0 + cfg.depth_delta;
    let (w, h) = (map.width, map.height);
    let mask: Vec<bool> = map.values.iter().map(|&v| v > 0.0 && v <= limit).collect();

    let mut visited = vec![false; w * h];
    let mut queue = VecDeque::new();
    // (area, col_min, row_min, col_max, row_max)
    let mut best: Option<(usize, usize, usize, usize, usize)> = None;

    for start in 0..w * h {
        if !mask[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let (mut area, mut c0, mut r0, mut c1, mut r1) = (0, usize::MAX, usize::MAX, 0, 0);
        while let Some(idx) = queue.pop_front() {
            let (col, row) = (idx % w, idx / w);
            area += 1;
            c0 = c0.min(col);
            r0 = r0.min(row);
            c1 = c1.max(col);
            r1 = r1.max(row);
            let mut visit = |n: usize| {
                if mask[n] && !visited[n] {
                    visited[n] = true;
                    queue.push_back(n);
                }
            };
            if col > 0 {
                visit(idx - 1);
            }
            if col + 1 < w {
                visit(idx + 1);
            }
            if row > 0 {
                visit(idx - w);
            }
            if row + 1 < h {
                visit(idx + w);
            }
        }
        if area >= cfg.min_area && best.is_none_or(|b| area > b.0) {
            best = Some((area, c0, r0, c1, r1));
        }
    }

    let (_, c0, r0, c1, r1) = best.ok_or(no_blob)?;
    BoundingBox::new(
        c0 as f64,
        r0 as f64,
        (c1 - c0 + 1) as f64,
        (r1 - r0 + 1) as f64,
    )
}

/// Fixation point for the gaze controller: the box center.
pub fn gaze_target(bbox: &BoundingBox) -> (f64, f64) {
    bbox.center()
}
