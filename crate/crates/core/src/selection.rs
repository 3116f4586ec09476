//! Per-frame confidence and the query / self-label / discard policy.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionThresholds {
    pub th_l: f64,
    pub th_h: f64,
    pub th_m: f64,
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        Self {
            th_l: 0.3,
            th_h: 0.4,
            th_m: 0.1,
        }
    }
}

impl SelectionThresholds {
    /// `0 <= th_m <= th_l <= th_h <= 1`. Equal `th_l` and `th_h` are accepted
    /// so the policy can be forced to one outcome.
    pub fn validate(&self) -> Result<()> {
        if 0.0 <= self.th_m && self.th_m <= self.th_l && self.th_l <= self.th_h && self.th_h <= 1.0
        {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "selection thresholds must satisfy 0 <= th_m <= th_l <= th_h <= 1, got {self:?}"
            )))
        }
    }
}

/// Ordered so that `QueryHuman < Discard < SelfLabel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    QueryHuman,
    Discard,
    SelfLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDecision {
    pub kind: DecisionKind,
    pub frame_score: f64,
    pub reason: String,
}

/// Mean detection score; `0.0` without detections.
pub fn frame_score(dets: &[Detection]) -> f64 {
    if dets.is_empty() {
        0.0
    } else {
        dets.iter().map(|d| d.score).sum::<f64>() / dets.len() as f64
    }
}

pub fn select(dets: &[Detection], th: &SelectionThresholds) -> FrameDecision {
    let s = frame_score(dets);
    let min = dets.iter().map(|d| d.score).fold(f64::INFINITY, f64::min);
    let (kind, reason) = if dets.is_empty() {
        (DecisionKind::QueryHuman, "no detections".to_string())
    } else if min < th.th_m {
        (
            DecisionKind::QueryHuman,
            format!("min score {min:.4} < th_m {}", th.th_m),
        )
    } else if s < th.th_l {
        (
            DecisionKind::QueryHuman,
            format!("mean score {s:.4} < th_l {}", th.th_l),
        )
    } else if s > th.th_h {
        (
            DecisionKind::SelfLabel,
            format!("mean score {s:.4} > th_h {}", th.th_h),
        )
    } else {
        (
            DecisionKind::Discard,
            format!("mean score {s:.4} in [{}, {}]", th.th_l, th.th_h),
        )
    };
    FrameDecision {
        kind,
        frame_score: s,
        reason,
    }
}

#[derive(Serialize)]
struct DecisionLine<'a> {
    frame_id: u64,
    kind: DecisionKind,
    score: f64,
    reason: &'a str,
}

pub fn write_decision_jsonl<W: Write>(out: &mut W, frame_id: u64, d: &FrameDecision) -> Result<()> {
    let line = DecisionLine {
        frame_id,
        kind: d.kind,
        score: d.frame_score,
        reason: &d.reason,
    };
    serde_json::to_writer(&mut *out, &line)?;
    out.write_all(b"\n")
        .map_err(|e| Error::io("<decisions>", e))
}
