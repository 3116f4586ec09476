//! Human-in-the-loop annotation: the single-slot request/response hub served
//! over HTTP, and the annotators the refinement loop talks to.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, iou, BoundingBox, Detection, LabeledBox};
use crate::world::FrameRecord;

/// Display names of the 21 benchmark objects, indexed by class id.
pub const CLASS_NAMES: [&str; 21] = [
    "mug",
    "sprayer",
    "book",
    "cellphone",
    "mouse",
    "pencilcase",
    "ringbinder",
    "hairbrush",
    "hairclip",
    "perfume",
    "sunglasses",
    "wallet",
    "flower",
    "glass",
    "remote",
    "soapdispenser",
    "bodylotion",
    "detergent",
    "ovenglove",
    "sodabottle",
    "squeezer",
];

pub fn class_name(class_id: usize) -> String {
    CLASS_NAMES
        .get(class_id)
        .map_or_else(|| format!("class{class_id}"), |s| s.to_string())
}

pub fn class_id_by_name(name: &str) -> Option<usize> {
    CLASS_NAMES
        .iter()
        .position(|n| *n == name)
        .or_else(|| name.strip_prefix("class").and_then(|r| r.parse().ok()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawableRect {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// CSS hex color.
    pub color: String,
}

/// What the annotator is shown: vector rectangles for synthetic scenes, or
/// an encoded bitmap for replayed real data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameRendering {
    pub rects: Vec<DrawableRect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bitmap_base64: Option<String>,
}

impl FrameRendering {
    /// Draws each object in a color tied to its class.
    pub fn from_frame(frame: &FrameRecord) -> Self {
        Self {
            rects: frame
                .ground_truth
                .iter()
                .map(|g| DrawableRect {
                    bbox: g.bbox,
                    color: class_color(g.class_id),
                })
                .collect(),
            bitmap_base64: None,
        }
    }
}

fn class_color(class_id: usize) -> String {
    // golden-angle hue walk, fixed saturation and lightness
    let h = (class_id as f64 * 137.508) % 360.0;
    let (s, l) = (0.65, 0.55);
    let c = (1.0 - (2.0 * l - 1.0f64).abs()) * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    let to = |v: f64| ((v + m) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", to(r), to(g), to(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub request_id: u64,
    pub frame_id: u64,
    pub width: usize,
    pub height: usize,
    pub rendering: FrameRendering,
    pub predicted: Vec<Detection>,
    pub classes: Vec<ClassEntry>,
}

impl AnnotationRequest {
    /// Request for `frame`, showing `predicted`; `request_id` is assigned by
    /// the hub.
    pub fn for_frame(frame: &FrameRecord, predicted: Vec<Detection>, classes: &[usize]) -> Self {
        Self {
            request_id: 0,
            frame_id: frame.frame_id,
            width: frame.width,
            height: frame.height,
            rendering: FrameRendering::from_frame(frame),
            predicted,
            classes: classes
                .iter()
                .map(|&id| ClassEntry {
                    id,
                    name: class_name(id),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub request_id: u64,
    pub boxes: Vec<LabeledBox>,
    #[serde(default)]
    pub accepted_predictions: Vec<bool>,
}

/// Checks a response against the request it answers.
pub fn validate_response(req: &AnnotationRequest, resp: &AnnotationResponse) -> Result<()> {
    let (w, h) = (req.width as f64, req.height as f64);
    for b in &resp.boxes {
        let bb = &b.bbox;
        let finite = [bb.x_min, bb.y_min, bb.width, bb.height]
            .iter()
            .all(|v| v.is_finite());
        if !finite || bb.width <= 0.0 || bb.height <= 0.0 {
            return Err(Error::InvalidInput(format!("degenerate box {bb:?}")));
        }
        if !bb.within_frame(w, h, 0.5) {
            return Err(Error::InvalidInput(format!(
                "box {bb:?} outside the {}x{} frame",
                req.width, req.height
            )));
        }
        if !req.classes.is_empty() && !req.classes.iter().any(|c| c.id == b.class_id) {
            return Err(Error::InvalidInput(format!("unknown class {}", b.class_id)));
        }
    }
    if !resp.accepted_predictions.is_empty()
        && resp.accepted_predictions.len() != req.predicted.len()
    {
        return Err(Error::InvalidInput(format!(
            "{} accept flags for {} predictions",
            resp.accepted_predictions.len(),
            req.predicted.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Default)]
struct Slot {
    next_id: u64,
    pending: Option<AnnotationRequest>,
    response: Option<AnnotationResponse>,
}

/// Single pending-request rendezvous between the refinement loop and the
/// HTTP handlers.
#[derive(Debug, Default)]
pub struct AnnotationHub {
    slot: Mutex<Slot>,
    ready: Condvar,
}

impl AnnotationHub {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, Slot> {
        self.slot.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Publishes `req` with a fresh id and returns the id.
    pub fn post_query(&self, mut req: AnnotationRequest) -> Result<u64> {
        let mut slot = self.lock();
        if let Some(p) = &slot.pending {
            return Err(Error::Busy(format!(
                "request {} is still pending",
                p.request_id
            )));
        }
        slot.next_id += 1;
        req.request_id = slot.next_id;
        slot.pending = Some(req);
        slot.response = None;
        Ok(slot.next_id)
    }

    pub fn pending(&self) -> Option<AnnotationRequest> {
        self.lock().pending.clone()
    }

    /// Accepts a response for the pending request.
    pub fn submit(&self, resp: AnnotationResponse) -> Result<()> {
        let mut slot = self.lock();
        let Some(req) = &slot.pending else {
            return Err(Error::StaleResponse {
                expected: None,
                got: resp.request_id,
            });
        };
        if req.request_id != resp.request_id {
            return Err(Error::StaleResponse {
                expected: Some(req.request_id),
                got: resp.request_id,
            });
        }
        validate_response(req, &resp)?;
        slot.pending = None;
        slot.response = Some(resp);
        self.ready.notify_all();
        Ok(())
    }

    /// Blocks until the pending request is answered. On timeout the request
    /// is withdrawn.
    pub fn await_response(&self, timeout: Duration) -> Result<AnnotationResponse> {
        let deadline = Instant::now() + timeout;
        let mut slot = self.lock();
        loop {
            if let Some(r) = slot.response.take() {
                return Ok(r);
            }
            let now = Instant::now();
            if now >= deadline {
                slot.pending = None;
                return Err(Error::AnnotationTimeout(timeout));
            }
            slot = self
                .ready
                .wait_timeout(slot, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    /// Withdraws any pending request.
    pub fn cancel(&self) {
        let mut slot = self.lock();
        slot.pending = None;
        slot.response = None;
        self.ready.notify_all();
    }
}

/// Ground-truth boxes with each corner moved by Gaussian noise, clipped to
/// the frame.
pub fn oracle_annotate(
    frame: &FrameRecord,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<LabeledBox> {
    let (fw, fh) = (frame.width as f64, frame.height as f64);
    if noise_sigma <= 0.0 {
        return frame.ground_truth.clone();
    }
    let n = Normal::new(0.0, noise_sigma).expect("positive sigma");
    frame
        .ground_truth
        .iter()
        .map(|g| {
            let b = &g.bbox;
            let x0 = b.x_min + n.sample(rng);
            let y0 = b.y_min + n.sample(rng);
            let x1 = (b.x_max() + n.sample(rng)).max(x0 + 1.0);
            let y1 = (b.y_max() + n.sample(rng)).max(y0 + 1.0);
            let noisy = BoundingBox {
                x_min: x0,
                y_min: y0,
                width: x1 - x0,
                height: y1 - y0,
            };
            LabeledBox::new(clip_box(&noisy, fw, fh), g.class_id)
        })
        .collect()
}

/// Whoever answers annotation requests. The refinement loop publishes a
/// request, logs it, then blocks on the answer.
pub trait Annotator: Send {
    /// Publishes a request and returns its id.
    fn request(&mut self, req: AnnotationRequest, frame: &FrameRecord) -> Result<u64>;

    /// Waits for the answer to the last request.
    fn response(&mut self) -> Result<AnnotationResponse>;

    fn annotate(
        &mut self,
        req: AnnotationRequest,
        frame: &FrameRecord,
    ) -> Result<AnnotationResponse> {
        self.request(req, frame)?;
        self.response()
    }
}

/// Scripted teacher answering from the frame's ground truth.
#[derive(Debug, Clone)]
pub struct OracleAnnotator {
    noise_sigma: f64,
    rng: ChaCha8Rng,
    next_id: u64,
    pending: Option<(AnnotationRequest, FrameRecord)>,
}

impl OracleAnnotator {
    pub fn new(noise_sigma: f64, seed: u64) -> Self {
        Self {
            noise_sigma,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
            pending: None,
        }
    }
}

impl Annotator for OracleAnnotator {
    fn request(&mut self, mut req: AnnotationRequest, frame: &FrameRecord) -> Result<u64> {
        if self.pending.is_some() {
            return Err(Error::Busy("oracle request still pending".into()));
        }
        self.next_id += 1;
        req.request_id = self.next_id;
        self.pending = Some((req, frame.clone()));
        Ok(self.next_id)
    }

    fn response(&mut self) -> Result<AnnotationResponse> {
        let (req, frame) = self
            .pending
            .take()
            .ok_or_else(|| Error::InvalidInput("no pending request".into()))?;
        let boxes = oracle_annotate(&frame, self.noise_sigma, &mut self.rng);
        let accepted_predictions = req
            .predicted
            .iter()
            .map(|p| {
                frame
                    .ground_truth
                    .iter()
                    .any(|g| g.class_id == p.class_id && iou(&g.bbox, &p.bbox) >= 0.5)
            })
            .collect();
        Ok(AnnotationResponse {
            request_id: req.request_id,
            boxes,
            accepted_predictions,
        })
    }
}

/// Forwards requests to the HTTP hub and waits for the browser.
#[derive(Debug, Clone)]
pub struct HubAnnotator {
    hub: Arc<AnnotationHub>,
    timeout: Duration,
}

impl HubAnnotator {
    pub fn new(hub: Arc<AnnotationHub>, timeout: Duration) -> Self {
        Self { hub, timeout }
    }
}

impl Annotator for HubAnnotator {
    fn request(&mut self, req: AnnotationRequest, _frame: &FrameRecord) -> Result<u64> {
        self.hub.post_query(req)
    }

    fn response(&mut self) -> Result<AnnotationResponse> {
        self.hub.await_response(self.timeout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Proposal;
    use std::thread;

    fn frame() -> FrameRecord {
        FrameRecord {
            frame_id: 3,
            width: 200,
            height: 150,
            ground_truth: vec![
                LabeledBox::new(BoundingBox::new(20.0, 20.0, 50.0, 50.0).unwrap(), 0),
                LabeledBox::new(BoundingBox::new(120.0, 60.0, 50.0, 50.0).unwrap(), 4),
            ],
            proposals: vec![Proposal {
                bbox: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
                feature: vec![0.0],
            }],
            depth: None,
        }
    }

    fn request() -> AnnotationRequest {
        AnnotationRequest::for_frame(&frame(), vec![], &[0, 4])
    }

    #[test]
    fn names_round_trip() {
        assert_eq!(class_name(0), "mug");
        assert_eq!(class_name(20), "squeezer");
        assert_eq!(class_id_by_name("ovenglove"), Some(18));
        assert_eq!(class_id_by_name("class30"), Some(30));
        assert_eq!(class_id_by_name("banana"), None);
    }

    #[test]
    fn oracle_noise_free_is_exact() {
        let mut a = OracleAnnotator::new(0.0, 1);
        let r = a.annotate(request(), &frame()).unwrap();
        assert_eq!(r.boxes, frame().ground_truth);
        let mut empty = frame();
        empty.ground_truth.clear();
        assert!(a.annotate(request(), &empty).unwrap().boxes.is_empty());
    }

    #[test]
    fn oracle_noise_keeps_high_overlap() {
        let f = frame();
        let mut total = 0.0;
        let mut count = 0;
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (b, g) in oracle_annotate(&f, 2.0, &mut rng)
                .iter()
                .zip(&f.ground_truth)
            {
                total += iou(&b.bbox, &g.bbox);
                count += 1;
            }
        }
        assert!(total / count as f64 >= 0.8);
    }

    #[test]
    fn single_pending_and_stale_ids() {
        let hub = AnnotationHub::new();
        let id = hub.post_query(request()).unwrap();
        assert!(matches!(hub.post_query(request()), Err(Error::Busy(_))));
        let stale = AnnotationResponse {
            request_id: id + 7,
            boxes: vec![],
            accepted_predictions: vec![],
        };
        assert!(matches!(
            hub.submit(stale),
            Err(Error::StaleResponse { .. })
        ));
        assert_eq!(hub.pending().unwrap().request_id, id);

        let bad = AnnotationResponse {
            request_id: id,
            boxes: vec![LabeledBox::new(
                BoundingBox::new(190.0, 0.0, 40.0, 10.0).unwrap(),
                0,
            )],
            accepted_predictions: vec![],
        };
        assert!(matches!(hub.submit(bad), Err(Error::InvalidInput(_))));
        assert!(hub.pending().is_some());
    }

    #[test]
    fn rendezvous_across_threads() {
        let hub = Arc::new(AnnotationHub::new());
        let mut annotator = HubAnnotator::new(hub.clone(), Duration::from_secs(5));
        let browser = {
            let hub = hub.clone();
            thread::spawn(move || loop {
                if let Some(req) = hub.pending() {
                    let boxes = frame().ground_truth;
                    hub.submit(AnnotationResponse {
                        request_id: req.request_id,
                        boxes,
                        accepted_predictions: vec![],
                    })
                    .unwrap();
                    break;
                }
                thread::sleep(Duration::from_millis(5));
            })
        };
        let resp = annotator.annotate(request(), &frame()).unwrap();
        browser.join().unwrap();
        assert_eq!(resp.boxes.len(), 2);
        assert!(hub.pending().is_none());
    }

    #[test]
    fn timeout_withdraws_request() {
        let hub = AnnotationHub::new();
        hub.post_query(request()).unwrap();
        let err = hub.await_response(Duration::from_millis(20)).unwrap_err();
        assert!(matches!(err, Error::AnnotationTimeout(_)));
        assert!(hub.pending().is_none());
        assert!(hub.post_query(request()).is_ok());
    }

    #[test]
    fn colors_are_hex() {
        for c in 0..30 {
            let s = class_color(c);
            assert_eq!(s.len(), 7);
            assert!(s.starts_with('#'));
        }
    }
}
