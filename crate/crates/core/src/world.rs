//! Synthetic table-top world: scenes, viewpoint trajectories, proposal
//! feature streams with a controllable domain shift, and depth maps.
//!
//! Proposal features stand in for pooled CNN features. A proposal's feature
//! is a blend of the prototypes of the objects it overlaps, weighted by the
//! fraction of the proposal each object covers, with the remainder drawn
//! from a background prototype:
//!
//! ```text
//! f = sum_o frac(p, o) * proto(o) + (1 - max_o frac(p, o)) * proto_bg + shift + noise
//! ```
//!
//! where `frac(p, o) = area(p ∩ o) / area(p)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::{clip_box, BoundingBox, LabeledBox};

pub mod io;

pub const BACKGROUND_DEPTH: f32 = 2.0;
pub const HANDHELD_DEPTH: f32 = 0.5;
pub const TABLE_OBJECT_DEPTH: f32 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub objects_per_scene: usize,
    pub frame_w: usize,
    pub frame_h: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub domain_shift_magnitude: f64,
    pub jitter_sigma: f64,
    pub proposals_per_frame: usize,
    /// How many of `proposals_per_frame` are jittered copies of ground-truth
    /// boxes; the rest are uniform background boxes.
    pub jittered_proposals: usize,
    pub min_object_side: f64,
    pub max_object_side: f64,
    pub depth_noise_sigma: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 21,
            objects_per_scene: 4,
            frame_w: 320,
            frame_h: 240,
            feature_dim: 64,
            noise_sigma: 0.05,
            domain_shift_magnitude: 3.0,
            jitter_sigma: 2.0,
            proposals_per_frame: 60,
            jittered_proposals: 40,
            min_object_side: 36.0,
            max_object_side: 64.0,
            depth_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.num_classes < 1 || self.objects_per_scene < 1 || self.proposals_per_frame < 1 {
            return fail("counts must be >= 1");
        }
        if self.frame_w < 1 || self.frame_h < 1 {
            return fail("frame size must be >= 1");
        }
        if self.feature_dim < 2 {
            return fail("feature_dim must be >= 2");
        }
        if !(self.noise_sigma >= 0.0 && self.jitter_sigma >= 0.0 && self.depth_noise_sigma >= 0.0) {
            return fail("sigmas must be >= 0");
        }
        if !(self.domain_shift_magnitude >= 0.0) {
            return fail("domain_shift_magnitude must be >= 0");
        }
        if self.jittered_proposals > self.proposals_per_frame {
            return fail("jittered_proposals exceeds proposals_per_frame");
        }
        let max_side = self.frame_w.min(self.frame_h) as f64;
        if !(self.min_object_side >= 1.0
            && self.min_object_side <= self.max_object_side
            && self.max_object_side <= max_side)
        {
            return fail("object side range must satisfy 1 <= min <= max <= frame side");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: usize,
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub prototype: Vec<f64>,
}

impl SceneObject {
    pub fn rect(&self) -> BoundingBox {
        BoundingBox {
            x_min: self.center.0 - self.size.0 / 2.0,
            y_min: self.center.1 - self.size.1 / 2.0,
            width: self.size.0,
            height: self.size.1,
        }
    }
}

/// A camera pose abstracted to a 2-D similarity about the frame center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub index: u64,
    pub translation: (f64, f64),
    pub scale: f64,
}

impl Viewpoint {
    pub fn identity(index: u64) -> Self {
        Self {
            index,
            translation: (0.0, 0.0),
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub width: usize,
    pub height: usize,
    pub ground_truth: Vec<LabeledBox>,
    pub proposals: Vec<Proposal>,
    pub depth: Option<DepthMap>,
}

impl FrameRecord {
    pub fn feature_dim(&self) -> Option<usize> {
        self.proposals.first().map(|p| p.feature.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationSequence {
    pub domain_tag: String,
    pub frames: Vec<FrameRecord>,
}

impl ExplorationSequence {
    pub fn validate(&self) -> Result<()> {
        for pair in self.frames.windows(2) {
            if pair[1].frame_id <= pair[0].frame_id {
                return Err(Error::InvalidInput(format!(
                    "frame ids must be strictly increasing ({} then {})",
                    pair[0].frame_id, pair[1].frame_id
                )));
            }
        }
        let dim = self.frames.iter().find_map(|f| f.feature_dim());
        for f in &self.frames {
            if f.proposals.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "frame {} has no proposals",
                    f.frame_id
                )));
            }
            if let Some(d) = dim {
                if let Some(p) = f.proposals.iter().find(|p| p.feature.len() != d) {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: p.feature.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Derives a child seed from a parent seed and a stream label.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    // FNV-1a over the label, folded with the parent seed through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The generator, holding a validated config and the class/background
/// prototypes derived from `config.seed`.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    prototypes: Vec<Vec<f64>>,
    background: Vec<f64>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "prototypes"));
        let prototypes = (0..config.num_classes)
            .map(|_| unit_gaussian(&mut rng, config.feature_dim))
            .collect();
        let background = unit_gaussian(&mut rng, config.feature_dim);
        Ok(Self {
            config,
            prototypes,
            background,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn prototype(&self, class_id: usize) -> &[f64] {
        &self.prototypes[class_id]
    }

    pub fn background_prototype(&self) -> &[f64] {
        &self.background
    }

    /// Unit direction of the additive shift for a domain. Identical for every
    /// sequence of the same domain under the same world seed.
    pub fn shift_direction(&self, domain_tag: &str) -> Vec<f64> {
        let seed = derive_seed(self.config.seed, &format!("shift/{domain_tag}"));
        unit_gaussian(
            &mut ChaCha8Rng::seed_from_u64(seed),
            self.config.feature_dim,
        )
    }

    /// Scene of `objects_per_scene` objects of distinct random classes.
    pub fn generate_scene(&self, rng_seed: u64) -> Result<Vec<SceneObject>> {
        let c = &self.config;
        if c.objects_per_scene > c.num_classes {
            return Err(Error::InvalidInput(format!(
                "objects_per_scene ({}) exceeds num_classes ({})",
                c.objects_per_scene, c.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, "scene-classes"));
        let mut classes: Vec<usize> = (0..c.num_classes).collect();
        classes.shuffle(&mut rng);
        classes.truncate(c.objects_per_scene);
        self.generate_scene_with_classes(&classes, rng_seed)
    }

    /// Places one object per listed class. Objects are kept a few pixels
    /// apart when possible; if the frame is too crowded they may overlap but
    /// never contain one another.
    pub fn generate_scene_with_classes(
        &self,
        classes: &[usize],
        rng_seed: u64,
    ) -> Result<Vec<SceneObject>> {
        let c = &self.config;
        for (i, &cls) in classes.iter().enumerate() {
            if cls >= c.num_classes {
                return Err(Error::InvalidInput(format!("class {cls} out of range")));
            }
            if classes[..i].contains(&cls) {
                return Err(Error::InvalidInput(format!("class {cls} repeated")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, "scene-layout"));
        let (fw, fh) = (c.frame_w as f64, c.frame_h as f64);
        let margin = (0.1 * fw.min(fh))
            .min((fw.min(fh) - c.max_object_side) / 2.0)
            .max(0.0);
        let mut placed: Vec<SceneObject> = Vec::with_capacity(classes.len());
        for &cls in classes {
            let mut candidate = None;
            for attempt in 0..4000 {
                let w = rng.random_range(c.min_object_side..=c.max_object_side);
                let h = rng.random_range(c.min_object_side..=c.max_object_side);
                let cx = rng.random_range(
                    (margin + w / 2.0)..=(fw - margin - w / 2.0).max(margin + w / 2.0),
                );
                let cy = rng.random_range(
                    (margin + h / 2.0)..=(fh - margin - h / 2.0).max(margin + h / 2.0),
                );
                let rect = BoundingBox::from_center(cx, cy, w, h)?;
                // Demand a gap first, then relax to "no containment".
                let ok = if attempt < 3000 {
                    let padded = BoundingBox::from_center(cx, cy, w + 8.0, h + 8.0)?;
                    placed
                        .iter()
                        .all(|o| padded.intersection_area(&o.rect()) == 0.0)
                } else {
                    placed
                        .iter()
                        .all(|o| !contains(&o.rect(), &rect) && !contains(&rect, &o.rect()))
                };
                if ok {
                    candidate = Some((cx, cy, w, h));
                    break;
                }
            }
            let (cx, cy, w, h) = candidate.ok_or_else(|| {
                Error::InvalidInput("could not place all scene objects in the frame".into())
            })?;
            placed.push(SceneObject {
                class_id: cls,
                center: (cx, cy),
                size: (w, h),
                prototype: self.prototypes[cls].clone(),
            });
        }
        Ok(placed)
    }

    /// Object rectangle as seen from `vp`, unclipped.
    pub fn project(&self, obj: &SceneObject, vp: &Viewpoint) -> BoundingBox {
        let (fcx, fcy) = (
            self.config.frame_w as f64 / 2.0,
            self.config.frame_h as f64 / 2.0,
        );
        let cx = (obj.center.0 - fcx) * vp.scale + fcx + vp.translation.0;
        let cy = (obj.center.1 - fcy) * vp.scale + fcy + vp.translation.1;
        BoundingBox {
            x_min: cx - obj.size.0 * vp.scale / 2.0,
            y_min: cy - obj.size.1 * vp.scale / 2.0,
            width: obj.size.0 * vp.scale,
            height: obj.size.1 * vp.scale,
        }
    }

    fn visible_objects(&self, scene: &[SceneObject], vp: &Viewpoint) -> Vec<(usize, BoundingBox)> {
        let (fw, fh) = (self.config.frame_w as f64, self.config.frame_h as f64);
        scene
            .iter()
            .enumerate()
            .filter_map(|(i, o)| {
                let r = self.project(o, vp);
                let frame = BoundingBox {
                    x_min: 0.0,
                    y_min: 0.0,
                    width: fw,
                    height: fh,
                };
                (r.intersection_area(&frame) > 0.0).then(|| (i, clip_box(&r, fw, fh)))
            })
            .collect()
    }

    /// Feature of a proposal box given the visible object rectangles.
    pub fn blend_feature(
        &self,
        proposal: &BoundingBox,
        objects: &[(&[f64], BoundingBox)],
        shift: Option<&[f64]>,
    ) -> Vec<f64> {
        let mut f = vec![0.0; self.config.feature_dim];
        let mut max_frac: f64 = 0.0;
        for (proto, rect) in objects {
            let frac = proposal.intersection_area(rect) / proposal.area();
            if frac > 0.0 {
                max_frac = max_frac.max(frac);
                f.iter_mut()
                    .zip(proto.iter())
                    .for_each(|(a, p)| *a += frac * p);
            }
        }
        let bg_w = 1.0 - max_frac.min(1.0);
        f.iter_mut()
            .zip(&self.background)
            .for_each(|(a, b)| *a += bg_w * b);
        if let Some(s) = shift {
            f.iter_mut().zip(s).for_each(|(a, s)| *a += s);
        }
        f
    }

    /// Renders one frame: clipped ground truth, jittered and background
    /// proposals, and their blended features.
    pub fn render_frame(
        &self,
        scene: &[SceneObject],
        viewpoint: &Viewpoint,
        shift: Option<&[f64]>,
        frame_id: u64,
        rng: &mut ChaCha8Rng,
    ) -> FrameRecord {
        let c = &self.config;
        let (fw, fh) = (c.frame_w as f64, c.frame_h as f64);
        let visible = self.visible_objects(scene, viewpoint);
        let ground_truth: Vec<LabeledBox> = visible
            .iter()
            .map(|(i, r)| LabeledBox::new(*r, scene[*i].class_id))
            .collect();

        let mut boxes = Vec::with_capacity(c.proposals_per_frame);
        let n_gt = ground_truth.len();
        let n_jitter = if n_gt == 0 { 0 } else { c.jittered_proposals };
        let jitter = Normal::new(0.0, c.jitter_sigma).expect("validated sigma");
        for k in 0..n_jitter {
            let gt = &ground_truth[k % n_gt].bbox;
            let x0 = gt.x_min + jitter.sample(rng);
            let y0 = gt.y_min + jitter.sample(rng);
            let x1 = (gt.x_max() + jitter.sample(rng)).max(x0 + 1.0);
            let y1 = (gt.y_max() + jitter.sample(rng)).max(y0 + 1.0);
            let b = BoundingBox {
                x_min: x0,
                y_min: y0,
                width: x1 - x0,
                height: y1 - y0,
            };
            boxes.push(clip_box(&b, fw, fh));
        }
        let side_max = 96f64.min(fw).min(fh);
        let side_min = 16f64.min(side_max);
        while boxes.len() < c.proposals_per_frame {
            let w = rng.random_range(side_min..=side_max);
            let h = rng.random_range(side_min..=side_max);
            let x = rng.random_range(0.0..=(fw - w));
            let y = rng.random_range(0.0..=(fh - h));
            boxes.push(BoundingBox {
                x_min: x,
                y_min: y,
                width: w,
                height: h,
            });
        }

        let objects: Vec<(&[f64], BoundingBox)> = visible
            .iter()
            .map(|(i, r)| (scene[*i].prototype.as_slice(), *r))
            .collect();
        let noise = Normal::new(0.0, c.noise_sigma).expect("validated sigma");
        let proposals = boxes
            .into_iter()
            .map(|b| {
                let mut feature = self.blend_feature(&b, &objects, shift);
                if c.noise_sigma > 0.0 {
                    feature.iter_mut().for_each(|v| *v += noise.sample(rng));
                }
                Proposal { bbox: b, feature }
            })
            .collect();

        FrameRecord {
            frame_id,
            width: c.frame_w,
            height: c.frame_h,
            ground_truth,
            proposals,
            depth: None,
        }
    }

    /// Depth rendering: background plane, the first scene object held in
    /// front of the camera, the remaining objects on the table.
    pub fn synth_depth_map(&self, scene: &[SceneObject], viewpoint: &Viewpoint) -> DepthMap {
        let c = &self.config;
        let mut map = DepthMap::filled(c.frame_w, c.frame_h, BACKGROUND_DEPTH);
        // Paint table objects first so the handheld one stays on top.
        for (i, obj) in scene.iter().enumerate().rev() {
            let depth = if i == 0 {
                HANDHELD_DEPTH
            } else {
                TABLE_OBJECT_DEPTH
            };
            let r = self.project(obj, viewpoint);
            let cols = pixel_span(r.x_min, r.x_max(), c.frame_w);
            let rows = pixel_span(r.y_min, r.y_max(), c.frame_h);
            for row in rows {
                for col in cols.clone() {
                    let cur = map.get(col, row);
                    map.set(col, row, cur.min(depth));
                }
            }
        }
        if c.depth_noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                c.seed,
                &format!("depth-noise/{}", viewpoint.index),
            ));
            let noise = Normal::new(0.0, c.depth_noise_sigma).expect("validated sigma");
            for v in map.values.iter_mut() {
                *v = (*v + noise.sample(&mut rng) as f32).max(0.01);
            }
        }
        map
    }

    /// One frame per viewpoint; a single shift vector of the given
    /// magnitude, pointing along the domain's direction, is added to every
    /// feature of the sequence.
    pub fn make_exploration_sequence(
        &self,
        scene: &[SceneObject],
        trajectory: &[Viewpoint],
        domain_shift_magnitude: f64,
        domain_tag: &str,
        with_depth: bool,
        seed: u64,
    ) -> Result<ExplorationSequence> {
        if trajectory.is_empty() {
            return Err(Error::InvalidInput("empty trajectory".into()));
        }
        let shift: Option<Vec<f64>> = (domain_shift_magnitude > 0.0).then(|| {
            self.shift_direction(domain_tag)
                .into_iter()
                .map(|v| v * domain_shift_magnitude)
                .collect()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "frames"));
        let frames = trajectory
            .iter()
            .map(|vp| {
                let mut f = self.render_frame(scene, vp, shift.as_deref(), vp.index, &mut rng);
                if with_depth {
                    f.depth = Some(self.synth_depth_map(scene, vp));
                }
                f
            })
            .collect();
        let seq = ExplorationSequence {
            domain_tag: domain_tag.to_string(),
            frames,
        };
        seq.validate()?;
        Ok(seq)
    }

    /// Smooth pan-and-zoom sweep used for table-top exploration. Per-frame
    /// motion stays around a pixel so objects remain in view.
    pub fn tabletop_trajectory(&self, n_frames: usize, seed: u64) -> Vec<Viewpoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "tabletop-trajectory"));
        let margin = 0.1 * (self.config.frame_w.min(self.config.frame_h) as f64);
        let ax = rng.random_range(0.5..1.0) * margin;
        let ay = rng.random_range(0.3..0.8) * margin;
        let phase_x = rng.random_range(0.0..std::f64::consts::TAU);
        let phase_y = rng.random_range(0.0..std::f64::consts::TAU);
        let zoom = rng.random_range(0.03..0.08);
        let n = n_frames.max(1) as f64;
        (0..n_frames)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / n;
                Viewpoint {
                    index: i as u64,
                    translation: (ax * (t + phase_x).sin(), ay * (2.0 * t + phase_y).sin()),
                    scale: 1.0 + zoom * (t + phase_y).cos(),
                }
            })
            .collect()
    }

    /// Random poses for an object shown by hand: each viewpoint moves the
    /// object to a new place in the frame with a mild change of scale.
    /// Intended for single-object scenes centered in the frame.
    pub fn handheld_trajectory(
        &self,
        scene: &[SceneObject],
        n_frames: usize,
        seed: u64,
    ) -> Vec<Viewpoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "handheld-trajectory"));
        let (fw, fh) = (self.config.frame_w as f64, self.config.frame_h as f64);
        let (ow, oh) = scene.iter().fold((1.0f64, 1.0f64), |(w, h), o| {
            (w.max(o.size.0), h.max(o.size.1))
        });
        (0..n_frames)
            .map(|i| {
                let scale = rng.random_range(0.85..1.15);
                let room_x = ((fw - ow * scale) / 2.0).max(0.0);
                let room_y = ((fh - oh * scale) / 2.0).max(0.0);
                Viewpoint {
                    index: i as u64,
                    translation: (
                        rng.random_range(-room_x..=room_x),
                        rng.random_range(-room_y..=room_y),
                    ),
                    scale,
                }
            })
            .collect()
    }

    /// A single object of `class_id` centered in the frame, as used for
    /// handheld demonstrations.
    pub fn handheld_scene(&self, class_id: usize, seed: u64) -> Result<Vec<SceneObject>> {
        let c = &self.config;
        if class_id >= c.num_classes {
            return Err(Error::InvalidInput(format!(
                "class {class_id} out of range"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "handheld-scene"));
        let w = rng.random_range(c.min_object_side..=c.max_object_side);
        let h = rng.random_range(c.min_object_side..=c.max_object_side);
        Ok(vec![SceneObject {
            class_id,
            center: (c.frame_w as f64 / 2.0, c.frame_h as f64 / 2.0),
            size: (w, h),
            prototype: self.prototypes[class_id].clone(),
        }])
    }
}

fn contains(outer: &BoundingBox, inner: &BoundingBox) -> bool {
    outer.x_min <= inner.x_min
        && outer.y_min <= inner.y_min
        && outer.x_max() >= inner.x_max()
        && outer.y_max() >= inner.y_max()
}

/// Pixel indices whose centers fall inside `[lo, hi)`.
fn pixel_span(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let first = (lo - 0.5).ceil().max(0.0) as usize;
    let last = ((hi - 0.5).ceil().max(0.0) as usize).min(n);
    first.min(last)..last
}
