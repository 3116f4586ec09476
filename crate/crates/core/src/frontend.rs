//! Region proposal front-end. Convolutional proposal networks are replaced
//! by sources that hand out boxes with precomputed feature vectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::world::FrameRecord;
use crate::world::{derive_seed, Proposal, SceneObject, Viewpoint, World};

/// Produces candidate regions with feature encodings for a frame.
pub trait ProposalSource: Send + Sync {
    fn id(&self) -> &str;

    fn propose(&self, frame: &FrameRecord) -> Result<Vec<Proposal>>;
}

/// Returns the proposals stored with the frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReplaySource;

impl ProposalSource for ReplaySource {
    fn id(&self) -> &str {
        "replay"
    }

    fn propose(&self, frame: &FrameRecord) -> Result<Vec<Proposal>> {
        if frame.proposals.is_empty() {
            return Err(Error::InvalidInput(format!(
                "frame {} carries no proposals",
                frame.frame_id
            )));
        }
        Ok(frame.proposals.clone())
    }
}

/// Test-only source that regenerates proposals from the frame's ground
/// truth with the world's jitter settings.
#[derive(Debug, Clone)]
pub struct OracleJitterSource {
    world: World,
    seed: u64,
}

impl OracleJitterSource {
    pub fn new(world: World, seed: u64) -> Self {
        Self { world, seed }
    }
}

impl ProposalSource for OracleJitterSource {
    fn id(&self) -> &str {
        "oracle-jitter"
    }

    fn propose(&self, frame: &FrameRecord) -> Result<Vec<Proposal>> {
        let scene: Vec<SceneObject> = frame
            .ground_truth
            .iter()
            .map(|g| {
                let (cx, cy) = g.bbox.center();
                SceneObject {
                    class_id: g.class_id,
                    center: (cx, cy),
                    size: (g.bbox.width, g.bbox.height),
                    prototype: self.world.prototype(g.class_id).to_vec(),
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed,
            &format!("oracle-jitter/{}", frame.frame_id),
        ));
        let rendered = self.world.render_frame(
            &scene,
            &Viewpoint::identity(frame.frame_id),
            None,
            frame.frame_id,
            &mut rng,
        );
        Ok(rendered.proposals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::world::WorldConfig;

    fn frame() -> (World, FrameRecord) {
        let world = World::new(WorldConfig::default()).unwrap();
        let scene = world.generate_scene(4).unwrap();
        let seq = world
            .make_exploration_sequence(&scene, &[Viewpoint::identity(0)], 0.0, "t", false, 0)
            .unwrap();
        (world, seq.frames.into_iter().next().unwrap())
    }

    #[test]
    fn replay_passes_through() {
        let (_, f) = frame();
        let before = f.clone();
        let props = ReplaySource.propose(&f).unwrap();
        assert_eq!(props.len(), 60);
        assert_eq!(props, f.proposals);
        assert_eq!(f, before);

        let mut empty = f;
        empty.proposals.clear();
        assert!(ReplaySource.propose(&empty).is_err());
    }

    #[test]
    fn oracle_jitter_zero_reproduces_gt() {
        let (world, f) = frame();
        let mut cfg = world.config().clone();
        cfg.jitter_sigma = 0.0;
        let source = OracleJitterSource::new(World::new(cfg).unwrap(), 7);
        let props = source.propose(&f).unwrap();
        assert_eq!(props.len(), 60);
        for gt in &f.ground_truth {
            assert!(props.iter().any(|p| iou(&p.bbox, &gt.bbox) > 1.0 - 1e-12));
        }
        assert_eq!(props, source.propose(&f).unwrap());
    }
}
