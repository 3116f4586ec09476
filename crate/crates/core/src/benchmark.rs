//! The synthetic end-to-end benchmark: per object group, depth-supervised
//! training on handheld sequences, refinement on a shifted table-top
//! sequence with the scripted annotator, and evaluation on the refinement
//! sequence and an unseen arrangement of the same objects.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::OracleAnnotator;
use crate::config::RunConfig;
use crate::error::Result;
use crate::evaluation::{experiment_report, ReportRow};
use crate::eventlog::{Event, EventLog};
use crate::orchestrator::{Engine, RefinementStats, SupervisedSummary};
use crate::tracker::ConstantVelocityTracker;
use crate::world::{derive_seed, ExplorationSequence, World};

pub const TABLETOP_DOMAIN: &str = "tabletop";
pub const HANDHELD_DOMAIN: &str = "handheld";

/// Every sequence one group needs.
#[derive(Debug, Clone)]
pub struct GroupData {
    pub name: String,
    pub classes: Vec<usize>,
    /// One depth-annotated handheld sequence per class.
    pub supervised: Vec<(usize, ExplorationSequence)>,
    pub refinement: ExplorationSequence,
    pub held_out: ExplorationSequence,
}

pub fn group_name(index: usize) -> String {
    format!("#{index}")
}

/// Handheld demonstration of one object: a single centered object shown at
/// random poses, with depth and without domain shift.
pub fn supervised_sequence(
    world: &World,
    class_id: usize,
    frames: usize,
    seed: u64,
) -> Result<ExplorationSequence> {
    let seed = derive_seed(seed, &format!("handheld/{class_id}"));
    let scene = world.handheld_scene(class_id, seed)?;
    let traj = world.handheld_trajectory(&scene, frames, seed);
    world.make_exploration_sequence(&scene, &traj, 0.0, HANDHELD_DOMAIN, true, seed)
}

/// Table-top exploration of `classes` in the shifted domain. `arrangement`
/// selects the object layout and camera path.
pub fn tabletop_sequence(
    world: &World,
    classes: &[usize],
    frames: usize,
    seed: u64,
    arrangement: &str,
) -> Result<ExplorationSequence> {
    let seed = derive_seed(seed, arrangement);
    let scene = world.generate_scene_with_classes(classes, seed)?;
    let traj = world.tabletop_trajectory(frames, seed);
    world.make_exploration_sequence(
        &scene,
        &traj,
        world.config().domain_shift_magnitude,
        TABLETOP_DOMAIN,
        false,
        seed,
    )
}

fn group_seed(cfg: &RunConfig, index: usize) -> u64 {
    derive_seed(cfg.seed, &format!("group/{index}"))
}

/// The shifted table-top sequence group `index` is refined on.
pub fn refinement_sequence(
    world: &World,
    cfg: &RunConfig,
    index: usize,
) -> Result<ExplorationSequence> {
    let b = &cfg.benchmark;
    tabletop_sequence(
        world,
        &b.groups[index],
        b.refinement_frames,
        group_seed(cfg, index),
        "refinement",
    )
}

/// Same objects as the refinement sequence, rearranged and seen along
/// another path.
pub fn held_out_sequence(
    world: &World,
    cfg: &RunConfig,
    index: usize,
) -> Result<ExplorationSequence> {
    let b = &cfg.benchmark;
    tabletop_sequence(
        world,
        &b.groups[index],
        b.heldout_frames,
        group_seed(cfg, index),
        "held-out",
    )
}

pub fn build_group(world: &World, cfg: &RunConfig, index: usize) -> Result<GroupData> {
    let b = &cfg.benchmark;
    let classes = b
        .groups
        .get(index)
        .cloned()
        .ok_or_else(|| crate::Error::InvalidInput(format!("no benchmark group {index}")))?;
    let supervised = classes
        .iter()
        .map(|&c| {
            Ok((
                c,
                supervised_sequence(world, c, b.supervised_frames, cfg.seed)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupData {
        name: group_name(index),
        refinement: refinement_sequence(world, cfg, index)?,
        held_out: held_out_sequence(world, cfg, index)?,
        classes,
        supervised,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    pub classes: Vec<usize>,
    pub supervised: Vec<SupervisedSummary>,
    pub stats: RefinementStats,
    pub report: ReportRow,
}

/// Stats document of a whole benchmark run; contains no timestamps, so
/// identical inputs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub seed: u64,
    pub groups: Vec<GroupResult>,
    pub mean_pseudo_label_map: Option<f64>,
}

impl BenchmarkResult {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.groups.iter().map(|g| g.report.clone()).collect()
    }
}

/// Trains, refines and evaluates one group with the scripted annotator.
pub fn run_group(
    cfg: &RunConfig,
    world: &World,
    index: usize,
    log_dir: Option<&Path>,
) -> Result<GroupResult> {
    let data = build_group(world, cfg, index)?;
    let mut engine = Engine::new(cfg.clone())?;
    if let Some(dir) = log_dir {
        engine = engine.with_log(EventLog::open(&dir.join(format!("group-{index}.jsonl")))?);
    }

    let mut supervised = Vec::with_capacity(data.supervised.len());
    for (c, seq) in &data.supervised {
        supervised.push(engine.ingest_supervised(&format!("handheld-{c}"), seq, *c)?);
    }
    engine.retrain()?;
    let before = engine.models().cloned().expect("retrained");

    let mut annotator = OracleAnnotator::new(
        cfg.annotation.oracle_noise,
        derive_seed(cfg.annotation.oracle_seed, &format!("group/{index}")),
    );
    let mut tracker = ConstantVelocityTracker::new(cfg.tracker);
    let outcome = engine.run_refinement_phase(
        &format!("tabletop-{index}"),
        &data.refinement,
        &mut annotator,
        &mut tracker,
    )?;
    let after = engine.models().expect("refined");

    let report = experiment_report(
        &data.name,
        &before,
        after,
        &data.refinement,
        &data.held_out,
        &outcome.stats,
        engine.proposal_source(),
        &cfg.inference,
        &cfg.eval,
    )?;
    engine.record(Event::Evaluated {
        group: report.group.clone(),
        before_map: report.before_map,
        after_map: report.after_map,
        heldout_before: report.heldout_before,
        heldout_after: report.heldout_after,
    })?;
    log::info!(
        "group {}: mAP {:.3} -> {:.3}, {} queries, {} human images",
        data.name,
        report.before_map,
        report.after_map,
        outcome.stats.total_al_queries_images,
        outcome.stats.human_images
    );
    Ok(GroupResult {
        group: data.name,
        classes: data.classes,
        supervised,
        stats: outcome.stats,
        report,
    })
}

/// Runs every configured group, in parallel, and collects the results in
/// group order.
pub fn run_benchmark(cfg: &RunConfig, log_dir: Option<&Path>) -> Result<BenchmarkResult> {
    cfg.validate()?;
    let world = World::new(cfg.world.clone())?;
    let groups = (0..cfg.benchmark.groups.len())
        .into_par_iter()
        .map(|i| run_group(cfg, &world, i, log_dir))
        .collect::<Result<Vec<_>>>()?;
    let pseudo: Vec<f64> = groups
        .iter()
        .filter_map(|g| g.stats.pseudo_label_map)
        .collect();
    let mean_pseudo_label_map =
        (!pseudo.is_empty()).then(|| pseudo.iter().sum::<f64>() / pseudo.len() as f64);
    Ok(BenchmarkResult {
        seed: cfg.seed,
        groups,
        mean_pseudo_label_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.world.num_classes = 4;
        cfg.world.objects_per_scene = 2;
        cfg.world.frame_w = 160;
        cfg.world.frame_h = 120;
        cfg.world.feature_dim = 16;
        cfg.world.proposals_per_frame = 20;
        cfg.world.jittered_proposals = 12;
        cfg.world.min_object_side = 24.0;
        cfg.world.max_object_side = 36.0;
        cfg.kernel.num_centers = 60;
        cfg.bootstrap.n_batches = 3;
        cfg.benchmark.groups = vec![vec![0, 1], vec![2, 3]];
        cfg.benchmark.supervised_frames = 10;
        cfg.benchmark.refinement_frames = 15;
        cfg.benchmark.heldout_frames = 10;
        cfg
    }

    #[test]
    fn group_sequences_have_the_expected_shape() {
        let cfg = tiny();
        let world = World::new(cfg.world.clone()).unwrap();
        let g = build_group(&world, &cfg, 1).unwrap();
        assert_eq!(g.name, "#1");
        assert_eq!(
            g.supervised.iter().map(|(c, _)| *c).collect::<Vec<_>>(),
            vec![2, 3]
        );
        assert!(g
            .supervised
            .iter()
            .all(|(_, s)| s.frames.len() == 10 && s.frames.iter().all(|f| f.depth.is_some())));
        assert_eq!(g.refinement.frames.len(), 15);
        assert_eq!(g.refinement.domain_tag, TABLETOP_DOMAIN);
        assert_eq!(g.held_out.frames.len(), 10);
        // same objects, different arrangement
        let classes = |s: &ExplorationSequence| {
            let mut c: Vec<usize> = s.frames[0]
                .ground_truth
                .iter()
                .map(|l| l.class_id)
                .collect();
            c.sort_unstable();
            c
        };
        assert_eq!(classes(&g.refinement), vec![2, 3]);
        assert_ne!(
            g.refinement.frames[0].ground_truth,
            g.held_out.frames[0].ground_truth
        );
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = tiny();
        let a = run_benchmark(&cfg, None).unwrap();
        let b = run_benchmark(&cfg, None).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.groups.len(), 2);
        for g in &a.groups {
            assert_eq!(g.stats.frames_processed, 15);
            assert!((0.0..=1.0).contains(&g.report.after_map));
        }
    }
}
