//! Training-set assembly and Minibootstrap hard-negative mining.
//!
//! The background pool is far larger than the set of object regions, so the
//! pool is shuffled and cut into batches. The first batch seeds the negative
//! set; every later batch is scored by a classifier trained on the current
//! set and only the negatives it gets wrong are kept.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{ClassModels, DetectorModels};
use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, iou, BoundingBox, LabeledBox};
use crate::kernel::{
    fit_classifier, fit_refiner, median_heuristic, predict_raw, KernelConfig,
    MEDIAN_HEURISTIC_SAMPLES,
};
use crate::store::DatasetStore;
use crate::world::{derive_seed, FrameRecord, Proposal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub pos_iou: f64,
    pub neg_iou_max: f64,
    pub n_batches: usize,
    pub batch_size: usize,
    /// Raw-score threshold above which a negative counts as hard.
    pub hard_score: f64,
    pub shuffle_seed: u64,
    /// Ridge penalty of the box refiners.
    pub lambda_rls: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.6,
            neg_iou_max: 0.3,
            n_batches: 10,
            batch_size: 2000,
            hard_score: 0.0,
            shuffle_seed: 0,
            lambda_rls: 1.0,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.neg_iou_max && self.neg_iou_max < self.pos_iou && self.pos_iou <= 1.0) {
            return Err(Error::Config(
                "bootstrap needs 0 < neg_iou_max < pos_iou <= 1".into(),
            ));
        }
        if self.n_batches < 1 || self.batch_size < 1 {
            return Err(Error::Config(
                "n_batches and batch_size must be >= 1".into(),
            ));
        }
        if !(self.lambda_rls > 0.0) || !self.hard_score.is_finite() {
            return Err(Error::Config(
                "lambda_rls must be positive, hard_score finite".into(),
            ));
        }
        Ok(())
    }
}

/// Region labels of one frame for one class. Positives carry the index of
/// the matched ground-truth box.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassRegions {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<usize>,
}

/// Labels each proposal per class.
///
/// A proposal is positive for class `c` when its best IoU with a class-`c`
/// box reaches `pos_iou`, and negative when that IoU stays below
/// `neg_iou_max`. Objects of other classes therefore act as negatives.
pub fn assign_regions(
    proposals: &[Proposal],
    ground_truth: &[LabeledBox],
    classes: &[usize],
    cfg: &BootstrapConfig,
) -> BTreeMap<usize, ClassRegions> {
    let mut out: BTreeMap<usize, ClassRegions> = classes
        .iter()
        .map(|&c| (c, ClassRegions::default()))
        .collect();
    for (pi, p) in proposals.iter().enumerate() {
        for (&c, regions) in out.iter_mut() {
            let best = ground_truth
                .iter()
                .enumerate()
                .filter(|(_, g)| g.class_id == c)
                .map(|(gi, g)| (gi, iou(&p.bbox, &g.bbox)))
                .fold(None, |acc: Option<(usize, f64)>, (gi, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((gi, v)),
                });
            let best_iou = best.map_or(0.0, |b| b.1);
            if best_iou >= cfg.pos_iou {
                regions
                    .positives
                    .push((pi, best.expect("iou > 0 implies a match").0));
            } else if best_iou < cfg.neg_iou_max {
                regions.negatives.push(pi);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositiveRegion {
    /// Row in [`TrainingAssembly::features`].
    pub row: usize,
    pub proposal: BoundingBox,
    pub target: BoundingBox,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassAssembly {
    pub positives: Vec<PositiveRegion>,
    /// Rows of the shuffled negative pool, cut into at most `n_batches`
    /// batches of at most `batch_size` rows. Pool rows beyond that capacity
    /// are dropped.
    pub negative_batches: Vec<Vec<usize>>,
    pub pool_size: usize,
}

/// Every proposal feature of the training frames, with per-class region
/// assignments pointing into it.
#[derive(Debug, Clone)]
pub struct TrainingAssembly {
    pub features: DMatrix<f64>,
    pub classes: BTreeMap<usize, ClassAssembly>,
}

impl TrainingAssembly {
    /// Assigns regions for `classes` over `frames`, whose `ground_truth`
    /// holds the training labels.
    pub fn build<'a>(
        frames: impl IntoIterator<Item = &'a FrameRecord>,
        classes: &[usize],
        cfg: &BootstrapConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut data: Vec<f64> = Vec::new();
        let mut dim: Option<usize> = None;
        let mut rows = 0usize;
        let mut per_class: BTreeMap<usize, (Vec<PositiveRegion>, Vec<usize>)> = classes
            .iter()
            .map(|&c| (c, (Vec::new(), Vec::new())))
            .collect();

        for frame in frames {
            if frame.proposals.is_empty() {
                continue;
            }
            for p in &frame.proposals {
                let d = *dim.get_or_insert(p.feature.len());
                if p.feature.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: p.feature.len(),
                    });
                }
                data.extend_from_slice(&p.feature);
            }
            let assigned = assign_regions(&frame.proposals, &frame.ground_truth, classes, cfg);
            for (c, regions) in assigned {
                let (pos, neg) = per_class.get_mut(&c).expect("class listed");
                pos.extend(
                    regions
                        .positives
                        .into_iter()
                        .map(|(pi, gi)| PositiveRegion {
                            row: rows + pi,
                            proposal: frame.proposals[pi].bbox,
                            target: frame.ground_truth[gi].bbox,
                        }),
                );
                neg.extend(regions.negatives.into_iter().map(|pi| rows + pi));
            }
            rows += frame.proposals.len();
        }
        let features = DMatrix::from_row_slice(rows, dim.unwrap_or(0), &data);

        let classes = per_class
            .into_iter()
            .map(|(c, (positives, mut pool))| {
                let pool_size = pool.len();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.shuffle_seed,
                    &format!("negatives/{c}"),
                ));
                pool.shuffle(&mut rng);
                let per_batch = pool_size.div_ceil(cfg.n_batches).clamp(1, cfg.batch_size);
                let negative_batches: Vec<Vec<usize>> = pool
                    .chunks(per_batch)
                    .take(cfg.n_batches)
                    .map(<[usize]>::to_vec)
                    .collect();
                (
                    c,
                    ClassAssembly {
                        positives,
                        negative_batches,
                        pool_size,
                    },
                )
            })
            .collect();
        Ok(Self { features, classes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFitReport {
    pub class_id: usize,
    pub positives: usize,
    pub pool_size: usize,
    pub hard_negatives: usize,
    /// Hard-negative count after each batch, starting with batch one.
    pub hard_negative_trace: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub sigma: f64,
    pub classes: Vec<ClassFitReport>,
    /// Classes without a single positive region.
    pub skipped: Vec<usize>,
}

fn fit_with(
    class_id: usize,
    features: &DMatrix<f64>,
    positives: &[usize],
    negatives: &[usize],
    kernel: &KernelConfig,
) -> Result<crate::kernel::ClassifierModel> {
    let rows: Vec<usize> = positives.iter().chain(negatives).copied().collect();
    let x = features.select_rows(&rows);
    let y: Vec<f64> = std::iter::repeat_n(1.0, positives.len())
        .chain(std::iter::repeat_n(-1.0, negatives.len()))
        .collect();
    let cfg = kernel
        .clone()
        .with_centers(kernel.num_centers.min(rows.len()));
    fit_classifier(class_id, &x, &y, &cfg)
}

fn fit_class(
    class_id: usize,
    assembly: &ClassAssembly,
    features: &DMatrix<f64>,
    kernel: &KernelConfig,
    boot: &BootstrapConfig,
) -> Result<(ClassModels, ClassFitReport)> {
    let pos_rows: Vec<usize> = assembly.positives.iter().map(|p| p.row).collect();
    let mut batches = assembly.negative_batches.iter();
    let mut hard: Vec<usize> = batches.next().cloned().unwrap_or_default();
    let mut trace = vec![hard.len()];
    for batch in batches {
        let model = fit_with(class_id, features, &pos_rows, &hard, kernel)?;
        let scores = predict_raw(&model, &features.select_rows(batch))?;
        hard.extend(
            batch
                .iter()
                .zip(scores)
                .filter(|(_, s)| *s > boot.hard_score)
                .map(|(r, _)| *r),
        );
        trace.push(hard.len());
    }
    let classifier = fit_with(class_id, features, &pos_rows, &hard, kernel)?;

    let refiner_x = features.select_rows(&pos_rows);
    let deltas: Vec<_> = assembly
        .positives
        .iter()
        .map(|p| encode_deltas(&p.proposal, &p.target))
        .collect();
    let refiner = fit_refiner(class_id, &refiner_x, &deltas, boot.lambda_rls)?;

    Ok((
        ClassModels {
            classifier,
            refiner,
        },
        ClassFitReport {
            class_id,
            positives: pos_rows.len(),
            pool_size: assembly.pool_size,
            hard_negatives: hard.len(),
            hard_negative_trace: trace,
        },
    ))
}

/// Fits one classifier/refiner pair per class, classes in parallel. When
/// `kernel.sigma` is unset, one bandwidth is picked from the pooled
/// features and shared by every class.
pub fn minibootstrap_fit(
    assembly: &TrainingAssembly,
    kernel: &KernelConfig,
    boot: &BootstrapConfig,
) -> Result<(DetectorModels, BootstrapReport)> {
    kernel.validate()?;
    boot.validate()?;
    let sigma = match kernel.sigma {
        Some(s) => s,
        None => median_heuristic(
            &assembly.features,
            MEDIAN_HEURISTIC_SAMPLES,
            kernel.center_seed,
        ),
    };
    let kernel = KernelConfig {
        sigma: Some(sigma),
        ..kernel.clone()
    };

    let mut skipped = Vec::new();
    let trainable: Vec<(&usize, &ClassAssembly)> = assembly
        .classes
        .iter()
        .filter(|(c, a)| {
            if a.positives.is_empty() {
                log::warn!("class {c} has no positive regions; skipped");
                skipped.push(**c);
                false
            } else {
                true
            }
        })
        .collect();

    let fitted: Vec<(ClassModels, ClassFitReport)> = trainable
        .into_par_iter()
        .map(|(&c, a)| fit_class(c, a, &assembly.features, &kernel, boot))
        .collect::<Result<_>>()?;
    let (models, classes): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    Ok((
        DetectorModels::new(models),
        BootstrapReport {
            sigma,
            classes,
            skipped,
        },
    ))
}

/// Pools every stored frame regardless of source and retrains all labeled
/// classes from scratch.
pub fn retrain_from_store(
    store: &DatasetStore,
    kernel: &KernelConfig,
    boot: &BootstrapConfig,
) -> Result<(DetectorModels, BootstrapReport)> {
    if store.is_empty() {
        return Err(Error::InvalidInput("dataset store is empty".into()));
    }
    let classes = store.labeled_classes();
    if classes.is_empty() {
        return Err(Error::InvalidInput("dataset store holds no labels".into()));
    }
    let assembly =
        TrainingAssembly::build(store.frames().iter().map(|f| &f.frame), &classes, boot)?;
    minibootstrap_fit(&assembly, kernel, boot)
}
