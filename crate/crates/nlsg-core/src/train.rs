//! Optimization loop: warm-up, stochastic updates, validation scheduling,
//! and the evaluation entry point used by every trained method.

use std::fmt;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{cm_apply, ConfusionField, LabelMap};
use crate::metrics::{self, CmErrorMode, MetricsReport, SUBGROUP_BOUNDS};
use crate::model::{
    backward, forward, init_params, LossBreakdown, ModelArch, ModelParams,
};
use crate::par;
use crate::rng::SeedRng;
use crate::sim::{build_reference_cms, Dataset};

const DOMAIN_INIT: u64 = 0x11;
const DOMAIN_SPLIT: u64 = 0x22;
const DOMAIN_EPOCH: u64 = 0x1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WarmupMode {
    /// Keep the identity bias from initialization and freeze the annotator
    /// head for the warm-up epochs.
    BiasInit,
    /// Flip the sign of the trace weight during warm-up, maximizing the
    /// trace instead of penalizing it.
    NegativeTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    /// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    AdamDefaults,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub warmup_epochs: usize,
    pub warmup_mode: WarmupMode,
    pub optimizer: Optimizer,
    pub augment_flip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 12,
            batch_size: 8,
            lambda: 0.7,
            warmup_epochs: 2,
            warmup_mode: WarmupMode::BiasInit,
            optimizer: Optimizer::AdamDefaults,
            augment_flip: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so the documented no-op behavior
    /// stays testable; negative or non-finite rates are rejected.
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::arg("learning_rate must be finite and non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::arg("epochs and batch_size must be at least 1"));
        }
        if !self.lambda.is_finite() {
            return Err(Error::arg("lambda must be finite"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::arg("warmup_epochs must be smaller than epochs"));
        }
        Ok(())
    }
}

/// Per-epoch curves; every vector has exactly `epochs` entries after a
/// completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub total: Vec<f64>,
    pub ce: Vec<f64>,
    pub trace: Vec<f64>,
    pub val_dice: Vec<f64>,
    pub val_cm_error: Vec<f64>,
}

impl TrainHistory {
    fn empty() -> Self {
        TrainHistory {
            total: Vec::new(),
            ce: Vec::new(),
            trace: Vec::new(),
            val_dice: Vec::new(),
            val_cm_error: Vec::new(),
        }
    }

    pub fn epochs(&self) -> usize {
        self.total.len()
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        let n = self.total.len();
        if n != epochs
            || self.ce.len() != n
            || self.trace.len() != n
            || self.val_dice.len() != n
            || self.val_cm_error.len() != n
        {
            return Err(Error::shape(
                format!("{epochs} entries in every history column"),
                format!(
                    "{}/{}/{}/{}/{}",
                    self.total.len(),
                    self.ce.len(),
                    self.trace.len(),
                    self.val_dice.len(),
                    self.val_cm_error.len()
                ),
            ));
        }
        Ok(())
    }
}

/// What the loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTask {
    /// Joint estimation of segmentation and confusion matrices.
    Joint,
    /// Joint estimation with the warm-up schedule kept but the trace
    /// penalty dropped afterwards. Warm-up is a stabilization protocol
    /// shared by the ablation arm; the penalty is what the ablation
    /// removes, so post-warm-up epochs run on cross-entropy alone.
    JointWarmupOnly,
    /// Confusion head pinned at its identity initialization for the whole
    /// run with the trace weight forced to zero; cross-entropy then acts
    /// directly on the segmentation head. This is the naive baseline that
    /// treats observed labels as ground truth.
    FrozenIdentityCms,
}

/// Training failed; when optimization had already produced at least a
/// valid initialization, the last finite state rides along.
#[derive(Debug)]
pub struct TrainFailure {
    pub cause: Error,
    pub checkpoint: Option<Box<(ModelParams, TrainHistory)>>,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.checkpoint {
            Some(b) => write!(
                f,
                "training aborted after {} finished epochs: {}",
                b.1.epochs(),
                self.cause
            ),
            None => write!(f, "training not started: {}", self.cause),
        }
    }
}

impl std::error::Error for TrainFailure {}

impl From<Error> for TrainFailure {
    fn from(cause: Error) -> Self {
        TrainFailure {
            cause,
            checkpoint: None,
        }
    }
}

/// The parameters a run starts from, reproducible from the config alone.
pub fn initial_params(arch: &ModelArch, cfg: &TrainConfig) -> Result<ModelParams> {
    init_params(arch, &SeedRng::new(cfg.seed).child(DOMAIN_INIT))
}

/// Deterministic 80/20 split of image indices. Datasets too small to hold
/// anything out validate on the training images instead.
fn split_indices(n: usize, seed: &SeedRng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed.child(DOMAIN_SPLIT).rng());
    let held = if n >= 2 { (n / 5).max(1) } else { 0 };
    let val: Vec<usize> = order.split_off(n - held);
    if val.is_empty() {
        (order.clone(), order)
    } else {
        (order, val)
    }
}

enum OptState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl OptState {
    fn new(kind: Optimizer, len: usize) -> Self {
        match kind {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::AdamDefaults => OptState::Adam {
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            },
        }
    }

    fn step(&mut self, values: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            OptState::Sgd => {
                for (p, g) in values.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptState::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t as i32);
                let c2 = 1.0 - B2.powi(*t as i32);
                for i in 0..values.len() {
                    m[i] = B1 * m[i] + (1.0 - B1) * grad[i];
                    v[i] = B2 * v[i] + (1.0 - B2) * grad[i] * grad[i];
                    values[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

fn check_compat(dataset: &Dataset, arch: &ModelArch) -> Result<()> {
    arch.validate()?;
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(Error::arg("dataset is empty"));
    }
    if arch.classes != dataset.classes() || arch.annotators != dataset.annotators() {
        return Err(Error::shape(
            format!("{} classes, {} annotators", arch.classes, arch.annotators),
            format!("{}, {}", dataset.classes(), dataset.annotators()),
        ));
    }
    if arch.in_channels != dataset.images[0].channels() {
        return Err(Error::shape(
            format!("{} image channels", arch.in_channels),
            format!("{}", dataset.images[0].channels()),
        ));
    }
    Ok(())
}

fn sample_gradient(
    dataset: &Dataset,
    params: &ModelParams,
    index: usize,
    flip_h: bool,
    flip_v: bool,
    lambda: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let image = dataset.images[index].flipped(flip_h, flip_v);
    let labels: Vec<Option<LabelMap>> = (0..params.arch.annotators)
        .map(|r| {
            dataset
                .availability
                .contains(&(index, r))
                .then(|| dataset.noisy[&(index, r)].flipped(flip_h, flip_v))
        })
        .collect();
    backward(params, &image, &labels, lambda)
}

fn validation_scores(
    params: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<(f64, f64)> {
    let rows = par::map_slice(indices, |&i| -> Result<(f64, f64, usize)> {
        let out = forward(params, &dataset.images[i])?;
        let pred = out.seg_probs.argmax();
        let dice = metrics::dice_foreground_mean(&pred, &dataset.gt[i])?;
        let mut cm_sum = 0.0;
        let mut pairs = 0;
        for (r, observed) in dataset.labels_for(i) {
            let reference = build_reference_cms(&dataset.gt[i], observed)?;
            cm_sum += metrics::cm_rmse(
                &out.cms[r],
                &reference,
                &dataset.gt[i],
                CmErrorMode::TrueColumn,
            )?;
            pairs += 1;
        }
        Ok((dice, cm_sum, pairs))
    });
    let mut dice = 0.0;
    let mut cm = 0.0;
    let mut pairs = 0;
    for row in rows {
        let (d, c, p) = row?;
        dice += d;
        cm += c;
        pairs += p;
    }
    Ok((dice / indices.len() as f64, cm / pairs.max(1) as f64))
}

pub fn train(
    dataset: &Dataset,
    arch: &ModelArch,
    cfg: &TrainConfig,
) -> std::result::Result<(ModelParams, TrainHistory), TrainFailure> {
    train_task(dataset, arch, cfg, TrainTask::Joint)
}

pub fn train_task(
    dataset: &Dataset,
    arch: &ModelArch,
    cfg: &TrainConfig,
    task: TrainTask,
) -> std::result::Result<(ModelParams, TrainHistory), TrainFailure> {
    train_observed(dataset, arch, cfg, task, |_, _, _| Ok(()))
}

/// Full loop with an epoch observer; the observer runs after every
/// completed epoch and is how periodic checkpointing hooks in.
pub fn train_observed<F>(
    dataset: &Dataset,
    arch: &ModelArch,
    cfg: &TrainConfig,
    task: TrainTask,
    mut on_epoch: F,
) -> std::result::Result<(ModelParams, TrainHistory), TrainFailure>
where
    F: FnMut(usize, &ModelParams, &TrainHistory) -> Result<()>,
{
    cfg.validate()?;
    check_compat(dataset, arch)?;
    let root = SeedRng::new(cfg.seed);
    let mut params = initial_params(arch, cfg)?;
    let layout = params.layout();
    let frozen_ranges: Vec<Range<usize>> = ["ann.weight", "ann.bias", "ann.diag"]
        .iter()
        .filter_map(|name| layout.range(name))
        .collect();
    let (train_idx, val_idx) = split_indices(dataset.len(), &root);
    let mut opt = OptState::new(cfg.optimizer, layout.total());
    let mut history = TrainHistory::empty();
    let mut last_good = params.clone();

    for epoch in 0..cfg.epochs {
        let warm = epoch < cfg.warmup_epochs;
        let freeze_ann = match task {
            TrainTask::FrozenIdentityCms => true,
            TrainTask::Joint | TrainTask::JointWarmupOnly => {
                warm && cfg.warmup_mode == WarmupMode::BiasInit
            }
        };
        let lambda_eff = match task {
            TrainTask::FrozenIdentityCms => 0.0,
            TrainTask::Joint | TrainTask::JointWarmupOnly => {
                if warm && cfg.warmup_mode == WarmupMode::NegativeTrace {
                    -cfg.lambda
                } else if task == TrainTask::JointWarmupOnly {
                    0.0
                } else {
                    cfg.lambda
                }
            }
        };

        let mut rng = root.child(DOMAIN_EPOCH + epoch as u64).rng();
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);

        let abort = |cause: Error, history: &TrainHistory, last_good: &ModelParams| {
            TrainFailure {
                cause,
                checkpoint: Some(Box::new((last_good.clone(), history.clone()))),
            }
        };

        let mut ep_total = 0.0;
        let mut ep_ce = 0.0;
        let mut ep_trace = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<(usize, bool, bool)> = batch
                .iter()
                .map(|&i| {
                    if cfg.augment_flip {
                        (i, rng.gen::<bool>(), rng.gen::<bool>())
                    } else {
                        (i, false, false)
                    }
                })
                .collect();
            let results = par::map_slice(&samples, |&(i, fh, fv)| {
                sample_gradient(dataset, &params, i, fh, fv, lambda_eff)
            });
            let mut grad_sum = vec![0.0; layout.total()];
            for res in results {
                let (loss, grad) = match res {
                    Ok(v) => v,
                    Err(e) => return Err(abort(e, &history, &last_good)),
                };
                ep_total += loss.total;
                ep_ce += loss.ce_total();
                ep_trace += loss.trace_total();
                for (a, g) in grad_sum.iter_mut().zip(&grad) {
                    *a += g;
                }
            }
            seen += batch.len();
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad_sum {
                *g *= scale;
            }
            if freeze_ann {
                for range in &frozen_ranges {
                    grad_sum[range.clone()].fill(0.0);
                }
            }
            opt.step(params.values_mut(), &grad_sum, cfg.learning_rate);
        }

        history.total.push(ep_total / seen as f64);
        history.ce.push(ep_ce / seen as f64);
        history.trace.push(ep_trace / seen as f64);
        match validation_scores(&params, dataset, &val_idx) {
            Ok((dice, cm)) => {
                history.val_dice.push(dice);
                history.val_cm_error.push(cm);
            }
            Err(e) => return Err(abort(e, &history, &last_good)),
        }
        last_good = params.clone();
        on_epoch(epoch, &params, &history)?;
    }
    Ok((params, history))
}

/// Segmentation quality, confusion-matrix error, and distributional
/// distance of a trained model on a held-out split. No label fusion
/// happens here: predictions come from the segmentation head alone.
pub fn evaluate(params: &ModelParams, split: &Dataset) -> Result<MetricsReport> {
    evaluate_with_cms(params, split, |_| None)
}

/// Like [`evaluate`], but `override_cms` may substitute externally known
/// confusion fields for any image; the annotator distributions are then
/// rebuilt from the substituted fields.
pub fn evaluate_with_cms<F>(
    params: &ModelParams,
    split: &Dataset,
    override_cms: F,
) -> Result<MetricsReport>
where
    F: Fn(usize) -> Option<Vec<ConfusionField>> + Sync,
{
    check_compat(split, &params.arch)?;
    let l = params.arch.classes;

    struct Row {
        dice_per_class: Vec<f64>,
        dice_fg: f64,
        cm_tc: f64,
        cm_full: f64,
        cm_pairs: usize,
        ged: f64,
        consensus: Option<f64>,
    }

    let rows = par::map_indexed(split.len(), |i| -> Result<Row> {
        let mut out = forward(params, &split.images[i])?;
        if let Some(cms) = override_cms(i) {
            if cms.len() != params.arch.annotators {
                return Err(Error::shape(
                    format!("{} confusion fields", params.arch.annotators),
                    format!("{}", cms.len()),
                ));
            }
            out.ann_probs = cms
                .iter()
                .map(|a| cm_apply(a, &out.seg_probs))
                .collect::<Result<Vec<_>>>()?;
            out.cms = cms;
        }
        let gt = &split.gt[i];
        let pred = out.seg_probs.argmax();
        let dice_per_class = (0..l)
            .map(|c| metrics::dice(&pred, gt, c))
            .collect::<Result<Vec<f64>>>()?;
        let dice_fg = metrics::dice_foreground_mean(&pred, gt)?;
        let mut cm_tc = 0.0;
        let mut cm_full = 0.0;
        let mut cm_pairs = 0;
        let observed: Vec<LabelMap> = split
            .labels_for(i)
            .iter()
            .map(|(_, m)| (*m).clone())
            .collect();
        for (r, map) in split.labels_for(i) {
            let reference = build_reference_cms(gt, map)?;
            cm_tc += metrics::cm_rmse(&out.cms[r], &reference, gt, CmErrorMode::TrueColumn)?;
            cm_full += metrics::cm_rmse(&out.cms[r], &reference, gt, CmErrorMode::Full)?;
            cm_pairs += 1;
        }
        let model_maps: Vec<LabelMap> = out.ann_probs.iter().map(|q| q.argmax()).collect();
        let ged = metrics::ged(&model_maps, &observed)?;
        let consensus = if observed.len() >= 2 {
            Some(metrics::consensus_iou(&observed)?)
        } else {
            None
        };
        Ok(Row {
            dice_per_class,
            dice_fg,
            cm_tc,
            cm_full,
            cm_pairs,
            ged,
            consensus,
        })
    });

    let n = split.len() as f64;
    let mut dice_per_class = vec![0.0; l];
    let mut dice_mean = 0.0;
    let mut cm_tc = 0.0;
    let mut cm_full = 0.0;
    let mut cm_pairs = 0usize;
    let mut ged = 0.0;
    let mut consensus_iou_per_image = Vec::new();
    let mut binned_dice = Vec::new();
    for row in rows {
        let row = row?;
        for (acc, d) in dice_per_class.iter_mut().zip(&row.dice_per_class) {
            *acc += d / n;
        }
        dice_mean += row.dice_fg / n;
        cm_tc += row.cm_tc;
        cm_full += row.cm_full;
        cm_pairs += row.cm_pairs;
        ged += row.ged / n;
        if let Some(c) = row.consensus {
            consensus_iou_per_image.push(c);
            binned_dice.push(row.dice_fg);
        }
    }
    let report = MetricsReport {
        dice_per_class,
        dice_mean,
        cm_rmse_true_column: cm_tc / cm_pairs.max(1) as f64,
        cm_rmse_full_convention: cm_full / cm_pairs.max(1) as f64,
        ged,
        consensus_iou_per_image: consensus_iou_per_image.clone(),
        subgroup_dice: metrics::subgroup_report(
            &consensus_iou_per_image,
            &binned_dice,
            SUBGROUP_BOUNDS,
        )?,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CmMode;
    use crate::sim::{simulate_dataset, synth_shapes, AnnotatorProfile};

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        let pairs = synth_shapes(n, 10, 10, 2, &SeedRng::new(seed)).unwrap();
        let profiles = vec![
            AnnotatorProfile::good(1),
            AnnotatorProfile::over(1),
            AnnotatorProfile::under(1),
        ];
        simulate_dataset(pairs, &profiles, 1.0, &SeedRng::new(seed + 1)).unwrap()
    }

    fn toy_arch(annotators: usize) -> ModelArch {
        ModelArch {
            in_channels: 1,
            trunk_layers: 1,
            trunk_channels: 6,
            classes: 2,
            annotators,
            cm_mode: CmMode::Full,
        }
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 2e-2,
            epochs: 3,
            batch_size: 4,
            lambda: 0.7,
            warmup_epochs: 1,
            warmup_mode: WarmupMode::BiasInit,
            optimizer: Optimizer::AdamDefaults,
            augment_flip: false,
            seed,
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let cfg = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let base = TrainConfig::default();
        let cfg = TrainConfig {
            warmup_epochs: base.epochs,
            ..base
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let ds = toy_dataset(4, 1);
        let arch = toy_arch(3);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            warmup_epochs: 0,
            optimizer: Optimizer::Sgd,
            augment_flip: false,
            ..TrainConfig::default()
        };
        let (params, history) = train(&ds, &arch, &cfg).unwrap();
        assert_eq!(params, initial_params(&arch, &cfg).unwrap());
        history.validate(1).unwrap();
    }

    #[test]
    fn same_seed_gives_identical_runs() {
        let ds = toy_dataset(5, 2);
        let arch = toy_arch(3);
        let cfg = quick_cfg(7);
        let (p1, h1) = train(&ds, &arch, &cfg).unwrap();
        let (p2, h2) = train(&ds, &arch, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
        let (p3, _) = train(&ds, &arch, &quick_cfg(8)).unwrap();
        assert_ne!(p1, p3);
    }

    #[test]
    fn training_ce_decreases_in_median() {
        let mut curves = Vec::new();
        for seed in [0u64, 1, 2] {
            let ds = toy_dataset(8, 30 + seed);
            let cfg = TrainConfig {
                epochs: 5,
                warmup_epochs: 1,
                seed,
                ..quick_cfg(seed)
            };
            let (_, h) = train(&ds, &toy_arch(3), &cfg).unwrap();
            curves.push(h.ce);
        }
        for e in 1..5 {
            let mut prev: Vec<f64> = curves.iter().map(|c| c[e - 1]).collect();
            let mut cur: Vec<f64> = curves.iter().map(|c| c[e]).collect();
            prev.sort_by(f64::total_cmp);
            cur.sort_by(f64::total_cmp);
            assert!(
                cur[1] < prev[1],
                "median ce rose from {} to {} at epoch {e}",
                prev[1],
                cur[1]
            );
        }
    }

    #[test]
    fn trace_non_increasing_after_warmup() {
        let mut curves = Vec::new();
        for seed in [0u64, 1, 2] {
            let ds = toy_dataset(8, 60 + seed);
            let cfg = TrainConfig {
                epochs: 6,
                warmup_epochs: 2,
                lambda: 0.7,
                seed,
                ..quick_cfg(seed)
            };
            let (_, h) = train(&ds, &toy_arch(3), &cfg).unwrap();
            curves.push(h.trace);
        }
        for e in 3..6 {
            let mut prev: Vec<f64> = curves.iter().map(|c| c[e - 1]).collect();
            let mut cur: Vec<f64> = curves.iter().map(|c| c[e]).collect();
            prev.sort_by(f64::total_cmp);
            cur.sort_by(f64::total_cmp);
            assert!(
                cur[1] <= prev[1] + 1e-6,
                "median trace rose from {} to {} at epoch {e}",
                prev[1],
                cur[1]
            );
        }
    }

    #[test]
    fn frozen_identity_task_never_moves_annotator_head() {
        let ds = toy_dataset(5, 3);
        let arch = toy_arch(3);
        let cfg = quick_cfg(9);
        let (params, _) = train_task(&ds, &arch, &cfg, TrainTask::FrozenIdentityCms).unwrap();
        let init = initial_params(&arch, &cfg).unwrap();
        let layout = params.layout();
        for name in ["ann.weight", "ann.bias"] {
            assert_eq!(params.slice(&layout, name), init.slice(&layout, name));
        }
        assert_ne!(params.slice(&layout, "seg.weight"), init.slice(&layout, "seg.weight"));
        let out = forward(&params, &ds.images[0]).unwrap();
        for cm in &out.cms {
            assert!(crate::grid::trace_mean(cm) >= 0.99 * 2.0);
        }
    }

    #[test]
    fn negative_trace_warmup_holds_trace_high() {
        let ds = toy_dataset(6, 4);
        let cfg = TrainConfig {
            epochs: 12,
            warmup_epochs: 2,
            warmup_mode: WarmupMode::NegativeTrace,
            ..quick_cfg(11)
        };
        let (_, h) = train(&ds, &toy_arch(3), &cfg).unwrap();
        // three annotators near the trace ceiling of 2 throughout warm-up
        assert!(h.trace[0] > 0.99 * 6.0);
        assert!(h.trace[1] > 0.99 * 6.0);
        assert!(h.trace[11] < h.trace[1]);
    }

    #[test]
    fn warmup_only_task_matches_unregularized_joint_under_bias_init() {
        let ds = toy_dataset(5, 7);
        let arch = toy_arch(3);
        let cfg = quick_cfg(13);
        let zero = TrainConfig {
            lambda: 0.0,
            ..cfg.clone()
        };
        let (pa, ha) = train_task(&ds, &arch, &cfg, TrainTask::JointWarmupOnly).unwrap();
        let (pb, hb) = train_task(&ds, &arch, &zero, TrainTask::Joint).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ha, hb);
    }

    #[test]
    fn warmup_only_task_keeps_negative_trace_anchor() {
        let ds = toy_dataset(6, 8);
        let arch = toy_arch(3);
        let cfg = TrainConfig {
            epochs: 6,
            warmup_epochs: 3,
            warmup_mode: WarmupMode::NegativeTrace,
            ..quick_cfg(17)
        };
        let (_, h) = train_task(&ds, &arch, &cfg, TrainTask::JointWarmupOnly).unwrap();
        // the warm-up anchor still applies even though the penalty is gone
        assert!(h.trace[2] > 0.99 * 6.0);
        let zero = TrainConfig { lambda: 0.0, ..cfg };
        let (_, hz) = train_task(&ds, &arch, &zero, TrainTask::Joint).unwrap();
        assert!(hz.trace[2] < h.trace[2]);
    }

    #[test]
    fn single_label_regime_trains() {
        let mut ds = toy_dataset(6, 5);
        crate::sim::thin_to_single(&mut ds, &SeedRng::new(99)).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.labels_for(i).len(), 1);
        }
        let (params, h) = train(&ds, &toy_arch(3), &quick_cfg(12)).unwrap();
        h.validate(3).unwrap();
        let out = forward(&params, &ds.images[0]).unwrap();
        assert_eq!(out.cms.len(), 3);
    }

    #[test]
    fn divergence_aborts_with_last_good_checkpoint() {
        let ds = toy_dataset(4, 6);
        let arch = toy_arch(3);
        let cfg = TrainConfig {
            learning_rate: 1e200,
            epochs: 3,
            warmup_epochs: 0,
            optimizer: Optimizer::Sgd,
            augment_flip: false,
            ..TrainConfig::default()
        };
        let failure = train(&ds, &arch, &cfg).unwrap_err();
        let (checkpoint, partial) = *failure.checkpoint.expect("checkpoint should survive");
        assert!(partial.epochs() < 3);
        let out = forward(&checkpoint, &ds.images[0]).unwrap();
        assert!(out.seg_logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn evaluate_with_known_cms_hits_error_floor() {
        let ds = toy_dataset(4, 7);
        let arch = toy_arch(3);
        let params = initial_params(&arch, &quick_cfg(13)).unwrap();
        let reference: Vec<Vec<ConfusionField>> = (0..ds.len())
            .map(|i| {
                (0..3)
                    .map(|r| match ds.noisy.get(&(i, r)) {
                        Some(map) => build_reference_cms(&ds.gt[i], map).unwrap(),
                        None => ConfusionField::identity(10, 10, 2),
                    })
                    .collect()
            })
            .collect();
        let report =
            evaluate_with_cms(&params, &ds, |i| Some(reference[i].clone())).unwrap();
        assert!(report.cm_rmse_true_column < 1e-12);
        assert!(report.cm_rmse_full_convention < 1e-12);
    }

    #[test]
    fn empty_prediction_scores_zero_dice() {
        let ds = toy_dataset(3, 8);
        let arch = toy_arch(3);
        let mut params = initial_params(&arch, &quick_cfg(14)).unwrap();
        let layout = params.layout();
        params.slice_mut(&layout, "seg.weight").fill(0.0);
        let bias = params.slice_mut(&layout, "seg.bias");
        bias[0] = 1000.0;
        bias[1] = 0.0;
        let report = evaluate(&params, &ds).unwrap();
        assert_eq!(report.dice_mean, 0.0);
    }

    #[test]
    fn history_lengths_always_match_epochs() {
        let ds = toy_dataset(4, 9);
        let cfg = quick_cfg(15);
        let (_, h) = train(&ds, &toy_arch(3), &cfg).unwrap();
        h.validate(cfg.epochs).unwrap();
        assert!(h.validate(cfg.epochs + 1).is_err());
    }

    #[test]
    fn split_holds_out_a_fifth() {
        let (tr, va) = split_indices(10, &SeedRng::new(1));
        assert_eq!(tr.len(), 8);
        assert_eq!(va.len(), 2);
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let (tr1, va1) = split_indices(1, &SeedRng::new(2));
        assert_eq!(tr1, vec![0]);
        assert_eq!(va1, vec![0]);
    }
}
