//! Experiment pipelines: dataset construction, per-run execution, and
//! report emission.
//!
//! A report run is the cross product corruption level × method × seed.
//! The dataset for a level is built once and shared by every method and
//! seed at that level, so methods are compared on identical data; the run
//! seed only drives training. Runs execute in parallel and results are
//! emitted in a fixed order, which keeps the CSV output byte-identical
//! across repetitions and worker counts.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;

use nlsg_core::error::Result as CoreResult;
use nlsg_core::fusion;
use nlsg_core::grid::tensor_io::{self, RawTensor};
use nlsg_core::grid::{one_hot, ConfusionField, LabelMap, ProbabilityMap};
use nlsg_core::metrics::{self, CmErrorMode, MetricsReport, Subgroup};
use nlsg_core::model::{ModelArch, ModelParams};
use nlsg_core::par;
use nlsg_core::rng::SeedRng;
use nlsg_core::sim::{
    build_reference_cms, load_idx, simulate_dataset, synth_shapes, thin_to_single,
    AnnotatorProfile, Dataset,
};
use nlsg_core::train::{evaluate, train_observed, TrainHistory, TrainTask};

use crate::charts::{self, Series};
use crate::config::{load_config, DatasetSpec, ExperimentConfig, FusionSettings, Method, Regime};
use crate::fsio::{atomic_write, write_csv};
use crate::{CliError, CliResult};

const DOM_IMAGES: u64 = 0xA1;
const DOM_TRAIN_NOISE: u64 = 0xA2;
const DOM_TEST_NOISE: u64 = 0xA3;
const DOM_THIN_TRAIN: u64 = 0xA4;
const DOM_THIN_TEST: u64 = 0xA5;

const HISTORY_HEADER: [&str; 6] = ["epoch", "total", "ce", "trace", "val_dice", "val_cm_error"];

pub struct BuiltData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Corruption scaling for the noise sweep. Level 1 is the configured panel
/// unchanged; higher levels multiply each profile's morphology parameters;
/// level 0 turns every annotator into a faithful copy of the ground truth.
fn scale_profiles(profiles: &[AnnotatorProfile], level: usize) -> Vec<AnnotatorProfile> {
    profiles
        .iter()
        .map(|p| {
            if level == 0 {
                return AnnotatorProfile::good(0).with_target(p.target_class);
            }
            let mut q = *p;
            q.magnitude = p.magnitude * level;
            q.fracture_count = p.fracture_count * level;
            q.fracture_width = p.fracture_width * level;
            q
        })
        .collect()
}

/// Build the train/test splits for one corruption level. Image content and
/// noise derive from the first configured seed, so every method and run
/// seed sees the same data.
pub fn build_datasets(cfg: &ExperimentConfig, level: usize) -> CliResult<BuiltData> {
    let root = SeedRng::new(cfg.seeds[0]);
    let (train_pairs, test_pairs) = match &cfg.dataset {
        DatasetSpec::Synthetic {
            count,
            test_count,
            width,
            height,
            classes,
        } => {
            let mut all = synth_shapes(
                count + test_count,
                *width,
                *height,
                *classes,
                &root.child(DOM_IMAGES),
            )?;
            let test = all.split_off(*count);
            (all, test)
        }
        DatasetSpec::Idx {
            images,
            labels,
            threshold,
            count,
            test_count,
        } => {
            let mut all = load_idx(images, labels, *threshold)?;
            if all.len() < count + test_count {
                return Err(CliError::Config(format!(
                    "idx files hold {} images, need {}",
                    all.len(),
                    count + test_count
                )));
            }
            all.truncate(count + test_count);
            let test = all.split_off(*count);
            (all, test)
        }
    };
    let profiles = scale_profiles(&cfg.resolved_profiles(), level);
    let mut train = simulate_dataset(train_pairs, &profiles, 1.0, &root.child(DOM_TRAIN_NOISE))?;
    let mut test = simulate_dataset(test_pairs, &profiles, 1.0, &root.child(DOM_TEST_NOISE))?;
    if cfg.regime == Regime::SingleRandom {
        thin_to_single(&mut train, &root.child(DOM_THIN_TRAIN))?;
        thin_to_single(&mut test, &root.child(DOM_THIN_TEST))?;
    }
    Ok(BuiltData { train, test })
}

fn load_or_build(cfg: &ExperimentConfig, data: Option<&Path>) -> CliResult<BuiltData> {
    match data {
        Some(dir) => Ok(BuiltData {
            train: Dataset::load_dir(&dir.join("train"))?,
            test: Dataset::load_dir(&dir.join("test"))?,
        }),
        None => build_datasets(cfg, 1),
    }
}

fn arch_for(cfg: &ExperimentConfig, train: &Dataset) -> ModelArch {
    let in_channels = train.images.first().map_or(1, |im| im.channels());
    cfg.arch
        .instantiate(in_channels, train.classes(), train.annotators())
}

fn task_for(method: Method) -> TrainTask {
    match method {
        Method::OursNoTrace => TrainTask::JointWarmupOnly,
        Method::Naive => TrainTask::FrozenIdentityCms,
        _ => TrainTask::Joint,
    }
}

/// Fuse one image's annotations. Methods of the STAPLE family also return
/// their confusion estimates; mean and majority estimate none.
fn fuse_image(
    observed: &[LabelMap],
    classes: usize,
    method: Method,
    fs: &FusionSettings,
) -> CoreResult<(ProbabilityMap, Option<Vec<ConfusionField>>)> {
    match method {
        Method::Mean => Ok((fusion::mean_fusion(observed)?, None)),
        Method::Majority => Ok((one_hot(&fusion::majority_vote(observed)?, classes)?, None)),
        Method::Staple => {
            let res = fusion::staple(observed, fs.max_iters, fs.tol)?;
            let (w, h) = (res.posterior.width(), res.posterior.height());
            let fields = res
                .annotator_cms
                .iter()
                .map(|cm| {
                    let mut entries = Vec::with_capacity(w * h * classes * classes);
                    for _ in 0..w * h {
                        entries.extend_from_slice(cm);
                    }
                    ConfusionField::new(w, h, classes, entries)
                })
                .collect::<CoreResult<Vec<_>>>()?;
            Ok((res.posterior, Some(fields)))
        }
        Method::SpatialStaple => {
            let (post, fields) =
                fusion::spatial_staple(observed, fs.window, fs.stride, fs.max_iters, fs.tol)?;
            Ok((post, Some(fields)))
        }
        _ => unreachable!("trained method routed into the fusion path"),
    }
}

/// Run one fusion baseline over a split: fused labels per image plus the
/// same metrics an evaluated model reports. Confusion errors are reported
/// only for methods that estimate confusion matrices; the other columns
/// stay NaN rather than pretending a perfect score.
pub fn fuse_split(
    split: &Dataset,
    method: Method,
    fs: &FusionSettings,
) -> CliResult<(MetricsReport, Vec<LabelMap>)> {
    let l = split.classes();

    struct Row {
        dice_per_class: Vec<f64>,
        dice_fg: f64,
        cm_tc: f64,
        cm_full: f64,
        cm_pairs: usize,
        ged: f64,
        consensus: Option<f64>,
        fused: LabelMap,
    }

    let rows = par::map_indexed(split.len(), |i| -> CoreResult<Row> {
        let gt = &split.gt[i];
        let observed: Vec<LabelMap> = split
            .labels_for(i)
            .iter()
            .map(|(_, m)| (*m).clone())
            .collect();
        let (posterior, fields) = fuse_image(&observed, l, method, fs)?;
        let pred = posterior.argmax();
        let dice_per_class = (0..l)
            .map(|c| metrics::dice(&pred, gt, c))
            .collect::<CoreResult<Vec<f64>>>()?;
        let dice_fg = metrics::dice_foreground_mean(&pred, gt)?;
        let mut cm_tc = 0.0;
        let mut cm_full = 0.0;
        let mut cm_pairs = 0;
        if let Some(fields) = &fields {
            for (slot, (_, map)) in split.labels_for(i).iter().enumerate() {
                let reference = build_reference_cms(gt, map)?;
                cm_tc += metrics::cm_rmse(&fields[slot], &reference, gt, CmErrorMode::TrueColumn)?;
                cm_full += metrics::cm_rmse(&fields[slot], &reference, gt, CmErrorMode::Full)?;
                cm_pairs += 1;
            }
        }
        let ged = metrics::ged(std::slice::from_ref(&pred), &observed)?;
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
            fused: pred,
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
    let mut fused = Vec::with_capacity(split.len());
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
        fused.push(row.fused);
    }
    let (cm_tc, cm_full) = if cm_pairs > 0 {
        (cm_tc / cm_pairs as f64, cm_full / cm_pairs as f64)
    } else {
        (f64::NAN, f64::NAN)
    };
    let report = MetricsReport {
        dice_per_class,
        dice_mean,
        cm_rmse_true_column: cm_tc,
        cm_rmse_full_convention: cm_full,
        ged,
        consensus_iou_per_image: consensus_iou_per_image.clone(),
        subgroup_dice: metrics::subgroup_report(
            &consensus_iou_per_image,
            &binned_dice,
            metrics::SUBGROUP_BOUNDS,
        )?,
    };
    report.validate()?;
    Ok((report, fused))
}

fn model_run(
    data: &BuiltData,
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
) -> CliResult<(MetricsReport, TrainHistory)> {
    let arch = arch_for(cfg, &data.train);
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let task = task_for(method);
    let (params, history) = train_observed(&data.train, &arch, &tc, task, |_, _, _| Ok(()))
        .map_err(|f| CliError::Runtime(format!("{} seed {seed}: {f}", method.name())))?;
    let report = evaluate(&params, &data.test)?;
    Ok((report, history))
}

struct RunOutcome {
    level: usize,
    method: Method,
    seed: u64,
    report: MetricsReport,
    history: Option<TrainHistory>,
}

fn run_all(cfg: &ExperimentConfig, levels: &[usize]) -> CliResult<Vec<RunOutcome>> {
    let datasets = levels
        .iter()
        .map(|&lvl| build_datasets(cfg, lvl))
        .collect::<CliResult<Vec<_>>>()?;
    let mut keys = Vec::new();
    for (li, &level) in levels.iter().enumerate() {
        for &method in &cfg.methods {
            for &seed in &cfg.seeds {
                keys.push((li, level, method, seed));
            }
        }
    }
    let results = par::map_slice(&keys, |&(li, level, method, seed)| {
        let data = &datasets[li];
        let (report, history) = if method.is_trained() {
            let (report, history) = model_run(data, cfg, method, seed)?;
            (report, Some(history))
        } else {
            let (report, _) = fuse_split(&data.test, method, &cfg.fusion)?;
            (report, None)
        };
        Ok(RunOutcome {
            level,
            method,
            seed,
            report,
            history,
        })
    });
    results.into_iter().collect()
}

/// A float cell: six decimals, NaN as an empty cell.
fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

fn fmt4(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "-".into()
    }
}

fn consensus_mean(rep: &MetricsReport) -> f64 {
    if rep.consensus_iou_per_image.is_empty() {
        f64::NAN
    } else {
        rep.consensus_iou_per_image.iter().sum::<f64>() / rep.consensus_iou_per_image.len() as f64
    }
}

fn subgroup(rep: &MetricsReport, group: Subgroup) -> f64 {
    rep.subgroup_dice.get(&group).copied().unwrap_or(f64::NAN)
}

/// Median over the finite values; None when nothing is finite.
fn median(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[derive(Serialize)]
struct SummaryRow {
    level: usize,
    method: String,
    dice_median: Option<f64>,
    cm_rmse_true_column_median: Option<f64>,
    ged_median: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    config: String,
    levels: Vec<usize>,
    rows: Vec<SummaryRow>,
}

fn emit_report(
    cfg: &ExperimentConfig,
    levels: &[usize],
    outcomes: &[RunOutcome],
    sweeping: bool,
) -> CliResult<()> {
    let hash = cfg.hash();
    let dir = &cfg.output_dir;

    let mut header = vec![
        "method",
        "seed",
        "config",
        "dice",
        "cm_rmse_true_column",
        "cm_rmse_full",
        "ged",
        "consensus_iou",
        "dice_low",
        "dice_mid",
        "dice_high",
    ];
    if sweeping {
        header.insert(0, "level");
    }
    let rows: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            let mut row = Vec::with_capacity(header.len());
            if sweeping {
                row.push(o.level.to_string());
            }
            row.push(o.method.name().into());
            row.push(o.seed.to_string());
            row.push(hash.clone());
            row.push(cell(o.report.dice_mean));
            row.push(cell(o.report.cm_rmse_true_column));
            row.push(cell(o.report.cm_rmse_full_convention));
            row.push(cell(o.report.ged));
            row.push(cell(consensus_mean(&o.report)));
            row.push(cell(subgroup(&o.report, Subgroup::Low)));
            row.push(cell(subgroup(&o.report, Subgroup::Mid)));
            row.push(cell(subgroup(&o.report, Subgroup::High)));
            row
        })
        .collect();
    let table = if sweeping { "sweep.csv" } else { "report.csv" };
    write_csv(&dir.join(table), &header, &rows)?;

    for o in outcomes {
        if let Some(h) = &o.history {
            let name = if sweeping {
                format!("histories/l{}-{}-s{}.csv", o.level, o.method.name(), o.seed)
            } else {
                format!("histories/{}-s{}.csv", o.method.name(), o.seed)
            };
            write_csv(&dir.join(name), &HISTORY_HEADER, &history_rows(h))?;
        }
    }

    let mut summary_rows = Vec::new();
    println!("{:>5}  {:<14} {:>8}  {:>12}  {:>8}", "level", "method", "dice", "cm_rmse_tc", "ged");
    for &level in levels {
        for &method in &cfg.methods {
            let sel = || {
                outcomes
                    .iter()
                    .filter(move |o| o.level == level && o.method == method)
            };
            let dice = median(sel().map(|o| o.report.dice_mean));
            let cm = median(sel().map(|o| o.report.cm_rmse_true_column));
            let ged = median(sel().map(|o| o.report.ged));
            println!(
                "{level:>5}  {:<14} {:>8}  {:>12}  {:>8}",
                method.name(),
                fmt4(dice.unwrap_or(f64::NAN)),
                fmt4(cm.unwrap_or(f64::NAN)),
                fmt4(ged.unwrap_or(f64::NAN)),
            );
            summary_rows.push(SummaryRow {
                level,
                method: method.name().into(),
                dice_median: dice,
                cm_rmse_true_column_median: cm,
                ged_median: ged,
            });
        }
    }
    let summary = Summary {
        config: hash,
        levels: levels.to_vec(),
        rows: summary_rows,
    };
    atomic_write(&dir.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;

    let loss_series: Vec<Series> = outcomes
        .iter()
        .filter_map(|o| {
            o.history.as_ref().map(|h| Series {
                label: if sweeping {
                    format!("l{} {} s{}", o.level, o.method.name(), o.seed)
                } else {
                    format!("{} s{}", o.method.name(), o.seed)
                },
                points: h
                    .total
                    .iter()
                    .enumerate()
                    .map(|(e, &v)| (e as f64, v))
                    .collect(),
            })
        })
        .collect();
    if !loss_series.is_empty() {
        atomic_write(
            &dir.join("loss_curves.svg"),
            charts::line_chart("training loss", "epoch", "mean loss", &loss_series).as_bytes(),
        )?;
    }

    if sweeping {
        let series: Vec<Series> = cfg
            .methods
            .iter()
            .map(|&m| Series {
                label: m.name().into(),
                points: levels
                    .iter()
                    .filter_map(|&lvl| {
                        median(
                            outcomes
                                .iter()
                                .filter(|o| o.level == lvl && o.method == m)
                                .map(|o| o.report.dice_mean),
                        )
                        .map(|d| (lvl as f64, d))
                    })
                    .collect(),
            })
            .collect();
        atomic_write(
            &dir.join("dice_vs_level.svg"),
            charts::line_chart("test dice vs corruption level", "level", "median dice", &series)
                .as_bytes(),
        )?;
    } else {
        let bars: Vec<(String, f64)> = summary
            .rows
            .iter()
            .filter_map(|r| r.dice_median.map(|d| (r.method.clone(), d)))
            .collect();
        atomic_write(
            &dir.join("dice_by_method.svg"),
            charts::bar_chart("median test dice", "dice", &bars).as_bytes(),
        )?;
        let cm_bars: Vec<(String, f64)> = summary
            .rows
            .iter()
            .filter_map(|r| r.cm_rmse_true_column_median.map(|c| (r.method.clone(), c)))
            .collect();
        if !cm_bars.is_empty() {
            atomic_write(
                &dir.join("cm_by_method.svg"),
                charts::bar_chart("median confusion rmse (true column)", "rmse", &cm_bars)
                    .as_bytes(),
            )?;
        }
    }
    Ok(())
}

fn history_rows(h: &TrainHistory) -> Vec<Vec<String>> {
    (0..h.epochs())
        .map(|e| {
            vec![
                e.to_string(),
                cell(h.total[e]),
                cell(h.ce[e]),
                cell(h.trace[e]),
                cell(h.val_dice[e]),
                cell(h.val_cm_error[e]),
            ]
        })
        .collect()
}

fn print_report(rep: &MetricsReport) {
    let per: Vec<String> = rep.dice_per_class.iter().map(|&d| fmt4(d)).collect();
    println!("  dice per class        [{}]", per.join(", "));
    println!("  dice foreground mean  {}", fmt4(rep.dice_mean));
    println!("  cm rmse true-column   {}", fmt4(rep.cm_rmse_true_column));
    println!("  cm rmse full          {}", fmt4(rep.cm_rmse_full_convention));
    println!("  ged                   {}", fmt4(rep.ged));
    if !rep.consensus_iou_per_image.is_empty() {
        println!("  consensus iou mean    {}", fmt4(consensus_mean(rep)));
    }
    for (group, dice) in &rep.subgroup_dice {
        println!("  dice {:<4?} consensus   {}", group, fmt4(*dice));
    }
}

pub fn simulate_cmd(config_path: &Path, out: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(config_path)?;
    let data = build_datasets(&cfg, 1)?;
    let out = out.map_or_else(|| cfg.output_dir.join("data"), Path::to_path_buf);
    data.train.save_dir(&out.join("train"))?;
    data.test.save_dir(&out.join("test"))?;
    println!(
        "wrote {} train and {} test images ({} annotators) to {}",
        data.train.len(),
        data.test.len(),
        data.train.annotators(),
        out.display()
    );
    Ok(())
}

pub fn fuse_cmd(
    config_path: &Path,
    method: Method,
    data: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    if method.is_trained() {
        return Err(CliError::Config(format!(
            "{} is a trained model; use the train subcommand",
            method.name()
        )));
    }
    let cfg = load_config(config_path)?;
    let built = load_or_build(&cfg, data)?;
    let (report, fused) = fuse_split(&built.test, method, &cfg.fusion)?;
    let out = out.map_or_else(
        || cfg.output_dir.join(format!("fused-{}.nlsg", method.name())),
        Path::to_path_buf,
    );
    let (w, h) = (built.test.gt[0].width(), built.test.gt[0].height());
    let mut values = Vec::with_capacity(fused.len() * w * h);
    for m in &fused {
        values.extend_from_slice(m.labels());
    }
    let tensor = RawTensor::u8(vec![fused.len(), h, w], values)?;
    let mut bytes = Vec::new();
    tensor_io::write_tensor_to(&mut bytes, &tensor)?;
    atomic_write(&out, &bytes)?;
    println!(
        "{} fused {} test images -> {}",
        method.name(),
        fused.len(),
        out.display()
    );
    print_report(&report);
    Ok(())
}

pub fn train_cmd(
    config_path: &Path,
    method: Method,
    data: Option<&Path>,
    out: Option<&Path>,
    checkpoint_every: Option<usize>,
    seed: Option<u64>,
) -> CliResult<()> {
    if !method.is_trained() {
        return Err(CliError::Config(format!(
            "{} is a fusion baseline; use the fuse subcommand",
            method.name()
        )));
    }
    let cfg = load_config(config_path)?;
    let built = load_or_build(&cfg, data)?;
    let out = out.map_or_else(
        || cfg.output_dir.join(format!("train-{}", method.name())),
        Path::to_path_buf,
    );
    let arch = arch_for(&cfg, &built.train);
    let mut tc = cfg.train.clone();
    tc.seed = seed.unwrap_or(cfg.seeds[0]);
    let task = task_for(method);
    let every = checkpoint_every.unwrap_or(0);
    let epochs = tc.epochs;
    let (params, history) = train_observed(&built.train, &arch, &tc, task, |epoch, params, _| {
        if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < epochs {
            params.save(&out.join(format!("epoch-{:03}", epoch + 1)))?;
        }
        Ok(())
    })
    .map_err(|f| CliError::Runtime(format!("{}: {f}", method.name())))?;
    params.save(&out.join("checkpoint"))?;
    write_csv(&out.join("history.csv"), &HISTORY_HEADER, &history_rows(&history))?;
    println!(
        "{} trained {} epochs (seed {}), checkpoint at {}",
        method.name(),
        history.epochs(),
        tc.seed,
        out.join("checkpoint").display()
    );
    let report = evaluate(&params, &built.test)?;
    print_report(&report);
    Ok(())
}

pub fn evaluate_cmd(checkpoint: &Path, data: &Path, json: Option<&Path>) -> CliResult<()> {
    let params = ModelParams::load(checkpoint)?;
    let test_dir = data.join("test");
    let split_dir: PathBuf = if test_dir.is_dir() {
        test_dir
    } else {
        data.to_path_buf()
    };
    let split = Dataset::load_dir(&split_dir)?;
    let report = evaluate(&params, &split)?;
    println!("evaluated {} images from {}", split.len(), split_dir.display());
    print_report(&report);
    if let Some(path) = json {
        atomic_write(path, &serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}

pub fn report_cmd(config_path: &Path, sweep: Option<&[usize]>) -> CliResult<()> {
    let cfg = load_config(config_path)?;
    let levels: Vec<usize> = sweep.map_or_else(|| vec![1], <[usize]>::to_vec);
    let distinct: BTreeSet<usize> = levels.iter().copied().collect();
    if distinct.len() != levels.len() {
        return Err(CliError::Config("sweep levels must be distinct".into()));
    }
    let outcomes = run_all(&cfg, &levels)?;
    emit_report(&cfg, &levels, &outcomes, sweep.is_some())
}
