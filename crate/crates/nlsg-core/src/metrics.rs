//! Evaluation metrics: Dice overlap, confusion-matrix RMSE, generalized
//! energy distance and inter-annotator consensus.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ConfusionField, LabelMap};

/// Dice coefficient of one class between two label maps.
///
/// Convention: two empty masks count as perfect agreement (1.0). That keeps
/// blank-annotator comparisons well defined in distance computations.
pub fn dice(pred: &LabelMap, gt: &LabelMap, class: usize) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::shape(
            format!("{}x{}x{}", gt.width(), gt.height(), gt.classes()),
            format!("{}x{}x{}", pred.width(), pred.height(), pred.classes()),
        ));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        let pa = usize::from(a) == class;
        let pb = usize::from(b) == class;
        inter += usize::from(pa && pb);
        total += usize::from(pa) + usize::from(pb);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mean Dice over all foreground classes.
pub fn dice_foreground_mean(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    let l = gt.classes();
    let mut sum = 0.0;
    for class in 1..l {
        sum += dice(pred, gt, class)?;
    }
    Ok(sum / (l - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmErrorMode {
    /// RMSE over the true-class column only, the convention-robust number.
    TrueColumn,
    /// RMSE over all L² entries against the uniform-off-column reference.
    Full,
}

/// Root-mean-square error between an estimated and a reference confusion
/// field. `TrueColumn` restricts the average to the column selected by the
/// ground-truth class at each pixel.
pub fn cm_rmse(
    est: &ConfusionField,
    reference: &ConfusionField,
    gt: &LabelMap,
    mode: CmErrorMode,
) -> Result<f64> {
    if !est.same_shape(reference)
        || est.width() != gt.width()
        || est.height() != gt.height()
        || est.classes() != gt.classes()
    {
        return Err(Error::shape(
            format!("{}x{}x{}", est.width(), est.height(), est.classes()),
            "mismatched confusion fields or label map".to_string(),
        ));
    }
    let l = est.classes();
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for y in 0..est.height() {
        for x in 0..est.width() {
            match mode {
                CmErrorMode::TrueColumn => {
                    let j = gt.get(x, y);
                    for i in 0..l {
                        let d = est.get(x, y, i, j) - reference.get(x, y, i, j);
                        sum_sq += d * d;
                    }
                    count += l;
                }
                CmErrorMode::Full => {
                    for i in 0..l {
                        for j in 0..l {
                            let d = est.get(x, y, i, j) - reference.get(x, y, i, j);
                            sum_sq += d * d;
                        }
                    }
                    count += l * l;
                }
            }
        }
    }
    Ok((sum_sq / count as f64).sqrt())
}

/// Distance between two label maps used inside [`ged`]: one minus the Dice
/// of the foreground-union masks (all non-background classes pooled).
fn foreground_distance(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape("matching label maps", "mismatch"));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let fa = x != 0;
        let fb = y != 0;
        inter += usize::from(fa && fb);
        total += usize::from(fa) + usize::from(fb);
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * inter as f64 / total as f64)
}

/// Generalized energy distance between two sets of segmentations:
/// `D² = 2·E[d(a,b)] − E[d(a,a')] − E[d(b,b')]` with expectations taken as
/// uniform means over all ordered pairs. Returns `sqrt(max(D², 0))`.
pub fn ged(set_a: &[LabelMap], set_b: &[LabelMap]) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::arg("generalized energy distance needs nonempty sets"));
    }
    let mean_pairs = |xs: &[LabelMap], ys: &[LabelMap]| -> Result<f64> {
        let mut sum = 0.0;
        for a in xs {
            for b in ys {
                sum += foreground_distance(a, b)?;
            }
        }
        Ok(sum / (xs.len() * ys.len()) as f64)
    };
    let cross = mean_pairs(set_a, set_b)?;
    let within_a = mean_pairs(set_a, set_a)?;
    let within_b = mean_pairs(set_b, set_b)?;
    let d2 = 2.0 * cross - within_a - within_b;
    Ok(d2.max(0.0).sqrt())
}

/// Foreground IoU across all annotators: intersection of every foreground
/// mask over their union. An empty union (everyone agrees on background)
/// counts as full consensus.
pub fn consensus_iou(labels: &[LabelMap]) -> Result<f64> {
    if labels.len() < 2 {
        return Err(Error::arg("consensus needs at least two annotators"));
    }
    let first = &labels[0];
    for m in labels {
        if !m.same_shape(first) {
            return Err(Error::shape("matching label maps", "mismatch"));
        }
    }
    let n = first.width() * first.height();
    let mut inter = 0usize;
    let mut union = 0usize;
    for p in 0..n {
        let mut all = true;
        let mut any = false;
        for m in labels {
            let fg = m.labels()[p] != 0;
            all &= fg;
            any |= fg;
        }
        inter += usize::from(all);
        union += usize::from(any);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subgroup {
    Low,
    Mid,
    High,
}

/// Mean Dice per consensus bin. Bins are half-open: Low is
/// `[0, bounds.0)`, Mid is `[bounds.0, bounds.1)`, High is `[bounds.1, ∞)`.
/// Empty bins are absent from the result rather than reported as zero.
pub fn subgroup_report(
    per_image_consensus: &[f64],
    per_image_dice: &[f64],
    bounds: (f64, f64),
) -> Result<BTreeMap<Subgroup, f64>> {
    if per_image_consensus.len() != per_image_dice.len() {
        return Err(Error::shape(
            format!("{} consensus values", per_image_consensus.len()),
            format!("{} dice values", per_image_dice.len()),
        ));
    }
    // partial_cmp keeps NaN bounds on the error path
    if bounds.0.partial_cmp(&bounds.1) != Some(std::cmp::Ordering::Less) {
        return Err(Error::arg("subgroup bounds must be increasing"));
    }
    let mut sums: BTreeMap<Subgroup, (f64, usize)> = BTreeMap::new();
    for (&c, &d) in per_image_consensus.iter().zip(per_image_dice) {
        let group = if c < bounds.0 {
            Subgroup::Low
        } else if c < bounds.1 {
            Subgroup::Mid
        } else {
            Subgroup::High
        };
        let e = sums.entry(group).or_insert((0.0, 0));
        e.0 += d;
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(g, (s, n))| (g, s / n as f64))
        .collect())
}

/// Default consensus bin edges.
pub const SUBGROUP_BOUNDS: (f64, f64) = (0.65, 0.75);

/// Everything one evaluation produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice_per_class: Vec<f64>,
    pub dice_mean: f64,
    pub cm_rmse_true_column: f64,
    pub cm_rmse_full_convention: f64,
    pub ged: f64,
    pub consensus_iou_per_image: Vec<f64>,
    pub subgroup_dice: BTreeMap<Subgroup, f64>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.dice_per_class.iter().all(|&v| unit(v)) || !unit(self.dice_mean) {
            return Err(Error::arg("dice out of [0, 1]"));
        }
        if self.ged < 0.0 || !self.ged.is_finite() {
            return Err(Error::arg("generalized energy distance must be nonnegative"));
        }
        Ok(())
    }
}
