//! Executable checks of the trace-recovery argument.
//!
//! The claim under test: among candidate pairs (confusion matrices, label
//! distribution) that reproduce the observed noisy distributions exactly and
//! whose average confusion matrix is diagonally dominant, the one with the
//! smallest mean trace puts all label mass on the true class and recovers
//! the true-class columns of every annotator's matrix. The oracle here
//! renders that as an exhaustive search over a simplex grid with exact
//! integer feasibility, so no candidate is missed to rounding.
//!
//! Scope: the two-class search is unrestricted (both columns of every
//! candidate matrix range over the grid). The three-class search restricts
//! candidates to the single-ground-truth family, with off-true columns
//! pinned uniform, which is the regime the recovery argument describes;
//! it exists to exercise the case where the true diagonal is dominant in
//! its row yet smaller than the sum of the remaining row entries, where
//! plurality voting breaks but trace recovery does not. Larger class counts
//! are out of scope for the oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ConfusionField;
use crate::par;
use crate::rng::SeedRng;

/// Outcome of one exhaustive trace-recovery search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecoveryReport {
    /// Label distribution of the minimum-trace candidate.
    pub recovered_p: Vec<f64>,
    /// Whether that distribution is exactly the true-class vertex.
    pub p_is_true_vertex: bool,
    /// True-class column of each annotator's recovered matrix.
    pub recovered_k_columns: Vec<Vec<f64>>,
    /// Largest absolute deviation of those columns from the truth.
    pub max_column_error: f64,
    /// Weighted mean trace of the minimizer.
    pub min_trace: f64,
    /// Best trace among candidates whose distribution is not the true
    /// vertex; absent when no such candidate is feasible.
    pub runner_up_trace: Option<f64>,
    /// `runner_up_trace - min_trace` when both exist.
    pub trace_gap: Option<f64>,
    pub candidates_checked: usize,
}

/// Margin used when filtering on averaged quantities; far below one grid
/// step, far above accumulated rounding.
const FILTER_TOL: f64 = 1e-9;

fn validate_inputs(
    classes: usize,
    true_cms: &[Vec<f64>],
    pi: &[f64],
    k: usize,
    grid_res: usize,
) -> Result<()> {
    if !(2..=3).contains(&classes) {
        return Err(Error::arg(
            "trace-recovery oracle supports 2 or 3 classes only",
        ));
    }
    if k >= classes {
        return Err(Error::InvalidLabel {
            label: k,
            classes,
        });
    }
    if true_cms.is_empty() {
        return Err(Error::arg("need at least one annotator matrix"));
    }
    if pi.len() != true_cms.len() {
        return Err(Error::shape(
            format!("{} weights", true_cms.len()),
            format!("{}", pi.len()),
        ));
    }
    if pi.iter().any(|&p| !(p.is_finite() && p >= 0.0))
        || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::arg("annotation weights must be a distribution"));
    }
    if !(2..=200).contains(&grid_res) {
        return Err(Error::arg("grid resolution must lie in 2..=200"));
    }
    let l = classes;
    for (r, cm) in true_cms.iter().enumerate() {
        if cm.len() != l * l {
            return Err(Error::shape(
                format!("{}x{} matrix", l, l),
                format!("{} entries for annotator {r}", cm.len()),
            ));
        }
        for j in 0..l {
            let sum: f64 = (0..l).map(|i| cm[i * l + j]).sum();
            if (sum - 1.0).abs() > 1e-9 || (0..l).any(|i| cm[i * l + j] < 0.0) {
                return Err(Error::arg(format!(
                    "annotator {r} column {j} is not a distribution"
                )));
            }
        }
        // the three-class family pins off-true columns to uniform
        if l == 3 {
            for j in (0..l).filter(|&j| j != k) {
                for i in 0..l {
                    if (cm[i * l + j] - 1.0 / l as f64).abs() > 1e-9 {
                        return Err(Error::arg(format!(
                            "annotator {r} column {j} must be uniform in the three-class oracle"
                        )));
                    }
                }
            }
        }
    }
    // theorem hypothesis on the true average: strict row dominance at row k
    let avg = |i: usize, j: usize| -> f64 {
        true_cms
            .iter()
            .zip(pi)
            .map(|(cm, &w)| w * cm[i * l + j])
            .sum()
    };
    let diagonal = avg(k, k);
    for j in (0..l).filter(|&j| j != k) {
        let value = avg(k, j);
        if value >= diagonal {
            return Err(Error::DominanceViolated {
                row: k,
                col: j,
                value,
                diagonal,
            });
        }
    }
    Ok(())
}

/// Snap a probability to the integer grid, erroring when it does not lie on
/// it: exact feasibility needs on-grid truth.
fn to_grid(v: f64, g: usize, what: &str) -> Result<i64> {
    let scaled = v * g as f64;
    let snapped = scaled.round();
    if (scaled - snapped).abs() > 1e-6 {
        return Err(Error::arg(format!(
            "{what} = {v} is not representable on a 1/{g} grid"
        )));
    }
    Ok(snapped as i64)
}

/// One candidate during the two-class search: per annotator the top entries
/// of the true-class column and the other column, in grid units.
#[derive(Debug, Clone)]
struct TwoClassCandidate {
    trace: f64,
    k_tops: Vec<i64>,
}

/// Exhaustive minimum-trace search.
///
/// The observed distribution of each annotator is its true-class column
/// (the true label distribution is the vertex `e_k`). Candidates consist of
/// a label distribution on the `1/grid_res` simplex grid and per-annotator
/// column-stochastic matrices on the same grid; a candidate is admitted
/// when it reproduces every observation exactly (checked in integer
/// arithmetic), its weighted average matrix is strictly row-dominant at row
/// `k`, and the remaining diagonal entries of that average are no smaller
/// than the rest of their column. The minimizer of the weighted mean trace
/// is reported together with its distance from the truth and the trace gap
/// to the best candidate away from the true vertex. Ties resolve to the
/// earliest candidate in enumeration order.
pub fn brute_force_trace_recovery(
    classes: usize,
    true_cms: &[Vec<f64>],
    pi: &[f64],
    k: usize,
    grid_res: usize,
) -> Result<TraceRecoveryReport> {
    validate_inputs(classes, true_cms, pi, k, grid_res)?;
    match classes {
        2 => two_class_search(true_cms, pi, k, grid_res),
        3 => three_class_search(true_cms, pi, k, grid_res),
        _ => unreachable!(),
    }
}

fn two_class_search(
    true_cms: &[Vec<f64>],
    pi: &[f64],
    k: usize,
    grid_res: usize,
) -> Result<TraceRecoveryReport> {
    let g = grid_res as i64;
    let o = 1 - k; // the other class
    let r_count = true_cms.len();
    // observed top entry (row 0) of each annotator's noisy distribution
    let obs: Vec<i64> = true_cms
        .iter()
        .enumerate()
        .map(|(r, cm)| to_grid(cm[k], grid_res, &format!("annotator {r} true column")))
        .collect::<Result<_>>()?;

    // diagonal of a column given its top entry, in grid units
    let diag = |col: usize, top: i64| -> i64 { if col == 0 { top } else { g - top } };

    // per candidate distribution m = g·p̂_k, the per-annotator solution sets
    // of tops (n_k, n_o) with n_k·m + n_o·(g−m) = g·obs
    let feasible_pairs = |m: i64, q: i64| -> Vec<(i64, i64)> {
        let mut out = Vec::new();
        for nk in 0..=g {
            let rest = g * q - nk * m;
            if g - m == 0 {
                if rest == 0 {
                    for no in 0..=g {
                        out.push((nk, no));
                    }
                }
            } else if rest >= 0 && rest % (g - m) == 0 {
                let no = rest / (g - m);
                if (0..=g).contains(&no) {
                    out.push((nk, no));
                }
            }
        }
        out
    };

    struct PerM {
        best: Option<TwoClassCandidate>,
        checked: usize,
    }

    let scan: Vec<PerM> = par::map_indexed(grid_res + 1, |mi| {
        let m = mi as i64;
        let sets: Vec<Vec<(i64, i64)>> = obs.iter().map(|&q| feasible_pairs(m, q)).collect();
        let mut best: Option<TwoClassCandidate> = None;
        let mut checked = 0usize;
        if sets.iter().any(|s| s.is_empty()) {
            return PerM { best, checked };
        }
        // walk the cartesian product in lexicographic order
        let mut idx = vec![0usize; r_count];
        loop {
            checked += 1;
            // weighted averages of the four matrix entries
            let mut avg_kk = 0.0;
            let mut avg_ko = 0.0;
            let mut avg_oo = 0.0;
            let mut trace = 0.0;
            for (r, &w) in pi.iter().enumerate() {
                let (nk, no) = sets[r][idx[r]];
                let dk = diag(k, nk) as f64 / g as f64;
                let dn = diag(o, no) as f64 / g as f64;
                avg_kk += w * dk;
                avg_oo += w * dn;
                // row k entry of the other column is 1 − its diagonal
                avg_ko += w * (1.0 - dn);
                trace += w * (dk + dn);
            }
            let row_dominant = avg_kk - avg_ko > FILTER_TOL;
            let column_held = avg_oo - (1.0 - avg_oo) >= -FILTER_TOL;
            if row_dominant && column_held {
                let better = match &best {
                    Some(b) => trace < b.trace,
                    None => true,
                };
                if better {
                    best = Some(TwoClassCandidate {
                        trace,
                        k_tops: (0..r_count).map(|r| sets[r][idx[r]].0).collect(),
                    });
                }
            }
            // next index vector
            let mut level = r_count;
            loop {
                if level == 0 {
                    return PerM { best, checked };
                }
                level -= 1;
                idx[level] += 1;
                if idx[level] < sets[level].len() {
                    break;
                }
                idx[level] = 0;
            }
        }
    });

    let mut candidates_checked = 0;
    let mut best: Option<(usize, TwoClassCandidate)> = None;
    let mut runner_up: Option<f64> = None;
    for (mi, per) in scan.iter().enumerate() {
        candidates_checked += per.checked;
        if let Some(c) = &per.best {
            if mi != grid_res && runner_up.is_none_or(|t| c.trace < t) {
                runner_up = Some(c.trace);
            }
            let better = match &best {
                Some((_, b)) => c.trace < b.trace,
                None => true,
            };
            if better {
                best = Some((mi, c.clone()));
            }
        }
    }
    let (mi, winner) =
        best.ok_or_else(|| Error::arg("no feasible dominance-satisfying candidate on the grid"))?;

    let p_k = mi as f64 / g as f64;
    let mut recovered_p = vec![0.0; 2];
    recovered_p[k] = p_k;
    recovered_p[o] = 1.0 - p_k;
    let recovered_k_columns: Vec<Vec<f64>> = winner
        .k_tops
        .iter()
        .map(|&top| vec![top as f64 / g as f64, 1.0 - top as f64 / g as f64])
        .collect();
    let max_column_error = recovered_k_columns
        .iter()
        .zip(true_cms)
        .map(|(col, cm)| {
            (col[0] - cm[k]).abs().max((col[1] - cm[2 + k]).abs())
        })
        .fold(0.0, f64::max);
    let min_trace = winner.trace;
    Ok(TraceRecoveryReport {
        recovered_p,
        p_is_true_vertex: mi == grid_res,
        recovered_k_columns,
        max_column_error,
        min_trace,
        runner_up_trace: runner_up,
        trace_gap: runner_up.map(|t| t - min_trace),
        candidates_checked,
    })
}

fn three_class_search(
    true_cms: &[Vec<f64>],
    pi: &[f64],
    k: usize,
    grid_res: usize,
) -> Result<TraceRecoveryReport> {
    let l = 3usize;
    let g = grid_res as i64;
    let r_count = true_cms.len();
    let obs: Vec<[i64; 3]> = true_cms
        .iter()
        .enumerate()
        .map(|(r, cm)| {
            let mut q = [0i64; 3];
            for (i, slot) in q.iter_mut().enumerate() {
                *slot = to_grid(cm[i * l + k], grid_res, &format!("annotator {r} true column"))?;
            }
            Ok(q)
        })
        .collect::<Result<_>>()?;

    // off-true columns are pinned uniform, so a candidate is (m, per-annotator
    // true-class column); feasibility fixes that column entirely: for each
    // row i, 3·v_i·m + g·(g−m) = 3·g·q_i in grid units
    struct PerM {
        cols: Option<Vec<[i64; 3]>>,
        trace: f64,
    }
    let scan: Vec<PerM> = par::map_indexed(grid_res + 1, |mi| {
        let m = mi as i64;
        let mut cols = Vec::with_capacity(r_count);
        for q in &obs {
            let mut col = [0i64; 3];
            let mut ok = m > 0;
            if ok {
                for i in 0..3 {
                    let num = 3 * g * q[i] - g * (g - m);
                    if num >= 0 && num % (3 * m) == 0 {
                        let v = num / (3 * m);
                        if (0..=g).contains(&v) {
                            col[i] = v;
                            continue;
                        }
                    }
                    ok = false;
                    break;
                }
            }
            if !ok {
                return PerM { cols: None, trace: f64::INFINITY };
            }
            cols.push(col);
        }
        let mut trace = 0.0;
        let mut avg_kk = 0.0;
        for (col, &w) in cols.iter().zip(pi) {
            let dk = col[k] as f64 / g as f64;
            avg_kk += w * dk;
            trace += w * (dk + 2.0 / 3.0);
        }
        // off-column entries of the average are exactly 1/3, so strict row
        // dominance reduces to the diagonal exceeding 1/3
        if avg_kk - 1.0 / 3.0 > FILTER_TOL {
            PerM { cols: Some(cols), trace }
        } else {
            PerM { cols: None, trace: f64::INFINITY }
        }
    });

    let mut best: Option<(usize, f64)> = None;
    let mut runner_up: Option<f64> = None;
    let mut candidates_checked = 0;
    for (mi, per) in scan.iter().enumerate() {
        if per.cols.is_some() {
            candidates_checked += 1;
            if mi != grid_res && runner_up.is_none_or(|t| per.trace < t) {
                runner_up = Some(per.trace);
            }
            if best.is_none_or(|(_, t)| per.trace < t) {
                best = Some((mi, per.trace));
            }
        }
    }
    let (mi, min_trace) =
        best.ok_or_else(|| Error::arg("no feasible dominance-satisfying candidate on the grid"))?;
    let cols = scan[mi].cols.as_ref().unwrap();

    let mut recovered_p = vec![0.0; 3];
    recovered_p[k] = mi as f64 / g as f64;
    // remaining mass goes to the lowest non-true class, by convention; it
    // never matters for the minimizer, which sits at the vertex
    let lowest_other = (0..3).find(|&j| j != k).unwrap();
    recovered_p[lowest_other] = 1.0 - recovered_p[k];
    let recovered_k_columns: Vec<Vec<f64>> = cols
        .iter()
        .map(|col| col.iter().map(|&v| v as f64 / g as f64).collect())
        .collect();
    let max_column_error = recovered_k_columns
        .iter()
        .zip(true_cms)
        .map(|(col, cm)| {
            (0..3)
                .map(|i| (col[i] - cm[i * l + k]).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    Ok(TraceRecoveryReport {
        recovered_p,
        p_is_true_vertex: mi == grid_res,
        recovered_k_columns,
        max_column_error,
        min_trace,
        runner_up_trace: runner_up,
        trace_gap: runner_up.map(|t| t - min_trace),
        candidates_checked,
    })
}

/// Fraction of pixels whose confusion matrix is strictly diagonally
/// dominant in every row.
pub fn diag_dominance(a: &ConfusionField) -> f64 {
    let l = a.classes();
    let pixels = a.width() * a.height();
    let mut hits = 0usize;
    for p in 0..pixels {
        let m = &a.entries()[p * l * l..(p + 1) * l * l];
        let mut ok = true;
        'rows: for i in 0..l {
            for j in 0..l {
                if j != i && m[i * l + i] <= m[i * l + j] {
                    ok = false;
                    break 'rows;
                }
            }
        }
        hits += usize::from(ok);
    }
    hits as f64 / pixels as f64
}

/// Build a single-ground-truth matrix: the given true-class column, all
/// other columns uniform.
pub fn single_gt_cm(classes: usize, k: usize, column: &[f64]) -> Vec<f64> {
    let l = classes;
    let mut cm = vec![1.0 / l as f64; l * l];
    for i in 0..l {
        cm[i * l + k] = column[i];
    }
    cm
}

/// A randomly drawn recovery instance with every probability on the
/// `1/grid_res` grid and the dominance hypothesis satisfied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampledInstance {
    pub true_cms: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
    pub k: usize,
}

/// Draw single-ground-truth matrices whose true-class diagonal strictly
/// dominates its row on the grid, plus positive annotator weights.
pub fn sample_dominant_instance(
    classes: usize,
    annotators: usize,
    grid_res: usize,
    seed: &SeedRng,
) -> Result<SampledInstance> {
    use rand::Rng;
    if !(2..=3).contains(&classes) {
        return Err(Error::arg("sampling supports 2 or 3 classes"));
    }
    if annotators == 0 || grid_res < 4 {
        return Err(Error::arg("need at least one annotator and grid_res >= 4"));
    }
    let mut rng = seed.rng();
    let g = grid_res;
    let k = rng.gen_range(0..classes);
    let mut cms = Vec::with_capacity(annotators);
    for _ in 0..annotators {
        let mut column = vec![0.0; classes];
        match classes {
            2 => {
                let d = rng.gen_range(g / 2 + 1..=g);
                column[k] = d as f64 / g as f64;
                column[1 - k] = (g - d) as f64 / g as f64;
            }
            _ => {
                // diagonal must beat the uniform 1/3 of the off columns
                let d = rng.gen_range(g / 3 + 1..=g);
                let rest = g - d;
                let a = rng.gen_range(0..=rest);
                let others: Vec<usize> = (0..3).filter(|&i| i != k).collect();
                column[k] = d as f64 / g as f64;
                column[others[0]] = a as f64 / g as f64;
                column[others[1]] = (rest - a) as f64 / g as f64;
            }
        }
        cms.push(single_gt_cm(classes, k, &column));
    }
    let raw: Vec<f64> = (0..annotators).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    Ok(SampledInstance {
        true_cms: cms,
        pi: raw.iter().map(|w| w / total).collect(),
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;
    use rand::Rng;

    #[test]
    fn recovers_single_annotator_column() {
        let cm = single_gt_cm(2, 0, &[0.8, 0.2]);
        let report = brute_force_trace_recovery(2, &[cm], &[1.0], 0, 50).unwrap();
        assert!(report.p_is_true_vertex);
        assert!(report.max_column_error <= 0.02 + 1e-12);
        assert_eq!(report.recovered_k_columns[0][0], 0.8);
        assert!(report.trace_gap.unwrap() > 0.0);
    }

    #[test]
    fn identity_true_columns_are_a_fixed_point() {
        let cm = single_gt_cm(2, 1, &[0.0, 1.0]);
        let report =
            brute_force_trace_recovery(2, std::slice::from_ref(&cm), &[1.0], 1, 20).unwrap();
        assert!(report.p_is_true_vertex);
        assert_eq!(report.max_column_error, 0.0);
        // minimum trace equals the trace of the true average matrix
        let true_trace = cm[0] + cm[3];
        assert!((report.min_trace - true_trace).abs() < 1e-12);
    }

    #[test]
    fn dominance_violation_is_rejected() {
        let cm = single_gt_cm(2, 0, &[0.5, 0.5]);
        match brute_force_trace_recovery(2, &[cm], &[1.0], 0, 20) {
            Err(Error::DominanceViolated { row: 0, col: 1, .. }) => {}
            other => panic!("expected dominance error, got {other:?}"),
        }
    }

    #[test]
    fn recovers_multiple_annotators() {
        let cms = vec![
            single_gt_cm(2, 1, &[0.2, 0.8]),
            single_gt_cm(2, 1, &[0.4, 0.6]),
            single_gt_cm(2, 1, &[0.1, 0.9]),
        ];
        let pi = vec![1.0 / 3.0; 3];
        let report = brute_force_trace_recovery(2, &cms, &pi, 1, 20).unwrap();
        assert!(report.p_is_true_vertex);
        assert_eq!(report.max_column_error, 0.0);
        assert!(report.trace_gap.unwrap() > 0.0);
        for (col, cm) in report.recovered_k_columns.iter().zip(&cms) {
            assert_eq!(col[1], cm[3]);
        }
    }

    #[test]
    fn random_dominant_instances_recover() {
        // the computational content of the recovery claim: across random
        // dominant instances the grid minimizer lands on the true vertex
        // with the true columns
        let g = 50usize;
        let seed = SeedRng::new(99);
        for case in 0..20 {
            let mut rng = seed.child(case).rng();
            let r_count = rng.gen_range(1..=3usize);
            let k = rng.gen_range(0..2usize);
            let cms: Vec<Vec<f64>> = (0..r_count)
                .map(|_| {
                    // diagonal strictly above 1/2 keeps every average dominant
                    let diag_units = rng.gen_range(g / 2 + 1..=g);
                    let mut col = vec![0.0; 2];
                    col[k] = diag_units as f64 / g as f64;
                    col[1 - k] = 1.0 - col[k];
                    single_gt_cm(2, k, &col)
                })
                .collect();
            let pi = vec![1.0 / r_count as f64; r_count];
            let report = brute_force_trace_recovery(2, &cms, &pi, k, g).unwrap();
            assert!(report.p_is_true_vertex, "case {case} missed the vertex");
            assert!(
                report.max_column_error <= 2.0 / g as f64 + 1e-12,
                "case {case} column error {}",
                report.max_column_error
            );
        }
    }

    #[test]
    fn sampled_instances_sit_on_the_grid_and_dominate() {
        let g = 50usize;
        for classes in 2..=3usize {
            for case in 0..10u64 {
                let seed = SeedRng::new(1000 + case).child(classes as u64);
                let inst = sample_dominant_instance(classes, 3, g, &seed).unwrap();
                assert!(inst.k < classes);
                assert_eq!(inst.true_cms.len(), 3);
                assert!((inst.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(inst.pi.iter().all(|&w| w > 0.0));
                for cm in &inst.true_cms {
                    for j in 0..classes {
                        let col: f64 = (0..classes).map(|i| cm[i * classes + j]).sum();
                        assert!((col - 1.0).abs() < 1e-12);
                    }
                    for i in 0..classes {
                        let units = cm[i * classes + inst.k] * g as f64;
                        assert!((units - units.round()).abs() < 1e-9, "off grid: {units}");
                    }
                    // row dominance at the true class, per matrix
                    let diag = cm[inst.k * classes + inst.k];
                    for j in 0..classes {
                        if j != inst.k {
                            assert!(diag > cm[inst.k * classes + j]);
                        }
                    }
                }
                let again = sample_dominant_instance(classes, 3, g, &seed).unwrap();
                assert_eq!(again.true_cms, inst.true_cms);
                assert_eq!(again.pi, inst.pi);
            }
        }
        assert!(sample_dominant_instance(4, 1, 50, &SeedRng::new(0)).is_err());
        assert!(sample_dominant_instance(2, 0, 50, &SeedRng::new(0)).is_err());
    }

    #[test]
    fn weak_diagonal_beats_plurality_vote() {
        // true column (0.40, 0.55, 0.05): the diagonal dominates its row
        // (off-column entries are 1/3) yet is smaller than the rest of its
        // column summed, so the most frequent observed label is wrong
        let column = [0.40, 0.55, 0.05];
        let cm = single_gt_cm(3, 0, &column);
        let report = brute_force_trace_recovery(3, &[cm], &[1.0], 0, 20).unwrap();
        assert!(report.p_is_true_vertex);
        assert_eq!(report.max_column_error, 0.0);
        assert!(report.trace_gap.is_none_or(|gap| gap > 0.0));

        // plurality over sampled annotations picks class 1, not the truth
        let mut rng = SeedRng::new(7).rng();
        let mut wrong = 0;
        let trials = 200;
        for _ in 0..trials {
            let mut votes = [0usize; 3];
            for _ in 0..15 {
                let u: f64 = rng.gen();
                let label = if u < column[0] {
                    0
                } else if u < column[0] + column[1] {
                    1
                } else {
                    2
                };
                votes[label] += 1;
            }
            let winner = (0..3).max_by_key(|&i| votes[i]).unwrap();
            if winner != 0 {
                wrong += 1;
            }
        }
        assert!(
            wrong > trials / 2,
            "plurality was wrong only {wrong}/{trials} times"
        );
    }

    #[test]
    fn off_grid_truth_is_rejected() {
        let cm = single_gt_cm(2, 0, &[0.805, 0.195]);
        assert!(brute_force_trace_recovery(2, &[cm], &[1.0], 0, 50).is_err());
    }

    #[test]
    fn three_class_requires_uniform_off_columns() {
        let mut cm = single_gt_cm(3, 0, &[0.6, 0.3, 0.1]);
        let at = |row: usize, col: usize| row * 3 + col;
        cm[at(1, 1)] = 0.5;
        cm[at(0, 1)] = 0.25;
        cm[at(2, 1)] = 0.25;
        assert!(brute_force_trace_recovery(3, &[cm], &[1.0], 0, 20).is_err());
    }

    #[test]
    fn dominance_fraction_on_reference_fields() {
        assert_eq!(diag_dominance(&ConfusionField::identity(4, 4, 3)), 1.0);
        assert_eq!(diag_dominance(&ConfusionField::uniform(4, 4, 3)), 0.0);
    }

    #[test]
    fn dominance_fraction_counts_pixels() {
        let mut entries = Vec::new();
        entries.extend_from_slice(&[1.0, 0.0, 0.0, 1.0]); // dominant
        entries.extend_from_slice(&[0.5, 0.5, 0.5, 0.5]); // not
        let f = ConfusionField::new(2, 1, 2, entries).unwrap();
        assert_eq!(diag_dominance(&f), 0.5);
    }
}
