//! Classical label-fusion baselines.
//!
//! Mean and majority-vote fusion treat annotators as interchangeable. The
//! STAPLE family instead estimates one confusion matrix per annotator by
//! expectation maximisation and weighs votes accordingly; the spatial
//! variant runs EM inside overlapping square windows and averages the
//! per-window matrices into a per-pixel confusion field.

use crate::error::{Error, Result};
use crate::grid::{ConfusionField, LabelMap, ProbabilityMap};
use crate::par;

/// Smoothing mass added to every M-step count so no confusion entry or
/// likelihood factor collapses to zero.
const EM_EPS: f64 = 1e-8;

/// Output of one STAPLE EM run.
#[derive(Debug, Clone)]
pub struct StapleResult {
    pub posterior: ProbabilityMap,
    /// One global L×L column-stochastic matrix per annotator, row-major.
    pub annotator_cms: Vec<Vec<f64>>,
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
}

impl StapleResult {
    pub fn cm(&self, r: usize, i: usize, j: usize) -> f64 {
        let l = self.posterior.classes();
        self.annotator_cms[r][i * l + j]
    }
}

fn check_stack(labels: &[LabelMap]) -> Result<(usize, usize, usize)> {
    let first = labels.first().ok_or_else(|| Error::arg("no label maps"))?;
    for m in labels {
        if !m.same_shape(first) {
            return Err(Error::shape(
                format!("{}x{}x{}", first.width(), first.height(), first.classes()),
                format!("{}x{}x{}", m.width(), m.height(), m.classes()),
            ));
        }
    }
    Ok((first.width(), first.height(), first.classes()))
}

/// Per-pixel class frequency across annotators.
pub fn mean_fusion(labels: &[LabelMap]) -> Result<ProbabilityMap> {
    let (w, h, l) = check_stack(labels)?;
    let n = w * h;
    let mut probs = vec![0.0; n * l];
    for m in labels {
        for (p, &lab) in m.labels().iter().enumerate() {
            probs[p * l + usize::from(lab)] += 1.0;
        }
    }
    let inv = 1.0 / labels.len() as f64;
    probs.iter_mut().for_each(|v| *v *= inv);
    Ok(ProbabilityMap::new_unchecked(w, h, l, probs))
}

/// Per-pixel mode; ties resolve to the lowest class index.
pub fn majority_vote(labels: &[LabelMap]) -> Result<LabelMap> {
    let (w, h, l) = check_stack(labels)?;
    let mut out = LabelMap::zeros(w, h, l);
    let mut counts = vec![0usize; l];
    for p in 0..w * h {
        counts.iter_mut().for_each(|c| *c = 0);
        for m in labels {
            counts[usize::from(m.labels()[p])] += 1;
        }
        let mut best = 0;
        for (c, &cnt) in counts.iter().enumerate() {
            if cnt > counts[best] {
                best = c;
            }
        }
        out.set(p % w, p / w, best);
    }
    Ok(out)
}

/// Class frequency of the mean fusion; the fixed EM prior.
fn class_prior(labels: &[LabelMap]) -> Result<Vec<f64>> {
    let (w, h, l) = check_stack(labels)?;
    let mean = mean_fusion(labels)?;
    let mut prior = vec![0.0; l];
    for p in 0..w * h {
        for (j, v) in prior.iter_mut().enumerate() {
            *v += mean.probs()[p * l + j];
        }
    }
    let inv = 1.0 / (w * h) as f64;
    prior.iter_mut().for_each(|v| *v *= inv);
    Ok(prior)
}

/// Identity with a 0.99/0.01 mass split; the EM starting point.
fn init_cm(l: usize) -> Vec<f64> {
    let off = if l > 1 { 0.01 / (l - 1) as f64 } else { 0.0 };
    let mut cm = vec![off; l * l];
    for i in 0..l {
        cm[i * l + i] = if l > 1 { 0.99 } else { 1.0 };
    }
    cm
}

/// Where a posterior computation reads its confusion matrices from.
enum CmSource<'a> {
    /// One global matrix per annotator.
    Global(&'a [Vec<f64>]),
    /// One per-pixel field per annotator.
    Field(&'a [ConfusionField]),
}

impl CmSource<'_> {
    #[inline]
    fn entry(&self, r: usize, pixel: usize, i: usize, j: usize, l: usize) -> f64 {
        match self {
            CmSource::Global(cms) => cms[r][i * l + j],
            CmSource::Field(fields) => fields[r].entries()[(pixel * l + i) * l + j],
        }
    }
}

/// Shared E-step: per-pixel posterior over true classes plus the total data
/// log-likelihood under the given prior and confusion matrices. Both the
/// global and the spatial variant go through this exact code path.
fn posterior_from(
    labels: &[LabelMap],
    prior: &[f64],
    src: &CmSource<'_>,
) -> (ProbabilityMap, f64) {
    let (w, h, l) = (labels[0].width(), labels[0].height(), labels[0].classes());
    let n = w * h;
    let mut probs = vec![0.0; n * l];
    let mut ll = 0.0;
    for p in 0..n {
        let row = &mut probs[p * l..(p + 1) * l];
        let mut sum = 0.0;
        for j in 0..l {
            let mut wj = prior[j];
            for (r, m) in labels.iter().enumerate() {
                let obs = usize::from(m.labels()[p]);
                wj *= src.entry(r, p, obs, j, l);
            }
            row[j] = wj;
            sum += wj;
        }
        ll += sum.ln();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        } else {
            row.iter_mut().for_each(|v| *v = 1.0 / l as f64);
        }
    }
    (ProbabilityMap::new_unchecked(w, h, l, probs), ll)
}

/// M-step: column-normalized soft counts, smoothed by [`EM_EPS`].
fn m_step(labels: &[LabelMap], posterior: &ProbabilityMap) -> Vec<Vec<f64>> {
    let l = posterior.classes();
    let n = posterior.width() * posterior.height();
    let mut denom = vec![0.0; l];
    for p in 0..n {
        for (j, v) in denom.iter_mut().enumerate() {
            *v += posterior.probs()[p * l + j];
        }
    }
    labels
        .iter()
        .map(|m| {
            let mut counts = vec![0.0; l * l];
            for p in 0..n {
                let i = usize::from(m.labels()[p]);
                for j in 0..l {
                    counts[i * l + j] += posterior.probs()[p * l + j];
                }
            }
            let mut cm = vec![0.0; l * l];
            for j in 0..l {
                let d = denom[j] + l as f64 * EM_EPS;
                for i in 0..l {
                    cm[i * l + j] = (counts[i * l + j] + EM_EPS) / d;
                }
            }
            cm
        })
        .collect()
}

/// STAPLE with one global confusion matrix per annotator.
///
/// The prior stays fixed at the mean-fusion class frequency; iteration stops
/// when the largest confusion-matrix change drops below `tol` or after
/// `max_iters` rounds. The log-likelihood trace covers every E-step,
/// including a final one under the converged matrices.
pub fn staple(labels: &[LabelMap], max_iters: usize, tol: f64) -> Result<StapleResult> {
    check_stack(labels)?;
    let prior = class_prior(labels)?;
    let mut cms: Vec<Vec<f64>> = (0..labels.len()).map(|_| init_cm(prior.len())).collect();
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        let (posterior, ll) = posterior_from(labels, &prior, &CmSource::Global(&cms));
        trace.push(ll);
        let next = m_step(labels, &posterior);
        let delta = cms
            .iter()
            .flatten()
            .zip(next.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        cms = next;
        iterations += 1;
        if delta < tol {
            break;
        }
    }
    let (posterior, ll) = posterior_from(labels, &prior, &CmSource::Global(&cms));
    trace.push(ll);
    debug_assert!(trace.windows(2).all(|w| w[1] >= w[0] - 1e-8));
    Ok(StapleResult {
        posterior,
        annotator_cms: cms,
        log_likelihood_trace: trace,
        iterations,
    })
}

fn crop(m: &LabelMap, x0: usize, y0: usize, size: usize) -> LabelMap {
    let mut out = LabelMap::zeros(size, size, m.classes());
    for y in 0..size {
        for x in 0..size {
            out.set(x, y, m.get(x0 + x, y0 + y));
        }
    }
    out
}

/// Window origins along one axis: stride multiples, plus a final origin
/// flush with the far edge so every pixel is covered.
fn axis_origins(size: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut x = 0;
    while x + window <= size {
        out.push(x);
        x += stride;
    }
    if *out.last().unwrap() + window < size {
        out.push(size - window);
    }
    out
}

/// STAPLE with spatially varying confusion matrices.
///
/// EM runs independently inside each overlapping `window`×`window` tile;
/// each pixel's matrix is the renormalized average over all covering tiles,
/// and the posterior is recomputed per pixel from the local matrices. A
/// window larger than the image degrades to plain [`staple`] broadcast to a
/// constant field.
pub fn spatial_staple(
    labels: &[LabelMap],
    window: usize,
    stride: usize,
    max_iters: usize,
    tol: f64,
) -> Result<(ProbabilityMap, Vec<ConfusionField>)> {
    let (w, h, l) = check_stack(labels)?;
    if window < 4 {
        return Err(Error::arg("window must be at least 4 pixels"));
    }
    if stride == 0 || stride > window {
        return Err(Error::arg("stride must lie in 1..=window"));
    }
    let prior = class_prior(labels)?;
    if window > w || window > h {
        let global = staple(labels, max_iters, tol)?;
        let fields: Vec<ConfusionField> = global
            .annotator_cms
            .iter()
            .map(|cm| {
                let mut entries = Vec::with_capacity(w * h * l * l);
                for _ in 0..w * h {
                    entries.extend_from_slice(cm);
                }
                ConfusionField::new_unchecked(w, h, l, entries)
            })
            .collect();
        let (posterior, _) = posterior_from(labels, &prior, &CmSource::Field(&fields));
        return Ok((posterior, fields));
    }

    let xs = axis_origins(w, window, stride);
    let ys = axis_origins(h, window, stride);
    let origins: Vec<(usize, usize)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect();
    let runs: Vec<Result<Vec<Vec<f64>>>> = par::map_indexed(origins.len(), |k| {
        let (x0, y0) = origins[k];
        let cropped: Vec<LabelMap> = labels.iter().map(|m| crop(m, x0, y0, window)).collect();
        Ok(staple(&cropped, max_iters, tol)?.annotator_cms)
    });

    let r_count = labels.len();
    let mut sums = vec![vec![0.0; w * h * l * l]; r_count];
    let mut cover = vec![0usize; w * h];
    for (k, run) in runs.into_iter().enumerate() {
        let cms = run?;
        let (x0, y0) = origins[k];
        for y in y0..y0 + window {
            for x in x0..x0 + window {
                let p = y * w + x;
                for (r, cm) in cms.iter().enumerate() {
                    let base = p * l * l;
                    for e in 0..l * l {
                        sums[r][base + e] += cm[e];
                    }
                }
            }
        }
        for y in y0..y0 + window {
            for x in x0..x0 + window {
                cover[y * w + x] += 1;
            }
        }
    }

    let fields: Vec<ConfusionField> = sums
        .into_iter()
        .map(|mut entries| {
            for p in 0..w * h {
                let c = cover[p] as f64;
                let m = &mut entries[p * l * l..(p + 1) * l * l];
                if cover[p] > 1 {
                    m.iter_mut().for_each(|v| *v /= c);
                    // wash out rounding from the average
                    for j in 0..l {
                        let s: f64 = (0..l).map(|i| m[i * l + j]).sum();
                        for i in 0..l {
                            m[i * l + j] /= s;
                        }
                    }
                }
            }
            ConfusionField::new_unchecked(w, h, l, entries)
        })
        .collect();
    let (posterior, _) = posterior_from(labels, &prior, &CmSource::Field(&fields));
    Ok((posterior, fields))
}
