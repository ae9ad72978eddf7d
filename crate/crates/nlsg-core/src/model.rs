//! The coupled segmentation and annotator-confusion model.
//!
//! A small stride-1 convolutional trunk feeds two 1x1 heads. The
//! segmentation head produces per-pixel class logits; the annotator head
//! produces, for every annotator, either the raw entries of a per-pixel L×L
//! confusion matrix (`Full`) or two rank factors of it (`LowRank`). Raw
//! entries pass through an exponential and column normalization, so every
//! matrix is column-stochastic by construction, and each annotator's
//! predicted noisy distribution is that matrix applied to the segmentation
//! probabilities. The training loss is the availability-masked sum of
//! per-annotator cross-entropies plus a trace penalty on the matrices.
//!
//! Gradients are exact reverse-mode derivatives of this fixed graph, written
//! out by hand and validated against central finite differences.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::tensor_io::{self, RawTensor};
use crate::grid::{
    softmax_in_place, ConfusionField, ImageTensor, LabelMap, ProbabilityMap, MAX_CLASSES,
};
use crate::rng::SeedRng;

/// Pre-normalization diagonal mass of a freshly initialized confusion
/// matrix. Off-diagonal raw entries start at 1, so this keeps the
/// normalized matrix within 1e-3 of identity while staying as close to
/// the softmax's responsive range as that bound allows.
pub fn identity_diag_mass(classes: usize) -> f64 {
    2000.0 * (classes as f64 - 1.0)
}

/// Probabilities below this floor are clamped inside the cross-entropy;
/// the matching gradient is zero there, so loss and gradient stay
/// consistent.
const CE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmMode {
    Full,
    LowRank(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub in_channels: usize,
    pub trunk_layers: usize,
    pub trunk_channels: usize,
    pub classes: usize,
    pub annotators: usize,
    pub cm_mode: CmMode,
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.trunk_layers == 0 || self.trunk_channels == 0 {
            return Err(Error::arg("trunk dimensions must be at least 1"));
        }
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            return Err(Error::arg(format!(
                "classes must lie in 2..={MAX_CLASSES}"
            )));
        }
        if self.annotators == 0 {
            return Err(Error::arg("need at least one annotator"));
        }
        if let CmMode::LowRank(l) = self.cm_mode {
            if l == 0 || l >= self.classes {
                return Err(Error::arg("low-rank factor must satisfy 1 <= l < L"));
            }
        }
        Ok(())
    }

    /// Output channels of the annotator head.
    pub fn ann_channels(&self) -> usize {
        let l = self.classes;
        match self.cm_mode {
            CmMode::Full => self.annotators * l * l,
            CmMode::LowRank(rank) => self.annotators * 2 * l * rank,
        }
    }
}

/// Named, contiguous segments of the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    segments: Vec<(String, Range<usize>)>,
}

impl Layout {
    pub fn of(arch: &ModelArch) -> Layout {
        let c = arch.trunk_channels;
        let l = arch.classes;
        let mut segments = Vec::new();
        let mut cursor = 0usize;
        let mut push = |name: String, len: usize, cursor: &mut usize| {
            segments.push((name, *cursor..*cursor + len));
            *cursor += len;
        };
        for t in 0..arch.trunk_layers {
            let cin = if t == 0 { arch.in_channels } else { c };
            push(format!("trunk.{t}.weight"), c * cin * 9, &mut cursor);
            push(format!("trunk.{t}.bias"), c, &mut cursor);
        }
        push("seg.weight".into(), l * c, &mut cursor);
        push("seg.bias".into(), l, &mut cursor);
        let k = arch.ann_channels();
        push("ann.weight".into(), k * c, &mut cursor);
        push("ann.bias".into(), k, &mut cursor);
        if matches!(arch.cm_mode, CmMode::LowRank(_)) {
            push("ann.diag".into(), arch.annotators * l, &mut cursor);
        }
        Layout { segments }
    }

    pub fn total(&self) -> usize {
        self.segments.last().map_or(0, |(_, r)| r.end)
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.segments
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
    }

    pub fn name_at(&self, index: usize) -> &str {
        self.segments
            .iter()
            .find(|(_, r)| r.contains(&index))
            .map(|(n, _)| n.as_str())
            .unwrap_or("<out of range>")
    }

    pub fn segments(&self) -> &[(String, Range<usize>)] {
        &self.segments
    }
}

/// All weights of one model as a flat vector, addressed through [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ModelArch,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn layout(&self) -> Layout {
        Layout::of(&self.arch)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slice(&self, layout: &Layout, name: &str) -> &[f64] {
        &self.values[layout.range(name).expect("unknown parameter segment")]
    }

    pub fn slice_mut(&mut self, layout: &Layout, name: &str) -> &mut [f64] {
        let r = layout.range(name).expect("unknown parameter segment");
        &mut self.values[r]
    }

    /// Write arch descriptor and weights next to each other in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let desc = CheckpointDescriptor {
            version: CHECKPOINT_VERSION,
            arch: self.arch,
        };
        fs::write(
            dir.join("arch.json"),
            serde_json::to_string_pretty(&desc)?,
        )?;
        let t = RawTensor::f64(vec![self.values.len()], self.values.clone())?;
        tensor_io::write_tensor(&dir.join("params.nlsg"), &t)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ModelParams> {
        let desc: CheckpointDescriptor =
            serde_json::from_str(&fs::read_to_string(dir.join("arch.json"))?)?;
        if desc.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                desc.version
            )));
        }
        desc.arch.validate()?;
        let t = tensor_io::read_tensor(&dir.join("params.nlsg"))?;
        t.expect_rank(1)?;
        let values = t.as_f64()?.to_vec();
        if values.len() != Layout::of(&desc.arch).total() {
            return Err(Error::Format(
                "checkpoint weight count disagrees with arch descriptor".into(),
            ));
        }
        Ok(ModelParams {
            arch: desc.arch,
            values,
        })
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDescriptor {
    version: u32,
    arch: ModelArch,
}

/// Fresh parameters: scaled-uniform fan-in init for trunk and segmentation
/// head, near-zero annotator head with biases arranged so every confusion
/// matrix starts within 1e-3 of identity.
pub fn init_params(arch: &ModelArch, seed: &SeedRng) -> Result<ModelParams> {
    arch.validate()?;
    let layout = Layout::of(arch);
    let mut values = vec![0.0; layout.total()];
    let mut rng = seed.rng();
    let c = arch.trunk_channels;
    for t in 0..arch.trunk_layers {
        let cin = if t == 0 { arch.in_channels } else { c };
        let bound = 1.0 / ((cin * 9) as f64).sqrt();
        let r = layout.range(&format!("trunk.{t}.weight")).unwrap();
        for v in &mut values[r] {
            *v = rng.gen_range(-bound..bound);
        }
    }
    let bound = 1.0 / (c as f64).sqrt();
    for v in &mut values[layout.range("seg.weight").unwrap()] {
        *v = rng.gen_range(-bound..bound);
    }
    // tiny weights keep initial matrices near identity on real inputs too
    let bound = 0.01 / (c as f64).sqrt();
    for v in &mut values[layout.range("ann.weight").unwrap()] {
        *v = rng.gen_range(-bound..bound);
    }
    let l = arch.classes;
    match arch.cm_mode {
        CmMode::Full => {
            let r = layout.range("ann.bias").unwrap();
            let bias = &mut values[r];
            for a in 0..arch.annotators {
                for i in 0..l {
                    bias[a * l * l + i * l + i] = identity_diag_mass(l).ln();
                }
            }
        }
        CmMode::LowRank(_) => {
            let r = layout.range("ann.diag").unwrap();
            for v in &mut values[r] {
                *v = (identity_diag_mass(l) - 1.0).ln();
            }
        }
    }
    Ok(ModelParams {
        arch: *arch,
        values,
    })
}

/// Forward products the loss and gradients are expressed in.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Segmentation logits, pixel-major, `classes` per pixel.
    pub seg_logits: Vec<f64>,
    pub seg_probs: ProbabilityMap,
    pub cms: Vec<ConfusionField>,
    pub ann_probs: Vec<ProbabilityMap>,
}

/// Low-rank cache per annotator: the shifted exponentials and column sums
/// the backward pass reuses.
struct LowRankCache {
    /// exp(M_ij − c_j), pixel-major L×L.
    e: Vec<f64>,
    /// exp(β_j − c_j), pixel-major L.
    d: Vec<f64>,
    /// column sums, pixel-major L.
    s: Vec<f64>,
}

struct Cache {
    /// Post-activation features per trunk layer.
    post: Vec<Vec<f64>>,
    /// Pre-activation values per trunk layer (for the rectifier mask).
    pre: Vec<Vec<f64>>,
    ann_z: Vec<f64>,
    lowrank: Option<Vec<LowRankCache>>,
}

fn conv3x3(
    input: &[f64],
    width: usize,
    height: usize,
    cin: usize,
    weights: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; width * height * cout];
    for y in 0..height {
        for x in 0..width {
            let ob = (y * width + x) * cout;
            for k in 0..cout {
                let mut acc = bias[k];
                for dy in -1isize..=1 {
                    let ny = y as isize + dy;
                    if ny < 0 || ny >= height as isize {
                        continue;
                    }
                    for dx in -1isize..=1 {
                        let nx = x as isize + dx;
                        if nx < 0 || nx >= width as isize {
                            continue;
                        }
                        let ib = (ny as usize * width + nx as usize) * cin;
                        let wb = (k * cin) * 9 + ((dy + 1) * 3 + dx + 1) as usize;
                        for c in 0..cin {
                            acc += weights[wb + c * 9] * input[ib + c];
                        }
                    }
                }
                out[ob + k] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    width: usize,
    height: usize,
    cin: usize,
    weights: &[f64],
    cout: usize,
    dout: &[f64],
    dinput: &mut [f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
) {
    for y in 0..height {
        for x in 0..width {
            let ob = (y * width + x) * cout;
            for k in 0..cout {
                let g = dout[ob + k];
                if g == 0.0 {
                    continue;
                }
                dbias[k] += g;
                for dy in -1isize..=1 {
                    let ny = y as isize + dy;
                    if ny < 0 || ny >= height as isize {
                        continue;
                    }
                    for dx in -1isize..=1 {
                        let nx = x as isize + dx;
                        if nx < 0 || nx >= width as isize {
                            continue;
                        }
                        let ib = (ny as usize * width + nx as usize) * cin;
                        let wb = (k * cin) * 9 + ((dy + 1) * 3 + dx + 1) as usize;
                        for c in 0..cin {
                            dweights[wb + c * 9] += g * input[ib + c];
                            dinput[ib + c] += g * weights[wb + c * 9];
                        }
                    }
                }
            }
        }
    }
}

fn head1x1(
    input: &[f64],
    pixels: usize,
    cin: usize,
    weights: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; pixels * cout];
    for p in 0..pixels {
        let ib = p * cin;
        let ob = p * cout;
        for k in 0..cout {
            let mut acc = bias[k];
            let wb = k * cin;
            for c in 0..cin {
                acc += weights[wb + c] * input[ib + c];
            }
            out[ob + k] = acc;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn head1x1_backward(
    input: &[f64],
    pixels: usize,
    cin: usize,
    weights: &[f64],
    cout: usize,
    dout: &[f64],
    dinput: &mut [f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
) {
    for p in 0..pixels {
        let ib = p * cin;
        let ob = p * cout;
        for k in 0..cout {
            let g = dout[ob + k];
            if g == 0.0 {
                continue;
            }
            dbias[k] += g;
            let wb = k * cin;
            for c in 0..cin {
                dweights[wb + c] += g * input[ib + c];
                dinput[ib + c] += g * weights[wb + c];
            }
        }
    }
}

/// Expand low-rank factors into a column-stochastic confusion field.
///
/// `b1` and `b2` are pixel-major `L×rank` factors; the raw matrix is
/// `exp(B1·B2ᵀ)` plus `exp(diag_log[i])` on the diagonal, column-normalized.
/// `diag_log` holds one log-space bias per class, shared across pixels; it
/// exists so an identity-dominant start is representable at any rank.
pub fn low_rank_expand(
    width: usize,
    height: usize,
    classes: usize,
    rank: usize,
    b1: &[f64],
    b2: &[f64],
    diag_log: &[f64],
) -> Result<ConfusionField> {
    let (field, _) = low_rank_expand_cached(width, height, classes, rank, b1, b2, diag_log)?;
    Ok(field)
}

fn low_rank_expand_cached(
    width: usize,
    height: usize,
    classes: usize,
    rank: usize,
    b1: &[f64],
    b2: &[f64],
    diag_log: &[f64],
) -> Result<(ConfusionField, LowRankCache)> {
    let l = classes;
    if rank == 0 || rank >= l {
        return Err(Error::arg("low-rank factor must satisfy 1 <= l < L"));
    }
    let n = width * height;
    if b1.len() != n * l * rank || b2.len() != n * l * rank || diag_log.len() != l {
        return Err(Error::shape(
            format!("{} factor entries and {l} biases", n * l * rank),
            format!("{}, {}, {}", b1.len(), b2.len(), diag_log.len()),
        ));
    }
    if !(b1.iter().all(|v| v.is_finite())
        && b2.iter().all(|v| v.is_finite())
        && diag_log.iter().all(|v| v.is_finite()))
    {
        return Err(Error::NonFinite {
            context: "low-rank factors".into(),
        });
    }
    let mut entries = vec![0.0; n * l * l];
    let mut e = vec![0.0; n * l * l];
    let mut d = vec![0.0; n * l];
    let mut s = vec![0.0; n * l];
    let mut m = vec![0.0; l * l];
    for p in 0..n {
        let f1 = &b1[p * l * rank..(p + 1) * l * rank];
        let f2 = &b2[p * l * rank..(p + 1) * l * rank];
        for i in 0..l {
            for j in 0..l {
                let mut acc = 0.0;
                for t in 0..rank {
                    acc += f1[i * rank + t] * f2[j * rank + t];
                }
                m[i * l + j] = acc;
            }
        }
        for j in 0..l {
            let mut c = diag_log[j];
            for i in 0..l {
                c = c.max(m[i * l + j]);
            }
            let dj = (diag_log[j] - c).exp();
            let mut sum = dj;
            for i in 0..l {
                let ev = (m[i * l + j] - c).exp();
                e[(p * l + i) * l + j] = ev;
                sum += ev;
            }
            d[p * l + j] = dj;
            s[p * l + j] = sum;
            for i in 0..l {
                let u = e[(p * l + i) * l + j] + if i == j { dj } else { 0.0 };
                entries[(p * l + i) * l + j] = u / sum;
            }
        }
    }
    Ok((
        ConfusionField::new_unchecked(width, height, classes, entries),
        LowRankCache { e, d, s },
    ))
}

/// Exact per-pixel confusion-matrix variable and FLOP counts of the two
/// parameterizations.
pub fn complexity_estimate(
    width: usize,
    height: usize,
    classes: usize,
    mode: CmMode,
) -> (u64, u64) {
    let wh = (width * height) as u64;
    let l = classes as u64;
    match mode {
        CmMode::Full => (wh * l * l, wh * (2 * l - 1) * l),
        CmMode::LowRank(rank) => {
            let r = rank as u64;
            (2 * wh * l * r, wh * (4 * l * r - l - r))
        }
    }
}

fn forward_cached(params: &ModelParams, image: &ImageTensor) -> Result<(ModelOutput, Cache)> {
    let arch = &params.arch;
    arch.validate()?;
    if image.channels() != arch.in_channels {
        return Err(Error::shape(
            format!("{} image channels", arch.in_channels),
            format!("{}", image.channels()),
        ));
    }
    let layout = params.layout();
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    let c = arch.trunk_channels;
    let l = arch.classes;

    let mut pre = Vec::with_capacity(arch.trunk_layers);
    let mut post = Vec::with_capacity(arch.trunk_layers);
    let mut cur: &[f64] = image.values();
    let mut cin = arch.in_channels;
    for t in 0..arch.trunk_layers {
        let z = conv3x3(
            cur,
            w,
            h,
            cin,
            params.slice(&layout, &format!("trunk.{t}.weight")),
            params.slice(&layout, &format!("trunk.{t}.bias")),
            c,
        );
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("trunk layer {t} activations"),
            });
        }
        let a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
        pre.push(z);
        post.push(a);
        cur = post.last().unwrap();
        cin = c;
    }
    let feat = post.last().unwrap();

    let seg_logits = head1x1(
        feat,
        n,
        c,
        params.slice(&layout, "seg.weight"),
        params.slice(&layout, "seg.bias"),
        l,
    );
    if !seg_logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "segmentation logits".into(),
        });
    }
    let mut seg = vec![0.0; n * l];
    for p in 0..n {
        softmax_in_place(&seg_logits[p * l..(p + 1) * l], &mut seg[p * l..(p + 1) * l]);
    }
    let seg_probs = ProbabilityMap::new_unchecked(w, h, l, seg);

    let k_ch = arch.ann_channels();
    let ann_z = head1x1(
        feat,
        n,
        c,
        params.slice(&layout, "ann.weight"),
        params.slice(&layout, "ann.bias"),
        k_ch,
    );
    if !ann_z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "annotator head activations".into(),
        });
    }

    let mut cms = Vec::with_capacity(arch.annotators);
    let mut lowrank = None;
    match arch.cm_mode {
        CmMode::Full => {
            for r in 0..arch.annotators {
                let mut entries = vec![0.0; n * l * l];
                for p in 0..n {
                    let zb = p * k_ch + r * l * l;
                    for j in 0..l {
                        let mut m = f64::NEG_INFINITY;
                        for i in 0..l {
                            m = m.max(ann_z[zb + i * l + j]);
                        }
                        let mut sum = 0.0;
                        for i in 0..l {
                            let e = (ann_z[zb + i * l + j] - m).exp();
                            entries[(p * l + i) * l + j] = e;
                            sum += e;
                        }
                        for i in 0..l {
                            entries[(p * l + i) * l + j] /= sum;
                        }
                    }
                }
                cms.push(ConfusionField::new_unchecked(w, h, l, entries));
            }
        }
        CmMode::LowRank(rank) => {
            let per = 2 * l * rank;
            let mut caches = Vec::with_capacity(arch.annotators);
            let diag = params.slice(&layout, "ann.diag");
            for r in 0..arch.annotators {
                let mut b1 = vec![0.0; n * l * rank];
                let mut b2 = vec![0.0; n * l * rank];
                for p in 0..n {
                    let zb = p * k_ch + r * per;
                    b1[p * l * rank..(p + 1) * l * rank]
                        .copy_from_slice(&ann_z[zb..zb + l * rank]);
                    b2[p * l * rank..(p + 1) * l * rank]
                        .copy_from_slice(&ann_z[zb + l * rank..zb + per]);
                }
                let (field, cache) = low_rank_expand_cached(
                    w,
                    h,
                    l,
                    rank,
                    &b1,
                    &b2,
                    &diag[r * l..(r + 1) * l],
                )?;
                cms.push(field);
                caches.push(cache);
            }
            lowrank = Some(caches);
        }
    }

    let ann_probs = cms
        .iter()
        .map(|a| crate::grid::cm_apply(a, &seg_probs))
        .collect::<Result<Vec<_>>>()?;

    Ok((
        ModelOutput {
            seg_logits,
            seg_probs,
            cms,
            ann_probs,
        },
        Cache {
            post,
            pre,
            ann_z,
            lowrank,
        },
    ))
}

/// Run the model on one image.
pub fn forward(params: &ModelParams, image: &ImageTensor) -> Result<ModelOutput> {
    Ok(forward_cached(params, image)?.0)
}

/// The per-annotator loss terms of one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean-over-pixels cross-entropy per annotator; zero when absent.
    pub ce_per_annotator: Vec<f64>,
    /// Mean trace per annotator; zero when absent.
    pub trace_per_annotator: Vec<f64>,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn ce_total(&self) -> f64 {
        self.ce_per_annotator.iter().sum()
    }

    pub fn trace_total(&self) -> f64 {
        self.trace_per_annotator.iter().sum()
    }
}

/// Availability-masked loss: for each annotator with a label present, the
/// mean cross-entropy of the predicted noisy distribution against that
/// label plus `lambda` times the mean trace of the annotator's matrices.
pub fn loss_total(
    output: &ModelOutput,
    labels: &[Option<LabelMap>],
    lambda: f64,
) -> Result<LossBreakdown> {
    let r_count = output.cms.len();
    if labels.len() != r_count {
        return Err(Error::shape(
            format!("{r_count} label slots"),
            format!("{}", labels.len()),
        ));
    }
    if labels.iter().all(Option::is_none) {
        return Err(Error::arg("no annotator labels available"));
    }
    let l = output.seg_probs.classes();
    let n = output.seg_probs.width() * output.seg_probs.height();
    let mut ce = vec![0.0; r_count];
    let mut trace = vec![0.0; r_count];
    let mut total = 0.0;
    for r in 0..r_count {
        let Some(map) = &labels[r] else { continue };
        if map.width() != output.seg_probs.width()
            || map.height() != output.seg_probs.height()
            || map.classes() != l
        {
            return Err(Error::shape("labels matching model output", "mismatch"));
        }
        let mut sum = 0.0;
        for (p, &lab) in map.labels().iter().enumerate() {
            let q = output.ann_probs[r].probs()[p * l + usize::from(lab)];
            sum -= q.max(CE_FLOOR).ln();
        }
        ce[r] = sum / n as f64;
        trace[r] = crate::grid::trace_mean(&output.cms[r]);
        total += ce[r] + lambda * trace[r];
    }
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: "total loss".into(),
        });
    }
    Ok(LossBreakdown {
        ce_per_annotator: ce,
        trace_per_annotator: trace,
        total,
        lambda,
    })
}

/// Exact gradient of [`loss_total`] with respect to every parameter.
///
/// Returns the loss breakdown together with a flat gradient vector aligned
/// with the parameter layout.
pub fn backward(
    params: &ModelParams,
    image: &ImageTensor,
    labels: &[Option<LabelMap>],
    lambda: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (output, cache) = forward_cached(params, image)?;
    let loss = loss_total(&output, labels, lambda)?;
    let arch = &params.arch;
    let layout = params.layout();
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    let c = arch.trunk_channels;
    let l = arch.classes;
    let k_ch = arch.ann_channels();
    let inv_n = 1.0 / n as f64;

    let mut grad = vec![0.0; layout.total()];
    let mut d_feat = vec![0.0; n * c];
    let mut d_seg_probs = vec![0.0; n * l];
    let mut d_ann_z = vec![0.0; n * k_ch];

    for (r, slot) in labels.iter().enumerate().take(arch.annotators) {
        let Some(map) = slot else { continue };
        let a = &output.cms[r];
        let q = &output.ann_probs[r];
        let p_hat = &output.seg_probs;
        match arch.cm_mode {
            CmMode::Full => {
                for (pix, &lab) in map.labels().iter().enumerate() {
                    let i0 = usize::from(lab);
                    let qv = q.probs()[pix * l + i0];
                    // d loss / d q_i is nonzero only at the observed class
                    let gq = if qv < CE_FLOOR { 0.0 } else { -inv_n / qv };
                    let am = &a.entries()[pix * l * l..(pix + 1) * l * l];
                    let pv = &p_hat.probs()[pix * l..(pix + 1) * l];
                    // dp_j += Σ_i gq_i A_ij reduces to the observed row
                    for j in 0..l {
                        d_seg_probs[pix * l + j] += gq * am[i0 * l + j];
                    }
                    // G_ij = gq_i·p_j + λ/n on the diagonal, then the
                    // column-softmax Jacobian maps G to raw-logit space
                    let zb = pix * k_ch + r * l * l;
                    for j in 0..l {
                        let mut colsum = 0.0;
                        for i in 0..l {
                            let g = if i == i0 { gq * pv[j] } else { 0.0 }
                                + if i == j { lambda * inv_n } else { 0.0 };
                            colsum += g * am[i * l + j];
                        }
                        for i in 0..l {
                            let g = if i == i0 { gq * pv[j] } else { 0.0 }
                                + if i == j { lambda * inv_n } else { 0.0 };
                            d_ann_z[zb + i * l + j] += am[i * l + j] * (g - colsum);
                        }
                    }
                }
            }
            CmMode::LowRank(rank) => {
                let per = 2 * l * rank;
                let lr = &cache.lowrank.as_ref().unwrap()[r];
                let diag_grad_base = layout.range("ann.diag").unwrap().start + r * l;
                for (pix, &lab) in map.labels().iter().enumerate() {
                    let i0 = usize::from(lab);
                    let qv = q.probs()[pix * l + i0];
                    let gq = if qv < CE_FLOOR { 0.0 } else { -inv_n / qv };
                    let am = &a.entries()[pix * l * l..(pix + 1) * l * l];
                    let pv = &p_hat.probs()[pix * l..(pix + 1) * l];
                    for j in 0..l {
                        d_seg_probs[pix * l + j] += gq * am[i0 * l + j];
                    }
                    let zb = pix * k_ch + r * per;
                    let b1 = &cache.ann_z[zb..zb + l * rank];
                    let b2 = &cache.ann_z[zb + l * rank..zb + per];
                    for j in 0..l {
                        let s = lr.s[pix * l + j];
                        let mut colsum = 0.0;
                        for i in 0..l {
                            let g = if i == i0 { gq * pv[j] } else { 0.0 }
                                + if i == j { lambda * inv_n } else { 0.0 };
                            colsum += g * am[i * l + j];
                        }
                        for i in 0..l {
                            let g = if i == i0 { gq * pv[j] } else { 0.0 }
                                + if i == j { lambda * inv_n } else { 0.0 };
                            // gradient w.r.t. the unnormalized column entry
                            let hu = (g - colsum) / s;
                            let dm = hu * lr.e[(pix * l + i) * l + j];
                            for t in 0..rank {
                                d_ann_z[zb + i * rank + t] += dm * b2[j * rank + t];
                                d_ann_z[zb + l * rank + j * rank + t] += dm * b1[i * rank + t];
                            }
                            if i == j {
                                grad[diag_grad_base + j] += hu * lr.d[pix * l + j];
                            }
                        }
                    }
                }
            }
        }
    }

    // softmax backward for the segmentation head
    let mut d_seg_logits = vec![0.0; n * l];
    for p in 0..n {
        let pv = &output.seg_probs.probs()[p * l..(p + 1) * l];
        let gv = &d_seg_probs[p * l..(p + 1) * l];
        let dot: f64 = pv.iter().zip(gv).map(|(a, b)| a * b).sum();
        for i in 0..l {
            d_seg_logits[p * l + i] = pv[i] * (gv[i] - dot);
        }
    }

    let feat = cache.post.last().unwrap();
    {
        let r_w = layout.range("seg.weight").unwrap();
        let r_b = layout.range("seg.bias").unwrap();
        let (gw, gb) = split_two(&mut grad, r_w.clone(), r_b.clone());
        head1x1_backward(
            feat,
            n,
            c,
            params.slice(&layout, "seg.weight"),
            l,
            &d_seg_logits,
            &mut d_feat,
            gw,
            gb,
        );
    }
    {
        let r_w = layout.range("ann.weight").unwrap();
        let r_b = layout.range("ann.bias").unwrap();
        let (gw, gb) = split_two(&mut grad, r_w.clone(), r_b.clone());
        head1x1_backward(
            feat,
            n,
            c,
            params.slice(&layout, "ann.weight"),
            k_ch,
            &d_ann_z,
            &mut d_feat,
            gw,
            gb,
        );
    }

    // trunk backward, newest layer first
    let mut d_cur = d_feat;
    for t in (0..arch.trunk_layers).rev() {
        let mut d_pre = d_cur.clone();
        for (dp, &z) in d_pre.iter_mut().zip(&cache.pre[t]) {
            if z <= 0.0 {
                *dp = 0.0;
            }
        }
        let (input, cin): (&[f64], usize) = if t == 0 {
            (image.values(), arch.in_channels)
        } else {
            (&cache.post[t - 1], c)
        };
        let mut d_input = vec![0.0; input.len()];
        let r_w = layout.range(&format!("trunk.{t}.weight")).unwrap();
        let r_b = layout.range(&format!("trunk.{t}.bias")).unwrap();
        let (gw, gb) = split_two(&mut grad, r_w, r_b);
        conv3x3_backward(
            input,
            w,
            h,
            cin,
            params.slice(&layout, &format!("trunk.{t}.weight")),
            c,
            &d_pre,
            &mut d_input,
            gw,
            gb,
        );
        d_cur = d_input;
    }

    if let Some(bad) = grad.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("gradient of {}", layout.name_at(bad)),
        });
    }
    Ok((loss, grad))
}

/// Two disjoint mutable segment views into the gradient vector.
fn split_two(
    grad: &mut [f64],
    a: Range<usize>,
    b: Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    assert!(a.end <= b.start);
    let (head, tail) = grad.split_at_mut(b.start);
    (&mut head[a], &mut tail[..b.end - b.start])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::trace_mean;
    use proptest::prelude::*;
    use rand::Rng;

    fn arch(mode: CmMode) -> ModelArch {
        ModelArch {
            in_channels: 1,
            trunk_layers: 1,
            trunk_channels: 4,
            classes: 2,
            annotators: 2,
            cm_mode: mode,
        }
    }

    fn test_image(w: usize, h: usize, seed: u64) -> ImageTensor {
        let mut rng = SeedRng::new(seed).rng();
        let values = (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageTensor::new(w, h, 1, values).unwrap()
    }

    fn random_labels(w: usize, h: usize, l: usize, seed: u64) -> LabelMap {
        let mut rng = SeedRng::new(seed).rng();
        let v = (0..w * h).map(|_| rng.gen_range(0..l as u8)).collect();
        LabelMap::new(w, h, l, v).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&arch(CmMode::Full), &SeedRng::new(5)).unwrap();
        let b = init_params(&arch(CmMode::Full), &SeedRng::new(5)).unwrap();
        assert_eq!(a, b);
        let c = init_params(&arch(CmMode::Full), &SeedRng::new(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_starts_near_identity() {
        for mode in [CmMode::Full, CmMode::LowRank(1)] {
            let params = init_params(&arch(mode), &SeedRng::new(7)).unwrap();
            let image = ImageTensor::zeros(6, 6, 1);
            let out = forward(&params, &image).unwrap();
            for cm in &out.cms {
                assert!(trace_mean(cm) >= 0.99 * 2.0, "mode {mode:?}");
                for (x, y) in [(0, 0), (3, 2)] {
                    for i in 0..2 {
                        for j in 0..2 {
                            let want = if i == j { 1.0 } else { 0.0 };
                            assert!(
                                (cm.get(x, y, i, j) - want).abs() <= 1e-3,
                                "mode {mode:?} entry ({i},{j})"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn identity_matrices_pass_seg_probs_through() {
        let mut params = init_params(&arch(CmMode::Full), &SeedRng::new(8)).unwrap();
        let layout = params.layout();
        params.slice_mut(&layout, "ann.weight").fill(0.0);
        let bias = params.slice_mut(&layout, "ann.bias");
        bias.fill(0.0);
        for r in 0..2 {
            for i in 0..2 {
                bias[r * 4 + i * 2 + i] = 1000.0;
            }
        }
        let out = forward(&params, &test_image(5, 4, 1)).unwrap();
        for r in 0..2 {
            assert_eq!(out.ann_probs[r].probs(), out.seg_probs.probs());
            assert_eq!(trace_mean(&out.cms[r]), 2.0);
        }
    }

    #[test]
    fn ann_probs_match_cm_apply_invariant() {
        let params = init_params(&arch(CmMode::LowRank(1)), &SeedRng::new(9)).unwrap();
        let out = forward(&params, &test_image(4, 4, 2)).unwrap();
        for r in 0..2 {
            let expect = crate::grid::cm_apply(&out.cms[r], &out.seg_probs).unwrap();
            assert_eq!(out.ann_probs[r].probs(), expect.probs());
        }
    }

    #[test]
    fn permuting_annotator_blocks_permutes_outputs() {
        let mut params = init_params(&arch(CmMode::Full), &SeedRng::new(10)).unwrap();
        let layout = params.layout();
        // make the two annotators genuinely different
        {
            let bias = params.slice_mut(&layout, "ann.bias");
            bias[1] += 0.3;
            bias[4 + 2] -= 0.4;
        }
        let image = test_image(4, 4, 3);
        let out = forward(&params, &image).unwrap();
        let mut swapped = params.clone();
        {
            let wr = layout.range("ann.weight").unwrap();
            let c = 4usize;
            swapped.values_mut()[wr.clone()].rotate_left(4 * c);
            let br = layout.range("ann.bias").unwrap();
            swapped.values_mut()[br].rotate_left(4);
        }
        let out2 = forward(&swapped, &image).unwrap();
        assert_eq!(out.ann_probs[0].probs(), out2.ann_probs[1].probs());
        assert_eq!(out.ann_probs[1].probs(), out2.ann_probs[0].probs());
    }

    #[test]
    fn low_rank_zero_factors_give_identity_dominance() {
        let beta = vec![(identity_diag_mass(2) - 1.0).ln(); 2];
        let field = low_rank_expand(3, 3, 2, 1, &[0.0; 18], &[0.0; 18], &beta).unwrap();
        assert!(trace_mean(&field) >= 0.99 * 2.0);
        field.validate().unwrap();
    }

    #[test]
    fn low_rank_prebias_matrix_has_rank_one() {
        let mut rng = SeedRng::new(11).rng();
        let b1: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b2: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // all 2x2 minors of the outer product vanish
        for i in 0..3 {
            for j in 0..3 {
                for i2 in 0..3 {
                    for j2 in 0..3 {
                        let det = b1[i] * b2[j] * b1[i2] * b2[j2]
                            - b1[i] * b2[j2] * b1[i2] * b2[j];
                        assert!(det.abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn complexity_matches_reference_table() {
        assert_eq!(
            complexity_estimate(192, 192, 4, CmMode::Full),
            (589824, 1032192)
        );
        assert_eq!(
            complexity_estimate(192, 192, 4, CmMode::LowRank(1)),
            (294912, 405504)
        );
        assert_eq!(complexity_estimate(1, 1, 2, CmMode::Full), (4, 6));
    }

    fn identity_full_params(a: &ModelArch, huge_seg_class: Option<usize>) -> ModelParams {
        let mut params = init_params(a, &SeedRng::new(12)).unwrap();
        let layout = params.layout();
        params.slice_mut(&layout, "ann.weight").fill(0.0);
        let l = a.classes;
        {
            let bias = params.slice_mut(&layout, "ann.bias");
            bias.fill(0.0);
            for r in 0..a.annotators {
                for i in 0..l {
                    bias[r * l * l + i * l + i] = 1000.0;
                }
            }
        }
        params.slice_mut(&layout, "seg.weight").fill(0.0);
        {
            let bias = params.slice_mut(&layout, "seg.bias");
            bias.fill(0.0);
            if let Some(class) = huge_seg_class {
                bias[class] = 1000.0;
            }
        }
        params
    }

    #[test]
    fn loss_zero_ce_at_perfect_fit() {
        let a = arch(CmMode::Full);
        let params = identity_full_params(&a, Some(1));
        let image = test_image(3, 3, 4);
        let out = forward(&params, &image).unwrap();
        let ones = LabelMap::new(3, 3, 2, vec![1; 9]).unwrap();
        let loss = loss_total(&out, &[Some(ones), None], 0.7).unwrap();
        assert_eq!(loss.ce_per_annotator[0], 0.0);
        assert!((loss.total - 0.7 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_uniform_predictor_is_ln_two() {
        let a = arch(CmMode::Full);
        let mut params = identity_full_params(&a, None);
        let layout = params.layout();
        params.slice_mut(&layout, "ann.bias").fill(0.0);
        let image = test_image(3, 3, 5);
        let out = forward(&params, &image).unwrap();
        let labels = random_labels(3, 3, 2, 6);
        let loss = loss_total(&out, &[Some(labels.clone()), Some(labels)], 0.0).unwrap();
        for r in 0..2 {
            assert!((loss.ce_per_annotator[r] - 2.0_f64.ln()).abs() < 1e-12);
        }
        assert!((loss.total - loss.ce_total()).abs() < 1e-15);
    }

    #[test]
    fn loss_requires_some_label() {
        let params = init_params(&arch(CmMode::Full), &SeedRng::new(13)).unwrap();
        let out = forward(&params, &test_image(3, 3, 7)).unwrap();
        assert!(loss_total(&out, &[None, None], 0.5).is_err());
    }

    #[test]
    fn loss_equals_joint_factorized_log_probability() {
        let params = init_params(&arch(CmMode::Full), &SeedRng::new(14)).unwrap();
        let image = test_image(2, 2, 8);
        let out = forward(&params, &image).unwrap();
        let y1 = random_labels(2, 2, 2, 9);
        let y2 = random_labels(2, 2, 2, 10);
        let loss = loss_total(&out, &[Some(y1.clone()), Some(y2.clone())], 0.0).unwrap();
        // joint probability of the full observation, multiplied out directly
        let mut joint = 1.0;
        for (r, y) in [&y1, &y2].into_iter().enumerate() {
            for (p, &lab) in y.labels().iter().enumerate() {
                joint *= out.ann_probs[r].probs()[p * 2 + usize::from(lab)];
            }
        }
        assert!((loss.total - (-joint.ln() / 4.0)).abs() < 1e-12);
    }

    fn finite_difference_check(mode: CmMode, seed: u64, lambda: f64) {
        let a = arch(mode);
        let params = init_params(&a, &SeedRng::new(seed)).unwrap();
        let image = test_image(4, 4, seed + 1);
        let labels = vec![
            Some(random_labels(4, 4, 2, seed + 2)),
            Some(random_labels(4, 4, 2, seed + 3)),
        ];
        let (_, grad) = backward(&params, &image, &labels, lambda).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (idx, &g) in grad.iter().enumerate() {
            let mut plus = params.clone();
            plus.values_mut()[idx] += h;
            let mut minus = params.clone();
            minus.values_mut()[idx] -= h;
            let lp = loss_total(&forward(&plus, &image).unwrap(), &labels, lambda)
                .unwrap()
                .total;
            let lm = loss_total(&forward(&minus, &image).unwrap(), &labels, lambda)
                .unwrap()
                .total;
            let fd = (lp - lm) / (2.0 * h);
            let err = (g - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
            assert!(
                err < 1e-4,
                "{} index {idx}: analytic {g} vs fd {fd}",
                params.layout().name_at(idx)
            );
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_full() {
        finite_difference_check(CmMode::Full, 20, 0.7);
    }

    #[test]
    fn gradients_match_finite_differences_low_rank() {
        finite_difference_check(CmMode::LowRank(1), 30, 0.7);
    }

    #[test]
    fn gradients_match_finite_differences_without_trace() {
        finite_difference_check(CmMode::Full, 40, 0.0);
    }

    #[test]
    fn gradients_vanish_at_stationary_point() {
        let a = arch(CmMode::Full);
        let params = identity_full_params(&a, Some(1));
        let image = test_image(3, 3, 15);
        let ones = LabelMap::new(3, 3, 2, vec![1; 9]).unwrap();
        let (loss, grad) = backward(&params, &image, &[Some(ones), None], 0.0).unwrap();
        assert_eq!(loss.total, 0.0);
        for (i, g) in grad.iter().enumerate() {
            assert!(
                g.abs() < 1e-10,
                "{} index {i} gradient {g}",
                params.layout().name_at(i)
            );
        }
    }

    #[test]
    fn trace_gradient_is_linear_in_lambda() {
        let params = init_params(&arch(CmMode::Full), &SeedRng::new(16)).unwrap();
        let image = test_image(4, 3, 17);
        let labels = vec![Some(random_labels(4, 3, 2, 18)), None];
        let (_, g0) = backward(&params, &image, &labels, 0.0).unwrap();
        let (_, g1) = backward(&params, &image, &labels, 0.4).unwrap();
        let (_, g2) = backward(&params, &image, &labels, 0.8).unwrap();
        for i in 0..g0.len() {
            let once = g1[i] - g0[i];
            let twice = g2[i] - g0[i];
            assert!((twice - 2.0 * once).abs() < 1e-12);
        }
    }

    #[test]
    fn absent_annotator_contributes_nothing() {
        let params = init_params(&arch(CmMode::Full), &SeedRng::new(19)).unwrap();
        let layout = params.layout();
        let image = test_image(4, 4, 20);
        let labels = vec![Some(random_labels(4, 4, 2, 21)), None];
        let (loss, grad) = backward(&params, &image, &labels, 0.5).unwrap();
        assert_eq!(loss.ce_per_annotator[1], 0.0);
        assert_eq!(loss.trace_per_annotator[1], 0.0);
        assert!(
            (loss.total - (loss.ce_per_annotator[0] + 0.5 * loss.trace_per_annotator[0])).abs()
                < 1e-15
        );
        // the second annotator's head block receives zero gradient
        let wr = layout.range("ann.weight").unwrap();
        let br = layout.range("ann.bias").unwrap();
        let c = 4;
        for k in 4..8 {
            for v in &grad[wr.start + k * c..wr.start + (k + 1) * c] {
                assert_eq!(*v, 0.0);
            }
            assert_eq!(grad[br.start + k], 0.0);
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let params = init_params(&arch(CmMode::LowRank(1)), &SeedRng::new(22)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        params.save(dir.path()).unwrap();
        let back = ModelParams::load(dir.path()).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn checkpoint_rejects_bad_version() {
        let params = init_params(&arch(CmMode::Full), &SeedRng::new(23)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        params.save(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("arch.json")).unwrap();
        fs::write(
            dir.path().join("arch.json"),
            text.replace("\"version\": 1", "\"version\": 9"),
        )
        .unwrap();
        assert!(ModelParams::load(dir.path()).is_err());
    }

    #[test]
    fn non_finite_params_are_reported() {
        let mut params = init_params(&arch(CmMode::Full), &SeedRng::new(24)).unwrap();
        params.values_mut()[0] = f64::NAN;
        let image = test_image(3, 3, 25);
        let labels = vec![Some(random_labels(3, 3, 2, 26)), None];
        let err = backward(&params, &image, &labels, 0.5).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn layout_names_every_index() {
        let a = arch(CmMode::LowRank(1));
        let layout = Layout::of(&a);
        assert_eq!(layout.name_at(0), "trunk.0.weight");
        assert_eq!(layout.name_at(layout.total() - 1), "ann.diag");
        assert_eq!(layout.name_at(layout.total()), "<out of range>");
        let r = layout.range("seg.bias").unwrap();
        assert_eq!(layout.name_at(r.start), "seg.bias");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn ann_probs_stay_on_simplex(seed in 0u64..200, scale in 0.1f64..3.0) {
            let mut params = init_params(&arch(CmMode::Full), &SeedRng::new(seed)).unwrap();
            for v in params.values_mut() {
                *v *= scale;
            }
            let out = forward(&params, &test_image(4, 4, seed + 1)).unwrap();
            for q in &out.ann_probs {
                prop_assert!(q.validate().is_ok());
            }
            for cm in &out.cms {
                prop_assert!(cm.validate().is_ok());
            }
        }

        #[test]
        fn low_rank_fields_stay_stochastic(seed in 0u64..100) {
            let mut rng = SeedRng::new(seed).rng();
            let b1: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b2: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let beta = vec![rng.gen_range(-1.0..8.0); 3];
            let field = low_rank_expand(2, 2, 3, 1, &b1, &b2, &beta).unwrap();
            prop_assert!(field.validate().is_ok());
        }
    }
}
