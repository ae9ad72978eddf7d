//! Dense pixel-grid value types and the small linear-algebra kernels the
//! rest of the crate builds on.
//!
//! Conventions used throughout:
//! - class indices are 0-based; class 0 is background,
//! - fields are stored dense in pixel-major order (the per-pixel vector or
//!   matrix is contiguous),
//! - confusion matrices are column-stochastic: entry `(i, j)` is the
//!   probability of observing class `i` when the true class is `j`, so each
//!   column sums to 1.

pub mod tensor_io;

use crate::error::{Error, Result};

/// Tolerance for per-pixel simplex and column-stochasticity checks.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Upper bound on the number of classes the dense layout is designed for.
pub const MAX_CLASSES: usize = 16;

/// A real-valued image, `channels` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::arg("image dimensions must be at least 1"));
        }
        if values.len() != width * height * channels {
            return Err(Error::shape(
                format!("{} values", width * height * channels),
                format!("{}", values.len()),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "image values".into(),
            });
        }
        Ok(ImageTensor {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        ImageTensor {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.values[(y * self.width + x) * self.channels + c] = v;
    }

    /// Flip pixels left-right (and/or top-bottom); channels ride along.
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> ImageTensor {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let sx = if horizontal { self.width - 1 - x } else { x };
                let sy = if vertical { self.height - 1 - y } else { y };
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(sx, sy, c));
                }
            }
        }
        out
    }
}

/// An integer class map over the pixel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || classes == 0 {
            return Err(Error::arg("label map dimensions must be at least 1"));
        }
        if classes > MAX_CLASSES {
            return Err(Error::arg(format!(
                "{classes} classes exceeds the supported maximum of {MAX_CLASSES}"
            )));
        }
        if labels.len() != width * height {
            return Err(Error::shape(
                format!("{} labels", width * height),
                format!("{}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= classes) {
            return Err(Error::InvalidLabel {
                label: usize::from(bad),
                classes,
            });
        }
        Ok(LabelMap {
            width,
            height,
            classes,
            labels,
        })
    }

    /// All-background map.
    pub fn zeros(width: usize, height: usize, classes: usize) -> Self {
        LabelMap {
            width,
            height,
            classes,
            labels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> usize {
        usize::from(self.labels[y * self.width + x])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: usize) {
        debug_assert!(label < self.classes);
        self.labels[y * self.width + x] = label as u8;
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.width == other.width && self.height == other.height && self.classes == other.classes
    }

    /// Pixels carrying the given class.
    pub fn class_mask(&self, class: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| usize::from(l) == class).collect()
    }

    /// Pixels carrying any non-background class.
    pub fn foreground_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    pub fn count_class(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| usize::from(l) == class).count()
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> LabelMap {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let sx = if horizontal { self.width - 1 - x } else { x };
                let sy = if vertical { self.height - 1 - y } else { y };
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }
}

/// A per-pixel distribution over `classes` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != width * height * classes {
            return Err(Error::shape(
                format!("{} probabilities", width * height * classes),
                format!("{}", probs.len()),
            ));
        }
        let map = ProbabilityMap {
            width,
            height,
            classes,
            probs,
        };
        map.validate()?;
        Ok(map)
    }

    /// Build without the simplex check; used by kernels whose output is
    /// simplex-preserving by construction. Debug builds still verify.
    pub(crate) fn new_unchecked(
        width: usize,
        height: usize,
        classes: usize,
        probs: Vec<f64>,
    ) -> Self {
        let map = ProbabilityMap {
            width,
            height,
            classes,
            probs,
        };
        debug_assert!(map.validate().is_ok());
        map
    }

    pub fn validate(&self) -> Result<()> {
        for p in 0..self.width * self.height {
            let row = &self.probs[p * self.classes..(p + 1) * self.classes];
            let mut sum = 0.0;
            for &v in row {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::NonFinite {
                        context: "probability map entries".into(),
                    });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::arg(format!(
                    "pixel {p} probabilities sum to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, class: usize) -> f64 {
        self.probs[(y * self.width + x) * self.classes + class]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.classes;
        &self.probs[base..base + self.classes]
    }

    /// Per-pixel argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let mut out = LabelMap::zeros(self.width, self.height, self.classes);
        for y in 0..self.height {
            for x in 0..self.width {
                let row = self.pixel(x, y);
                let mut best = 0;
                for (l, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = l;
                    }
                }
                out.set(x, y, best);
            }
        }
        out
    }

    pub fn same_shape(&self, other: &ProbabilityMap) -> bool {
        self.width == other.width && self.height == other.height && self.classes == other.classes
    }
}

/// A per-pixel column-stochastic confusion matrix field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionField {
    width: usize,
    height: usize,
    classes: usize,
    entries: Vec<f64>,
}

impl ConfusionField {
    pub fn new(width: usize, height: usize, classes: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != width * height * classes * classes {
            return Err(Error::shape(
                format!("{} entries", width * height * classes * classes),
                format!("{}", entries.len()),
            ));
        }
        let field = ConfusionField {
            width,
            height,
            classes,
            entries,
        };
        field.validate()?;
        Ok(field)
    }

    pub(crate) fn new_unchecked(
        width: usize,
        height: usize,
        classes: usize,
        entries: Vec<f64>,
    ) -> Self {
        let field = ConfusionField {
            width,
            height,
            classes,
            entries,
        };
        debug_assert!(field.validate().is_ok());
        field
    }

    /// Identity matrix at every pixel.
    pub fn identity(width: usize, height: usize, classes: usize) -> Self {
        let l = classes;
        let mut entries = vec![0.0; width * height * l * l];
        for p in 0..width * height {
            for i in 0..l {
                entries[(p * l + i) * l + i] = 1.0;
            }
        }
        ConfusionField {
            width,
            height,
            classes,
            entries,
        }
    }

    /// Uniform matrix (all entries 1/L) at every pixel.
    pub fn uniform(width: usize, height: usize, classes: usize) -> Self {
        ConfusionField {
            width,
            height,
            classes,
            entries: vec![1.0 / classes as f64; width * height * classes * classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.classes;
        for p in 0..self.width * self.height {
            for j in 0..l {
                let mut sum = 0.0;
                for i in 0..l {
                    let v = self.entries[(p * l + i) * l + j];
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(Error::NonFinite {
                            context: "confusion field entries".into(),
                        });
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > SIMPLEX_TOL {
                    return Err(Error::arg(format!(
                        "pixel {p} column {j} sums to {sum}, not 1"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Entry `(i, j)` = p(observed = i | true = j) at pixel `(x, y)`.
    #[inline]
    pub fn get(&self, x: usize, y: usize, i: usize, j: usize) -> f64 {
        let l = self.classes;
        self.entries[((y * self.width + x) * l + i) * l + j]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, i: usize, j: usize, v: f64) {
        let l = self.classes;
        self.entries[((y * self.width + x) * l + i) * l + j] = v;
    }

    /// The L×L matrix at pixel `(x, y)`, row-major.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let l = self.classes;
        let base = (y * self.width + x) * l * l;
        &self.entries[base..base + l * l]
    }

    pub fn same_shape(&self, other: &ConfusionField) -> bool {
        self.width == other.width && self.height == other.height && self.classes == other.classes
    }
}

/// Numerically stable per-pixel softmax over the class axis.
///
/// `logits` is laid out pixel-major, `classes` values per pixel.
pub fn softmax_pixelwise(
    width: usize,
    height: usize,
    classes: usize,
    logits: &[f64],
) -> Result<ProbabilityMap> {
    if logits.len() != width * height * classes {
        return Err(Error::shape(
            format!("{} logits", width * height * classes),
            format!("{}", logits.len()),
        ));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "softmax logits".into(),
        });
    }
    let mut probs = vec![0.0; logits.len()];
    for p in 0..width * height {
        let row = &logits[p * classes..(p + 1) * classes];
        let out = &mut probs[p * classes..(p + 1) * classes];
        softmax_in_place(row, out);
    }
    Ok(ProbabilityMap::new_unchecked(width, height, classes, probs))
}

/// Max-subtracted softmax of one vector into `out`.
#[inline]
pub(crate) fn softmax_in_place(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// One-hot encoding of a label map into a probability map with `classes`
/// classes. Errors if any label is out of range.
pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<ProbabilityMap> {
    let mut probs = vec![0.0; labels.width() * labels.height() * classes];
    for (p, &l) in labels.labels().iter().enumerate() {
        let l = usize::from(l);
        if l >= classes {
            return Err(Error::InvalidLabel { label: l, classes });
        }
        probs[p * classes + l] = 1.0;
    }
    Ok(ProbabilityMap::new_unchecked(
        labels.width(),
        labels.height(),
        classes,
        probs,
    ))
}

/// Divide each per-pixel column by its sum. `raw` must be nonnegative,
/// pixel-major with a row-major L×L matrix per pixel. A zero-sum column is
/// an error (it signals a dead annotator-head output).
pub fn normalize_columns(
    width: usize,
    height: usize,
    classes: usize,
    raw: &[f64],
) -> Result<ConfusionField> {
    let l = classes;
    if raw.len() != width * height * l * l {
        return Err(Error::shape(
            format!("{} entries", width * height * l * l),
            format!("{}", raw.len()),
        ));
    }
    let mut entries = raw.to_vec();
    for p in 0..width * height {
        let m = &mut entries[p * l * l..(p + 1) * l * l];
        for j in 0..l {
            let mut sum = 0.0;
            for i in 0..l {
                let v = m[i * l + j];
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::NonFinite {
                        context: "raw confusion entries".into(),
                    });
                }
                sum += v;
            }
            if sum <= 0.0 {
                return Err(Error::ZeroColumn {
                    x: p % width,
                    y: p / width,
                    column: j,
                });
            }
            for i in 0..l {
                m[i * l + j] /= sum;
            }
        }
    }
    Ok(ConfusionField::new_unchecked(width, height, classes, entries))
}

/// Per-pixel matrix-vector product `out_i = Σ_j A(i,j) · p_j`.
///
/// Column-stochastic `A` maps the simplex to the simplex, so the result is a
/// valid probability map.
pub fn cm_apply(a: &ConfusionField, p: &ProbabilityMap) -> Result<ProbabilityMap> {
    if a.width() != p.width() || a.height() != p.height() || a.classes() != p.classes() {
        return Err(Error::shape(
            format!("{}x{}x{}", a.width(), a.height(), a.classes()),
            format!("{}x{}x{}", p.width(), p.height(), p.classes()),
        ));
    }
    let l = a.classes();
    let mut probs = vec![0.0; p.probs().len()];
    for pix in 0..a.width() * a.height() {
        let m = &a.entries()[pix * l * l..(pix + 1) * l * l];
        let v = &p.probs()[pix * l..(pix + 1) * l];
        let out = &mut probs[pix * l..(pix + 1) * l];
        for i in 0..l {
            let mut acc = 0.0;
            for j in 0..l {
                acc += m[i * l + j] * v[j];
            }
            out[i] = acc;
        }
    }
    Ok(ProbabilityMap::new_unchecked(
        p.width(),
        p.height(),
        l,
        probs,
    ))
}

/// Mean over pixels of the per-pixel matrix trace; lies in (0, L].
pub fn trace_mean(a: &ConfusionField) -> f64 {
    let l = a.classes();
    let pixels = a.width() * a.height();
    let mut total = 0.0;
    for p in 0..pixels {
        for i in 0..l {
            total += a.entries()[(p * l + i) * l + i];
        }
    }
    total / pixels as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_on_zero_logits() {
        let p = softmax_pixelwise(2, 2, 4, &[0.0; 16]).unwrap();
        for pix in 0..4 {
            for l in 0..4 {
                assert!((p.probs()[pix * 4 + l] - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax_pixelwise(1, 1, 2, &[1000.0, 0.0]).unwrap();
        assert_eq!(p.get(0, 0, 0), 1.0);
        assert_eq!(p.get(0, 0, 1), 0.0);
    }

    #[test]
    fn softmax_closed_form() {
        // softmax(ln 2, 0) = (2/3, 1/3)
        let p = softmax_pixelwise(1, 1, 2, &[2.0_f64.ln(), 0.0]).unwrap();
        assert!((p.get(0, 0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.get(0, 0, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax_pixelwise(1, 1, 2, &[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn one_hot_single_pixel() {
        let m = LabelMap::new(1, 1, 4, vec![2]).unwrap();
        let p = one_hot(&m, 4).unwrap();
        assert_eq!(p.probs(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn one_hot_all_background() {
        let m = LabelMap::zeros(2, 2, 2);
        let p = one_hot(&m, 2).unwrap();
        for pix in 0..4 {
            assert_eq!(p.probs()[pix * 2], 1.0);
            assert_eq!(p.probs()[pix * 2 + 1], 0.0);
        }
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        let m = LabelMap::new(1, 1, 4, vec![3]).unwrap();
        assert!(one_hot(&m, 2).is_err());
    }

    #[test]
    fn normalize_columns_hand_case() {
        // per-pixel matrix [[2,0],[2,1]] -> [[0.5,0],[0.5,1]]
        let f = normalize_columns(1, 1, 2, &[2.0, 0.0, 2.0, 1.0]).unwrap();
        assert_eq!(f.pixel(0, 0), &[0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_columns_identity_fixed_point() {
        let id = ConfusionField::identity(2, 2, 3);
        let f = normalize_columns(2, 2, 3, id.entries()).unwrap();
        assert_eq!(f.entries(), id.entries());
    }

    #[test]
    fn normalize_columns_zero_column_errors() {
        let raw = [0.0, 1.0, 0.0, 0.0]; // column 0 is all zero
        match normalize_columns(1, 1, 2, &raw) {
            Err(Error::ZeroColumn { column: 0, .. }) => {}
            other => panic!("expected ZeroColumn, got {other:?}"),
        }
    }

    #[test]
    fn cm_apply_identity_is_noop() {
        let p = ProbabilityMap::new(1, 2, 2, vec![0.3, 0.7, 0.9, 0.1]).unwrap();
        let id = ConfusionField::identity(1, 2, 2);
        let q = cm_apply(&id, &p).unwrap();
        assert_eq!(q.probs(), p.probs());
    }

    #[test]
    fn cm_apply_one_hot_selects_column() {
        let f = normalize_columns(1, 1, 2, &[3.0, 1.0, 1.0, 3.0]).unwrap();
        let onehot = one_hot(&LabelMap::new(1, 1, 2, vec![1]).unwrap(), 2).unwrap();
        let q = cm_apply(&f, &onehot).unwrap();
        assert_eq!(q.probs(), &[f.get(0, 0, 0, 1), f.get(0, 0, 1, 1)]);
    }

    #[test]
    fn cm_apply_shape_mismatch_errors() {
        let p = ProbabilityMap::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let id = ConfusionField::identity(2, 1, 2);
        assert!(cm_apply(&id, &p).is_err());
    }

    #[test]
    fn trace_mean_identity_by_class_count() {
        for l in 2..=8 {
            let id = ConfusionField::identity(3, 3, l);
            assert_eq!(trace_mean(&id), l as f64);
        }
    }

    #[test]
    fn trace_mean_uniform() {
        let f = ConfusionField::uniform(4, 4, 2);
        assert!((trace_mean(&f) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trace_mean_mixed_field() {
        // half identity, half uniform, L=2 -> (2 + 1)/2 = 1.5
        let mut entries = Vec::new();
        entries.extend_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        entries.extend_from_slice(&[0.5, 0.5, 0.5, 0.5]);
        let f = ConfusionField::new(2, 1, 2, entries).unwrap();
        assert!((trace_mean(&f) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let p = ProbabilityMap::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(p.argmax().get(0, 0), 0);
    }

    fn arb_labels(w: usize, h: usize, l: usize) -> impl Strategy<Value = LabelMap> {
        prop::collection::vec(0..l as u8, w * h)
            .prop_map(move |v| LabelMap::new(w, h, l, v).unwrap())
    }

    fn arb_simplex_map(w: usize, h: usize, l: usize) -> impl Strategy<Value = ProbabilityMap> {
        prop::collection::vec(1e-3..1.0f64, w * h * l).prop_map(move |v| {
            let mut probs = v;
            for p in 0..w * h {
                let row = &mut probs[p * l..(p + 1) * l];
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            ProbabilityMap::new(w, h, l, probs).unwrap()
        })
    }

    fn arb_stochastic_field(w: usize, h: usize, l: usize) -> impl Strategy<Value = ConfusionField> {
        prop::collection::vec(1e-3..1.0f64, w * h * l * l)
            .prop_map(move |raw| normalize_columns(w, h, l, &raw).unwrap())
    }

    proptest! {
        #[test]
        fn one_hot_round_trips_through_argmax(labels in arb_labels(4, 3, 3)) {
            let p = one_hot(&labels, 3).unwrap();
            prop_assert_eq!(p.argmax(), labels);
        }

        #[test]
        fn cm_apply_preserves_simplex(
            a in arb_stochastic_field(3, 3, 3),
            p in arb_simplex_map(3, 3, 3),
        ) {
            let q = cm_apply(&a, &p).unwrap();
            for pix in 0..9 {
                let s: f64 = q.probs()[pix * 3..(pix + 1) * 3].iter().sum();
                prop_assert!((s - 1.0).abs() < SIMPLEX_TOL);
            }
        }

        #[test]
        fn normalize_columns_idempotent(a in arb_stochastic_field(2, 2, 3)) {
            let again = normalize_columns(2, 2, 3, a.entries()).unwrap();
            for (x, y) in again.entries().iter().zip(a.entries()) {
                prop_assert!((x - y).abs() < 1e-14);
            }
        }
    }
}
