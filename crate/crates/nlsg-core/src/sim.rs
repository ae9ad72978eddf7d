//! Synthetic ground truth and annotator corruption.
//!
//! Five annotator archetypes produce noisy labels from a clean map through
//! binary morphology on a target class: a faithful annotator with optional
//! one-pixel jitter, systematic over- and under-segmenters, a
//! wrong-segmenter that fractures the region and thickens the remainder,
//! and a blank annotator that returns background everywhere.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::tensor_io::{self, RawTensor};
use crate::grid::{ConfusionField, ImageTensor, LabelMap};
use crate::par;
use crate::rng::SeedRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileKind {
    Good,
    Over,
    Under,
    Wrong,
    Blank,
}

/// How one annotator corrupts a ground-truth map.
///
/// `magnitude` is the disk radius for dilate/erode (and the jitter radius
/// for `Good`); `fracture_count`/`fracture_width` only matter for `Wrong`;
/// `Blank` ignores everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub kind: ProfileKind,
    pub magnitude: usize,
    pub fracture_count: usize,
    pub fracture_width: usize,
    pub target_class: usize,
}

impl AnnotatorProfile {
    pub fn good(jitter: usize) -> Self {
        AnnotatorProfile {
            kind: ProfileKind::Good,
            magnitude: jitter,
            fracture_count: 0,
            fracture_width: 0,
            target_class: 1,
        }
    }

    pub fn over(radius: usize) -> Self {
        AnnotatorProfile {
            kind: ProfileKind::Over,
            magnitude: radius,
            fracture_count: 0,
            fracture_width: 0,
            target_class: 1,
        }
    }

    pub fn under(radius: usize) -> Self {
        AnnotatorProfile {
            kind: ProfileKind::Under,
            magnitude: radius,
            fracture_count: 0,
            fracture_width: 0,
            target_class: 1,
        }
    }

    pub fn wrong(fractures: usize, width: usize, dilate: usize) -> Self {
        AnnotatorProfile {
            kind: ProfileKind::Wrong,
            magnitude: dilate,
            fracture_count: fractures,
            fracture_width: width,
            target_class: 1,
        }
    }

    pub fn blank() -> Self {
        AnnotatorProfile {
            kind: ProfileKind::Blank,
            magnitude: 0,
            fracture_count: 0,
            fracture_width: 0,
            target_class: 1,
        }
    }

    pub fn with_target(mut self, class: usize) -> Self {
        self.target_class = class;
        self
    }

    /// The five-archetype panel, sized for small images.
    pub fn default_panel() -> Vec<AnnotatorProfile> {
        vec![
            AnnotatorProfile::good(1),
            AnnotatorProfile::over(2),
            AnnotatorProfile::under(1),
            AnnotatorProfile::wrong(2, 2, 1),
            AnnotatorProfile::blank(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphKind {
    Dilate,
    Erode,
    Fracture,
    Blank,
}

/// Offsets of a rasterized Euclidean disk of the given radius.
fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let r2 = r * r;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r2 {
                out.push((dx, dy));
            }
        }
    }
    out
}

fn class_mask(labels: &LabelMap, class: usize) -> Vec<bool> {
    labels.labels().iter().map(|&l| usize::from(l) == class).collect()
}

/// Pixels of the mask with a missing 4-neighbor (image borders count as
/// outside).
fn boundary_pixels(mask: &[bool], w: usize, h: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x == w - 1
                || y == h - 1
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1]
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x];
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

/// One morphological corruption step on the binary mask of `class`.
///
/// Dilated pixels claim their neighbors for `class`; eroded pixels revert to
/// background. `Fracture` cuts a single straight strip of width `magnitude`
/// through a randomly chosen boundary pixel at a random angle. `Blank`
/// returns an all-background map.
pub fn morph_op(
    labels: &LabelMap,
    class: usize,
    kind: MorphKind,
    magnitude: usize,
    rng: &mut impl Rng,
) -> Result<LabelMap> {
    let (w, h) = (labels.width(), labels.height());
    if class >= labels.classes() {
        return Err(Error::InvalidLabel {
            label: class,
            classes: labels.classes(),
        });
    }
    if kind == MorphKind::Blank {
        return Ok(LabelMap::zeros(w, h, labels.classes()));
    }
    if magnitude > w.min(h) / 2 {
        return Err(Error::arg(format!(
            "morphology magnitude {magnitude} too large for {w}x{h} image"
        )));
    }
    if magnitude == 0 && kind != MorphKind::Fracture {
        return Ok(labels.clone());
    }
    let mask = class_mask(labels, class);
    let mut out = labels.clone();
    match kind {
        MorphKind::Dilate => {
            let offsets = disk_offsets(magnitude);
            for y in 0..h {
                for x in 0..w {
                    if mask[y * w + x] {
                        continue;
                    }
                    let hit = offsets.iter().any(|&(dx, dy)| {
                        let nx = x as isize + dx;
                        let ny = y as isize + dy;
                        nx >= 0
                            && ny >= 0
                            && (nx as usize) < w
                            && (ny as usize) < h
                            && mask[ny as usize * w + nx as usize]
                    });
                    if hit {
                        out.set(x, y, class);
                    }
                }
            }
        }
        MorphKind::Erode => {
            let offsets = disk_offsets(magnitude);
            for y in 0..h {
                for x in 0..w {
                    if !mask[y * w + x] {
                        continue;
                    }
                    let keep = offsets.iter().all(|&(dx, dy)| {
                        let nx = x as isize + dx;
                        let ny = y as isize + dy;
                        nx >= 0
                            && ny >= 0
                            && (nx as usize) < w
                            && (ny as usize) < h
                            && mask[ny as usize * w + nx as usize]
                    });
                    if !keep {
                        out.set(x, y, 0);
                    }
                }
            }
        }
        MorphKind::Fracture => {
            let boundary = boundary_pixels(&mask, w, h);
            if boundary.is_empty() || magnitude == 0 {
                return Ok(out);
            }
            let (cx, cy) = boundary[rng.gen_range(0..boundary.len())];
            let angle = rng.gen_range(0.0..PI);
            let (nx, ny) = (-angle.sin(), angle.cos());
            let half = magnitude as f64 / 2.0;
            for y in 0..h {
                for x in 0..w {
                    if !mask[y * w + x] {
                        continue;
                    }
                    let d = nx * (x as f64 - cx as f64) + ny * (y as f64 - cy as f64);
                    if d.abs() <= half {
                        out.set(x, y, 0);
                    }
                }
            }
        }
        MorphKind::Blank => {}
    }
    Ok(out)
}

/// Corrupt a ground-truth map according to one annotator's profile.
pub fn apply_profile(
    gt: &LabelMap,
    profile: &AnnotatorProfile,
    rng: &mut impl Rng,
) -> Result<LabelMap> {
    let class = profile.target_class;
    match profile.kind {
        ProfileKind::Good => {
            if profile.magnitude == 0 {
                return Ok(gt.clone());
            }
            let kind = if rng.gen_bool(0.5) {
                MorphKind::Dilate
            } else {
                MorphKind::Erode
            };
            morph_op(gt, class, kind, profile.magnitude, rng)
        }
        ProfileKind::Over => morph_op(gt, class, MorphKind::Dilate, profile.magnitude, rng),
        ProfileKind::Under => morph_op(gt, class, MorphKind::Erode, profile.magnitude, rng),
        ProfileKind::Wrong => {
            let mut cur = gt.clone();
            for _ in 0..profile.fracture_count {
                cur = morph_op(&cur, class, MorphKind::Fracture, profile.fracture_width, rng)?;
            }
            morph_op(&cur, class, MorphKind::Dilate, profile.magnitude, rng)
        }
        ProfileKind::Blank => morph_op(gt, class, MorphKind::Blank, 0, rng),
    }
}

/// Random filled shapes, one per foreground class, on a noisy background.
/// Image intensity tracks the class index, so the segmentation signal is
/// learnable from a single channel. Deterministic per seed.
pub fn synth_shapes(
    n: usize,
    width: usize,
    height: usize,
    classes: usize,
    seed: &SeedRng,
) -> Result<Vec<(ImageTensor, LabelMap)>> {
    if n == 0 {
        return Err(Error::arg("need at least one image"));
    }
    if classes < 2 || width < 8 || height < 8 {
        return Err(Error::arg("need classes >= 2 and at least 8x8 images"));
    }
    Ok(par::map_indexed(n, |i| {
        let mut rng = seed.child(i as u64).rng();
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut gt = LabelMap::zeros(width, height, classes);
        for class in 1..classes {
            let rectangular = rng.gen_bool(0.5);
            let max_r = (width.min(height) / 4).max(3);
            let rx = rng.gen_range(2..=max_r) as isize;
            let ry = rng.gen_range(2..=max_r) as isize;
            let cx = rng.gen_range(rx as usize..width - rx as usize) as isize;
            let cy = rng.gen_range(ry as usize..height - ry as usize) as isize;
            for y in 0..height as isize {
                for x in 0..width as isize {
                    let (dx, dy) = (x - cx, y - cy);
                    let inside = if rectangular {
                        dx.abs() <= rx && dy.abs() <= ry
                    } else {
                        dx * dx * ry * ry + dy * dy * rx * rx <= rx * rx * ry * ry
                    };
                    if inside {
                        gt.set(x as usize, y as usize, class);
                    }
                }
            }
        }
        let mut image = ImageTensor::zeros(width, height, 1);
        for y in 0..height {
            for x in 0..width {
                let class = gt.get(x, y);
                let base = if class == 0 {
                    0.1
                } else {
                    0.35 + 0.6 * class as f64 / (classes - 1) as f64
                };
                let v = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                image.set(x, y, 0, v);
            }
        }
        (image, gt)
    }))
}

fn read_idx(path: &Path, expect_dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 4];
    file.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("truncated idx header: {e}")))?;
    if header[0] != 0 || header[1] != 0 || header[2] != 0x08 {
        return Err(Error::Format(format!(
            "bad idx magic {:02x}{:02x}{:02x}{:02x}",
            header[0], header[1], header[2], header[3]
        )));
    }
    let ndim = usize::from(header[3]);
    if ndim != expect_dims {
        return Err(Error::Format(format!(
            "expected {expect_dims}-dimensional idx file, found {ndim}"
        )));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut buf = [0u8; 4];
        file.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated idx dims: {e}")))?;
        dims.push(u32::from_be_bytes(buf) as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = vec![0u8; count];
    file.read_exact(&mut data)
        .map_err(|e| Error::Format(format!("truncated idx payload: {e}")))?;
    Ok((dims, data))
}

/// Load an MNIST-style idx image/label file pair as a binary segmentation
/// set: intensities are scaled to `[0, 1]` and a pixel is foreground when
/// its scaled value reaches `threshold`.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    threshold: f64,
) -> Result<Vec<(ImageTensor, LabelMap)>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::arg(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let (dims, data) = read_idx(images_path, 3)?;
    let (label_dims, _digits) = read_idx(labels_path, 1)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if label_dims[0] != n {
        return Err(Error::Format(format!(
            "image/label count mismatch: {n} images, {} labels",
            label_dims[0]
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let chunk = &data[i * h * w..(i + 1) * h * w];
        let values: Vec<f64> = chunk.iter().map(|&b| f64::from(b) / 255.0).collect();
        let labels: Vec<u8> = values
            .iter()
            .map(|&v| u8::from(v >= threshold))
            .collect();
        out.push((
            ImageTensor::new(w, h, 1, values)?,
            LabelMap::new(w, h, 2, labels)?,
        ));
    }
    Ok(out)
}

/// The reference confusion field for a (ground truth, noisy) pair: at each
/// pixel the true class column is one-hot at the observed label and every
/// other column is uniform.
pub fn build_reference_cms(gt: &LabelMap, noisy: &LabelMap) -> Result<ConfusionField> {
    if !gt.same_shape(noisy) {
        return Err(Error::shape(
            format!("{}x{}x{}", gt.width(), gt.height(), gt.classes()),
            format!("{}x{}x{}", noisy.width(), noisy.height(), noisy.classes()),
        ));
    }
    let (w, h, l) = (gt.width(), gt.height(), gt.classes());
    let mut entries = vec![1.0 / l as f64; w * h * l * l];
    for y in 0..h {
        for x in 0..w {
            let j = gt.get(x, y);
            let obs = noisy.get(x, y);
            let base = (y * w + x) * l * l;
            for i in 0..l {
                entries[base + i * l + j] = f64::from(i == obs);
            }
        }
    }
    Ok(ConfusionField::new_unchecked(w, h, l, entries))
}

/// A simulated multi-annotator dataset. `noisy` holds one label map per
/// available (image, annotator) pair; `availability` mirrors its key set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub gt: Vec<LabelMap>,
    pub noisy: BTreeMap<(usize, usize), LabelMap>,
    pub availability: BTreeSet<(usize, usize)>,
    pub profiles: Vec<AnnotatorProfile>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn annotators(&self) -> usize {
        self.profiles.len()
    }

    pub fn classes(&self) -> usize {
        self.gt.first().map_or(0, |g| g.classes())
    }

    /// Available noisy labels for one image, ordered by annotator id.
    pub fn labels_for(&self, image: usize) -> Vec<(usize, &LabelMap)> {
        (0..self.annotators())
            .filter_map(|r| self.noisy.get(&(image, r)).map(|m| (r, m)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.gt.len() {
            return Err(Error::shape(
                format!("{} images", self.images.len()),
                format!("{} ground-truth maps", self.gt.len()),
            ));
        }
        for i in 0..self.len() {
            if self.labels_for(i).is_empty() {
                return Err(Error::arg(format!("image {i} has no noisy labels")));
            }
        }
        for (&(i, r), map) in &self.noisy {
            if i >= self.len() || r >= self.annotators() {
                return Err(Error::arg(format!("noisy label ({i}, {r}) out of range")));
            }
            if !map.same_shape(&self.gt[i]) {
                return Err(Error::shape("noisy label same shape as gt", "mismatch"));
            }
            if !self.availability.contains(&(i, r)) {
                return Err(Error::arg(format!("({i}, {r}) labeled but not available")));
            }
        }
        if self.availability.len() != self.noisy.len() {
            return Err(Error::arg("availability set does not match label map"));
        }
        Ok(())
    }
}

/// Corrupt ground truth with every annotator profile. Each (image,
/// annotator) pair is kept with probability `keep_prob`; at least one
/// annotator always survives per image. Label noise and availability draw
/// from independent per-pair streams, so results are reproducible per seed
/// regardless of thread count.
pub fn simulate_dataset(
    pairs: Vec<(ImageTensor, LabelMap)>,
    profiles: &[AnnotatorProfile],
    keep_prob: f64,
    seed: &SeedRng,
) -> Result<Dataset> {
    if pairs.is_empty() || profiles.is_empty() {
        return Err(Error::arg("need at least one image and one profile"));
    }
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::arg(format!(
            "keep probability must lie in (0, 1], got {keep_prob}"
        )));
    }
    let r_count = profiles.len();
    let profiles_vec = profiles.to_vec();
    let (images, gt): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let per_image: Vec<Result<Vec<(usize, LabelMap)>>> = par::map_indexed(gt.len(), |i| {
        let g = &gt[i];
        let mut kept = Vec::new();
        for (r, profile) in profiles_vec.iter().enumerate() {
            let pair = (i * r_count + r) as u64;
            let mut label_rng = seed.child(pair * 2).rng();
            let noisy = apply_profile(g, profile, &mut label_rng)?;
            let mut avail_rng = seed.child(pair * 2 + 1).rng();
            if avail_rng.gen_bool(keep_prob) {
                kept.push((r, noisy));
            }
        }
        if kept.is_empty() {
            let mut pick_rng = seed.child((i * r_count) as u64 * 2 + 1).rng();
            let r = pick_rng.gen_range(0..r_count);
            let mut label_rng = seed.child(((i * r_count + r) as u64) * 2).rng();
            kept.push((r, apply_profile(g, &profiles_vec[r], &mut label_rng)?));
        }
        Ok(kept)
    });
    let mut noisy = BTreeMap::new();
    let mut availability = BTreeSet::new();
    for (i, kept) in per_image.into_iter().enumerate() {
        for (r, map) in kept? {
            availability.insert((i, r));
            noisy.insert((i, r), map);
        }
    }
    let ds = Dataset {
        images,
        gt,
        noisy,
        availability,
        profiles: profiles_vec,
        seed: seed.seed(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Reduce a dataset to the single-label regime: exactly one available
/// annotator per image, chosen uniformly among those present.
pub fn thin_to_single(dataset: &mut Dataset, seed: &SeedRng) -> Result<()> {
    dataset.validate()?;
    for i in 0..dataset.len() {
        let present: Vec<usize> = dataset
            .labels_for(i)
            .iter()
            .map(|(r, _)| *r)
            .collect();
        if present.is_empty() {
            return Err(Error::arg(format!("image {i} has no annotator labels")));
        }
        let keep = present[seed.child(i as u64).rng().gen_range(0..present.len())];
        for r in present {
            if r != keep {
                dataset.availability.remove(&(i, r));
                dataset.noisy.remove(&(i, r));
            }
        }
    }
    dataset.validate()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub classes: usize,
    pub annotators: Vec<usize>,
    pub seed: u64,
    pub availability: Vec<(usize, usize)>,
    pub profiles: Vec<AnnotatorProfile>,
}

impl Dataset {
    /// Write manifest.json plus stacked tensors into `dir`. Noisy labels are
    /// stored one stacked tensor per annotator; unavailable slots stay
    /// all-background and are excluded by the manifest's availability list.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let (w, h, c) = (
            self.images[0].width(),
            self.images[0].height(),
            self.images[0].channels(),
        );
        let l = self.classes();
        let n = self.len();
        let manifest = DatasetManifest {
            count: n,
            width: w,
            height: h,
            channels: c,
            classes: l,
            annotators: (0..self.annotators()).collect(),
            seed: self.seed,
            availability: self.availability.iter().cloned().collect(),
            profiles: self.profiles.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(dir.join("manifest.json"), json)?;

        let mut image_data = Vec::with_capacity(n * h * w * c);
        for img in &self.images {
            image_data.extend_from_slice(img.values());
        }
        tensor_io::write_tensor(
            &dir.join("images.nlsg"),
            &RawTensor::f64(vec![n, h, w, c], image_data)?,
        )?;

        let mut gt_data = Vec::with_capacity(n * h * w);
        for g in &self.gt {
            gt_data.extend_from_slice(g.labels());
        }
        tensor_io::write_tensor(
            &dir.join("gt.nlsg"),
            &RawTensor::u8(vec![n, h, w], gt_data)?,
        )?;

        for r in 0..self.annotators() {
            let mut data = vec![0u8; n * h * w];
            for i in 0..n {
                if let Some(map) = self.noisy.get(&(i, r)) {
                    data[i * h * w..(i + 1) * h * w].copy_from_slice(map.labels());
                }
            }
            tensor_io::write_tensor(
                &dir.join(format!("noisy_{r:02}.nlsg")),
                &RawTensor::u8(vec![n, h, w], data)?,
            )?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        let json = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: DatasetManifest = serde_json::from_str(&json)?;
        let (n, w, h, c, l) = (
            manifest.count,
            manifest.width,
            manifest.height,
            manifest.channels,
            manifest.classes,
        );
        let images_t = tensor_io::read_tensor(&dir.join("images.nlsg"))?;
        images_t.expect_rank(4)?;
        if images_t.dims != vec![n, h, w, c] {
            return Err(Error::Format("images tensor disagrees with manifest".into()));
        }
        let image_data = images_t.as_f64()?;
        let mut images = Vec::with_capacity(n);
        for i in 0..n {
            images.push(ImageTensor::new(
                w,
                h,
                c,
                image_data[i * h * w * c..(i + 1) * h * w * c].to_vec(),
            )?);
        }
        let gt_t = tensor_io::read_tensor(&dir.join("gt.nlsg"))?;
        gt_t.expect_rank(3)?;
        if gt_t.dims != vec![n, h, w] {
            return Err(Error::Format("gt tensor disagrees with manifest".into()));
        }
        let gt_data = gt_t.as_u8()?;
        let mut gt = Vec::with_capacity(n);
        for i in 0..n {
            gt.push(LabelMap::new(
                w,
                h,
                l,
                gt_data[i * h * w..(i + 1) * h * w].to_vec(),
            )?);
        }
        let availability: BTreeSet<(usize, usize)> =
            manifest.availability.iter().cloned().collect();
        let mut noisy = BTreeMap::new();
        for &r in &manifest.annotators {
            let t = tensor_io::read_tensor(&dir.join(format!("noisy_{r:02}.nlsg")))?;
            t.expect_rank(3)?;
            if t.dims != vec![n, h, w] {
                return Err(Error::Format(format!(
                    "noisy tensor for annotator {r} disagrees with manifest"
                )));
            }
            let data = t.as_u8()?;
            for i in 0..n {
                if availability.contains(&(i, r)) {
                    noisy.insert(
                        (i, r),
                        LabelMap::new(w, h, l, data[i * h * w..(i + 1) * h * w].to_vec())?,
                    );
                }
            }
        }
        let ds = Dataset {
            images,
            gt,
            noisy,
            availability,
            profiles: manifest.profiles,
            seed: manifest.seed,
        };
        ds.validate()?;
        Ok(ds)
    }
}
