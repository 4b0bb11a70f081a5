//! Datasets: IDX ingestion, synthetic glyphs and outliers, known/unknown
//! splits and area-average downscaling.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Label carried by samples that belong to no known class.
pub const UNKNOWN_LABEL: i64 = -1;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Images in `[0, 1]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<i64>,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<i64>, class_names: Option<Vec<String>>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!("dataset images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Length(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l < UNKNOWN_LABEL) {
            return Err(Error::Domain(format!("invalid label {l}")));
        }
        if let Some(names) = &class_names {
            if let Some(l) = labels.iter().find(|&&l| l >= names.len() as i64) {
                return Err(Error::Domain(format!("label {l} has no class name ({} names)", names.len())));
            }
        }
        Ok(Dataset { images, labels, class_names })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset { images, labels, class_names: self.class_names.clone() })
    }

    /// Appends `other`; image shapes must agree. Class names are dropped when
    /// the two sides disagree.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.image_shape() != other.image_shape() {
            return Err(Error::Shape(format!(
                "cannot concatenate images {:?} and {:?}",
                self.image_shape(),
                other.image_shape()
            )));
        }
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let [c, h, w] = self.image_shape();
        let images = Tensor::new(vec![self.len() + other.len(), c, h, w], data)?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let names = if self.class_names == other.class_names { self.class_names.clone() } else { None };
        Ok(Dataset { images, labels, class_names: names })
    }

    /// Replaces every label.
    pub fn relabel(&self, label: i64) -> Dataset {
        Dataset { images: self.images.clone(), labels: vec![label; self.len()], class_names: None }
    }

    /// Labels as class indices, checking that all lie in `[0, k)`.
    pub fn class_indices(&self, k: usize) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|&l| {
                if l >= 0 && (l as usize) < k {
                    Ok(l as usize)
                } else {
                    Err(Error::Domain(format!("label {l} outside [0, {k})")))
                }
            })
            .collect()
    }

    /// Images `indices` stacked into one `[n, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        self.images.select_rows(indices)
    }
}

fn read_u32(cur: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    cur.read_u32::<BigEndian>()
        .map_err(|_| Error::Length(format!("file ends inside the {what} header field")))
}

fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut cur = Cursor::new(bytes);
    let magic = read_u32(&mut cur, "magic")?;
    if magic != IDX_IMAGES {
        return Err(Error::Format { offset: 0, message: format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}") });
    }
    let n = read_u32(&mut cur, "count")? as usize;
    let rows = read_u32(&mut cur, "rows")? as usize;
    let cols = read_u32(&mut cur, "cols")? as usize;
    let need = n * rows * cols;
    let mut px = Vec::with_capacity(need);
    cur.take(need as u64).read_to_end(&mut px)?;
    if px.len() < need {
        return Err(Error::Length(format!("image file holds {} of {need} pixel bytes", px.len())));
    }
    Ok((n, rows, cols, px.into_iter().map(|b| b as f64 / 255.0).collect()))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<i64>> {
    let mut cur = Cursor::new(bytes);
    let magic = read_u32(&mut cur, "magic")?;
    if magic != IDX_LABELS {
        return Err(Error::Format { offset: 0, message: format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}") });
    }
    let n = read_u32(&mut cur, "count")? as usize;
    let mut raw = Vec::with_capacity(n);
    cur.take(n as u64).read_to_end(&mut raw)?;
    if raw.len() < n {
        return Err(Error::Length(format!("label file holds {} of {n} labels", raw.len())));
    }
    Ok(raw.into_iter().map(i64::from).collect())
}

/// Reads an MNIST-style IDX image/label pair. Pixels are scaled by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (n, rows, cols, px) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::Length(format!("image file has {n} images but label file has {} labels", labels.len())));
    }
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], px)?, labels, None)
}

/// Writes a single-channel dataset as an IDX pair (pixels rounded to bytes,
/// labels must fit in a byte).
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(Error::Unsupported(format!("IDX export of {c}-channel images")));
    }
    let mut img = Vec::with_capacity(16 + ds.images.numel());
    img.write_u32::<BigEndian>(IDX_IMAGES)?;
    for d in [ds.len(), h, w] {
        img.write_u32::<BigEndian>(d as u32)?;
    }
    img.extend(ds.images.data().iter().map(|v| (v * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.write_u32::<BigEndian>(IDX_LABELS)?;
    lab.write_u32::<BigEndian>(ds.len() as u32)?;
    for &l in &ds.labels {
        let b = u8::try_from(l).map_err(|_| Error::Unsupported(format!("label {l} does not fit an IDX byte")))?;
        lab.push(b);
    }
    fs::File::create(images_path)?.write_all(&img)?;
    fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

/// `n` images of iid `U[0,1]` pixels, all labelled [`UNKNOWN_LABEL`].
pub fn gen_noise_dataset(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("noise dataset needs at least one image".into()));
    }
    let mut r = rng::stream(seed, "noise", 0);
    let images = Tensor::from_fn(&[n, c, h, w], |_| r.random::<f64>());
    Dataset::new(images, vec![UNKNOWN_LABEL; n], None)
}

/// `clamp(pixel + u, 0, 1)` with `u ~ U[0,1]` per pixel; labels become
/// [`UNKNOWN_LABEL`].
pub fn gen_mnist_noise(base: &Dataset, seed: u64) -> Result<Dataset> {
    if base.is_empty() {
        return Err(Error::Contract("noisy copy of an empty dataset".into()));
    }
    let mut r = rng::stream(seed, "mnist-noise", 0);
    let data = base.images.data().iter().map(|p| (p + r.random::<f64>()).clamp(0.0, 1.0)).collect();
    let images = Tensor::new(base.images.shape().to_vec(), data)?;
    Dataset::new(images, vec![UNKNOWN_LABEL; base.len()], None)
}

/// Stroke glyphs for the synthetic structured dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    HBar,
    VBar,
    Diagonal,
    Ring,
    Cross,
    Plus,
    Square,
    Triangle,
}

impl Glyph {
    pub const ALL: [Glyph; 8] =
        [Glyph::HBar, Glyph::VBar, Glyph::Diagonal, Glyph::Ring, Glyph::Cross, Glyph::Plus, Glyph::Square, Glyph::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Glyph::HBar => "hbar",
            Glyph::VBar => "vbar",
            Glyph::Diagonal => "diagonal",
            Glyph::Ring => "ring",
            Glyph::Cross => "cross",
            Glyph::Plus => "plus",
            Glyph::Square => "square",
            Glyph::Triangle => "triangle",
        }
    }

    // Line segments in [-1, 1]² (ring handled separately).
    fn segments(self) -> Vec<[f64; 4]> {
        let d = 0.6;
        match self {
            Glyph::HBar => vec![[-0.7, 0.0, 0.7, 0.0]],
            Glyph::VBar => vec![[0.0, -0.7, 0.0, 0.7]],
            Glyph::Diagonal => vec![[-d, -d, d, d]],
            Glyph::Ring => vec![],
            Glyph::Cross => vec![[-d, -d, d, d], [-d, d, d, -d]],
            Glyph::Plus => vec![[-0.7, 0.0, 0.7, 0.0], [0.0, -0.7, 0.0, 0.7]],
            Glyph::Square => vec![[-d, -d, d, -d], [d, -d, d, d], [d, d, -d, d], [-d, d, -d, -d]],
            Glyph::Triangle => vec![[-0.65, 0.55, 0.65, 0.55], [0.65, 0.55, 0.0, -0.65], [0.0, -0.65, -0.65, 0.55]],
        }
    }
}

fn segment_distance(px: f64, py: f64, s: &[f64; 4]) -> f64 {
    let (ax, ay, bx, by) = (s[0], s[1], s[2], s[3]);
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

/// Renders one jittered glyph into a `size × size` image.
pub fn render_glyph<R: Rng + ?Sized>(glyph: Glyph, size: usize, rng: &mut R) -> Vec<f64> {
    let angle: f64 = rng.random_range(-0.25..0.25);
    let scale: f64 = rng.random_range(0.8..1.15);
    let (ox, oy): (f64, f64) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let width: f64 = rng.random_range(0.09..0.15);
    let ring_r: f64 = rng.random_range(0.45..0.65);
    let noise = Normal::new(0.0, 0.04).expect("valid normal");
    let (sin, cos) = angle.sin_cos();
    let segs = glyph.segments();
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            // Pixel centre in [-1, 1]², mapped into the glyph frame.
            let y = (2.0 * i as f64 + 1.0) / size as f64 - 1.0 - oy;
            let x = (2.0 * j as f64 + 1.0) / size as f64 - 1.0 - ox;
            let (gx, gy) = ((cos * x + sin * y) / scale, (-sin * x + cos * y) / scale);
            let d = if glyph == Glyph::Ring {
                ((gx * gx + gy * gy).sqrt() - ring_r).abs()
            } else {
                segs.iter().map(|s| segment_distance(gx, gy, s)).fold(f64::INFINITY, f64::min)
            };
            let v = (-(d * d) / (2.0 * width * width)).exp() + noise.sample(rng);
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

/// `per_class` jittered renderings of each glyph in `glyphs`; the label of a
/// sample is the glyph's position in [`Glyph::ALL`].
pub fn gen_glyphs(glyphs: &[Glyph], per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    let mut data = Vec::with_capacity(glyphs.len() * per_class * size * size);
    let mut labels = Vec::with_capacity(glyphs.len() * per_class);
    for &g in glyphs {
        let id = Glyph::ALL.iter().position(|&a| a == g).expect("glyph listed in ALL");
        let mut r = rng::stream(seed, "glyph", id as u64);
        for _ in 0..per_class {
            data.extend(render_glyph(g, size, &mut r));
            labels.push(id as i64);
        }
    }
    let names = Glyph::ALL.iter().map(|g| g.name().to_string()).collect();
    Dataset::new(Tensor::new(vec![labels.len(), 1, size, size], data)?, labels, Some(names))
}

/// Where the unknown test samples of a split come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownSource {
    /// Every sample of these original classes.
    HeldoutClasses(Vec<i64>),
    /// Supplied separately by the caller; the split leaves the unknown set empty.
    ExternalDataset(String),
    /// Generated outliers, one per known test sample.
    Synthetic { kind: OutlierKind, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierKind {
    Noise,
    MnistNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub known_classes: Vec<i64>,
    pub unknown_source: UnknownSource,
    /// Fraction of each known class routed to the known test set.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub known_test: Dataset,
    pub unknown_test: Dataset,
    /// `remap[k]` is the original label of remapped class `k`.
    pub remap: Vec<i64>,
}

/// Partitions `ds` into remapped known train/test sets and an unknown test set.
pub fn make_split(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    let known = &spec.known_classes;
    if known.is_empty() {
        return Err(Error::Spec("no known classes".into()));
    }
    for (i, k) in known.iter().enumerate() {
        if known[..i].contains(k) {
            return Err(Error::Spec(format!("known class {k} listed twice")));
        }
        if *k < 0 {
            return Err(Error::Spec(format!("known class {k} is negative")));
        }
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::Spec(format!("test fraction {} outside [0, 1)", spec.test_fraction)));
    }
    if let UnknownSource::HeldoutClasses(h) = &spec.unknown_source {
        if let Some(c) = h.iter().find(|c| known.contains(c)) {
            return Err(Error::Spec(format!("class {c} is both known and held out")));
        }
    }
    let mut r = rng::stream(spec.seed, "split", 0);
    let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
    let (mut train_lab, mut test_lab) = (Vec::new(), Vec::new());
    for (new, &orig) in known.iter().enumerate() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == orig).collect();
        if idx.is_empty() {
            return Err(Error::Spec(format!("known class {orig} has no samples")));
        }
        idx.shuffle(&mut r);
        let n_test = (idx.len() as f64 * spec.test_fraction).round() as usize;
        let (te, tr) = idx.split_at(n_test);
        test_idx.extend_from_slice(te);
        test_lab.extend(std::iter::repeat_n(new as i64, te.len()));
        train_idx.extend_from_slice(tr);
        train_lab.extend(std::iter::repeat_n(new as i64, tr.len()));
    }
    let names = ds.class_names.as_ref().map(|n| known.iter().map(|&k| n.get(k as usize).cloned().unwrap_or_default()).collect());
    let train = Dataset::new(ds.images.select_rows(&train_idx)?, train_lab, names.clone())?;
    let known_test = Dataset::new(ds.images.select_rows(&test_idx)?, test_lab, names)?;
    let [c, h, w] = ds.image_shape();
    let unknown_test = match &spec.unknown_source {
        UnknownSource::HeldoutClasses(held) => {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| held.contains(&ds.labels[i])).collect();
            ds.subset(&idx)?.relabel(UNKNOWN_LABEL)
        }
        UnknownSource::ExternalDataset(_) => empty(c, h, w)?,
        UnknownSource::Synthetic { kind, seed } if !known_test.is_empty() => match kind {
            OutlierKind::Noise => gen_noise_dataset(known_test.len(), c, h, w, *seed)?,
            OutlierKind::MnistNoise => gen_mnist_noise(&known_test, *seed)?,
        },
        UnknownSource::Synthetic { .. } => empty(c, h, w)?,
    };
    Ok(Split { train, known_test, unknown_test, remap: known.clone() })
}

fn empty(c: usize, h: usize, w: usize) -> Result<Dataset> {
    Dataset::new(Tensor::zeros(&[0, c, h, w]), Vec::new(), None)
}

/// Area-average resampling to `h × w`; both must not exceed the source size.
pub fn downscale(ds: &Dataset, h: usize, w: usize) -> Result<Dataset> {
    let [c, sh, sw] = ds.image_shape();
    if h == 0 || w == 0 {
        return Err(Error::Contract("target size must be at least 1x1".into()));
    }
    if h > sh || w > sw {
        return Err(Error::Unsupported(format!("upscaling {sh}x{sw} to {h}x{w}")));
    }
    if (h, w) == (sh, sw) {
        return Ok(ds.clone());
    }
    // Overlap of source cell s with output cell o along one axis, in source units.
    let weights = |src: usize, dst: usize| -> Vec<Vec<(usize, f64)>> {
        let ratio = src as f64 / dst as f64;
        (0..dst)
            .map(|o| {
                let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
                (lo.floor() as usize..(hi.ceil() as usize).min(src))
                    .map(|s| (s, (hi.min(s as f64 + 1.0) - lo.max(s as f64)) / ratio))
                    .filter(|&(_, wt)| wt > 0.0)
                    .collect()
            })
            .collect()
    };
    let (wy, wx) = (weights(sh, h), weights(sw, w));
    let src = ds.images.data();
    let n = ds.len();
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        let base = plane * sh * sw;
        for ry in &wy {
            for rx in &wx {
                let mut acc = 0.0;
                for &(sy, a) in ry {
                    for &(sx, b) in rx {
                        acc += a * b * src[base + sy * sw + sx];
                    }
                }
                out.push(acc.clamp(0.0, 1.0));
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], out)?, ds.labels.clone(), ds.class_names.clone())
}

/// Everything needed to regenerate a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Manifest {
    Glyphs { seed: u64, glyphs: Vec<Glyph>, per_class: usize, size: usize },
    Noise { seed: u64, dims: [usize; 3], count: usize },
}

impl Manifest {
    pub fn generate(&self) -> Result<Dataset> {
        match self {
            Manifest::Glyphs { seed, glyphs, per_class, size } => gen_glyphs(glyphs, *per_class, *size, *seed),
            Manifest::Noise { seed, dims: [c, h, w], count } => gen_noise_dataset(*count, *c, *h, *w, *seed),
        }
    }
}
