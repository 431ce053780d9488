//! Datasets, label corruption, IDX ingestion and mini-batching.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::Tensor;
use crate::error::{Error, IdxError, Result};
use crate::rng::{standard_normal, substream};

/// Labelled samples with features in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    clean_labels: Option<Vec<usize>>,
    is_outlier: Option<Vec<bool>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            clean_labels: None,
            is_outlier: None,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_clean_labels(mut self, clean: Vec<usize>) -> Result<Self> {
        self.clean_labels = Some(clean);
        self.validate()?;
        Ok(self)
    }

    pub fn with_outlier_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        self.is_outlier = Some(mask);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.features.shape().len() != 2 || self.features.rows() != n {
            return Err(Error::Shape {
                op: "dataset",
                left: self.features.shape().to_vec(),
                right: vec![n],
            });
        }
        if self.num_classes < 1 {
            return Err(Error::Contract("dataset needs at least one class".into()));
        }
        if let Some((i, v)) = self
            .features
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Contract(format!("feature {i} = {v} lies outside [0, 1]")));
        }
        let check_labels = |labels: &[usize]| -> Result<()> {
            match labels.iter().find(|&&l| l >= self.num_classes) {
                Some(&l) => Err(Error::Index {
                    what: "label",
                    index: l,
                    bound: self.num_classes,
                }),
                None => Ok(()),
            }
        };
        check_labels(&self.labels)?;
        if let Some(clean) = &self.clean_labels {
            if clean.len() != n {
                return Err(Error::Shape {
                    op: "clean labels",
                    left: vec![clean.len()],
                    right: vec![n],
                });
            }
            check_labels(clean)?;
        }
        if let Some(mask) = &self.is_outlier {
            if mask.len() != n {
                return Err(Error::Shape {
                    op: "outlier mask",
                    left: vec![mask.len()],
                    right: vec![n],
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn clean_labels(&self) -> Option<&[usize]> {
        self.clean_labels.as_deref()
    }

    pub fn is_outlier(&self) -> Option<&[bool]> {
        self.is_outlier.as_deref()
    }

    /// Clean labels when recorded, otherwise the observed ones.
    pub fn ground_truth(&self) -> &[usize] {
        self.clean_labels.as_deref().unwrap_or(&self.labels)
    }

    /// Fraction of observed labels that differ from the clean labels.
    pub fn corruption_rate(&self) -> f64 {
        match &self.clean_labels {
            None => 0.0,
            Some(clean) if !clean.is_empty() => {
                let flipped = clean.iter().zip(&self.labels).filter(|(a, b)| a != b).count();
                flipped as f64 / clean.len() as f64
            }
            Some(_) => 0.0,
        }
    }

    /// Features and labels of the samples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        let x = Tensor::matrix(indices.len(), d, data).expect("sized above");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (features, labels) = self.batch(indices);
        Dataset {
            features,
            labels,
            clean_labels: self
                .clean_labels
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            is_outlier: self
                .is_outlier
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i]).collect()),
            num_classes: self.num_classes,
        }
    }

    /// Seeded split into `(train, held_out)` with `round(fraction * n)` held out.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "held-out fraction must be in [0, 1), got {fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut substream(seed, "split", 0));
        let held = ((fraction * self.len() as f64).round() as usize).min(self.len() - 1);
        let (held_idx, train_idx) = idx.split_at(held);
        let mut train_idx = train_idx.to_vec();
        let mut held_idx = held_idx.to_vec();
        train_idx.sort_unstable();
        held_idx.sort_unstable();
        Ok((self.subset(&train_idx), self.subset(&held_idx)))
    }

    fn replace_labels(&self, labels: Vec<usize>) -> Dataset {
        Dataset {
            features: self.features.clone(),
            clean_labels: Some(self.ground_truth().to_vec()),
            labels,
            is_outlier: self.is_outlier.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// How to corrupt labels.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseSpec {
    /// Each label, with probability `gamma`, is resampled among the other classes.
    Symmetric { gamma: f64 },
    /// Each label whose clean class is a key of the map flips to its image
    /// with probability `gamma`.
    Asymmetric { gamma: f64, flip_map: FlipMap },
}

impl NoiseSpec {
    pub fn gamma(&self) -> f64 {
        match self {
            NoiseSpec::Symmetric { gamma } | NoiseSpec::Asymmetric { gamma, .. } => *gamma,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NoiseSpec::Symmetric { .. } => "symmetric",
            NoiseSpec::Asymmetric { .. } => "asymmetric",
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, ds: &Dataset, rng: &mut R) -> Result<Dataset> {
        match self {
            NoiseSpec::Symmetric { gamma } => inject_symmetric_noise(ds, *gamma, rng),
            NoiseSpec::Asymmetric { gamma, flip_map } => inject_asymmetric_noise(ds, *gamma, flip_map, rng),
        }
    }
}

/// Class-to-class flip map for asymmetric noise.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlipMap(BTreeMap<usize, usize>);

impl FlipMap {
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self(pairs.into_iter().collect())
    }

    /// MNIST: 2 -> 7, 3 -> 8, 5 <-> 6, 7 -> 1.
    pub fn mnist() -> Self {
        Self::new([(2, 7), (3, 8), (5, 6), (6, 5), (7, 1)])
    }

    pub fn get(&self, class: usize) -> Option<usize> {
        self.0.get(&class).copied()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().map(|(&a, &b)| (a, b))
    }

    /// Parses `"2:7,3:8"` or the preset name `mnist`.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim() == "mnist" {
            return Ok(Self::mnist());
        }
        text.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|pair| {
                let (a, b) = pair
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("flip map entry `{pair}` is not `from:to`")))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("flip map class `{s}` is not an integer")))
                };
                Ok((parse(a)?, parse(b)?))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        for (a, b) in self.pairs() {
            if a >= num_classes || b >= num_classes {
                return Err(Error::Config(format!(
                    "flip map entry {a}->{b} is outside {num_classes} classes"
                )));
            }
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!(
            "noise rate must be in [0, 1], got {gamma}"
        )));
    }
    Ok(())
}

/// Single pass over the samples; a selected label is redrawn uniformly from
/// the `C - 1` classes other than its clean class.
pub fn inject_symmetric_noise<R: Rng + ?Sized>(ds: &Dataset, gamma: f64, rng: &mut R) -> Result<Dataset> {
    check_gamma(gamma)?;
    let c = ds.num_classes;
    if c < 2 && gamma > 0.0 {
        return Err(Error::Config("symmetric noise needs at least 2 classes".into()));
    }
    let labels = ds
        .ground_truth()
        .iter()
        .zip(&ds.labels)
        .map(|(&clean, &current)| {
            if rng.gen::<f64>() < gamma {
                let draw = rng.gen_range(0..c - 1);
                if draw >= clean {
                    draw + 1
                } else {
                    draw
                }
            } else {
                current
            }
        })
        .collect();
    Ok(ds.replace_labels(labels))
}

pub fn inject_asymmetric_noise<R: Rng + ?Sized>(
    ds: &Dataset,
    gamma: f64,
    flip_map: &FlipMap,
    rng: &mut R,
) -> Result<Dataset> {
    check_gamma(gamma)?;
    flip_map.validate(ds.num_classes)?;
    let labels = ds
        .ground_truth()
        .iter()
        .zip(&ds.labels)
        .map(|(&clean, &current)| match flip_map.get(clean) {
            Some(target) if rng.gen::<f64>() < gamma => target,
            _ => current,
        })
        .collect();
    Ok(ds.replace_labels(labels))
}

/// One Gaussian component of a 2-D synthetic dataset. A class may be made
/// of several components.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub label: usize,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub count: usize,
}

/// Relabels the sample of `class` nearest to `near` (raw coordinates) to the
/// next class, `(class + 1) % C`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutlierInjection {
    pub class: usize,
    pub near: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSpec {
    pub components: Vec<GaussianComponent>,
    pub outliers: Vec<OutlierInjection>,
}

fn iso(label: usize, mean: [f64; 2], var: f64, count: usize) -> GaussianComponent {
    GaussianComponent {
        label,
        mean,
        cov: [[var, 0.0], [0.0, var]],
        count,
    }
}

impl GaussianSpec {
    /// Number of classes: one more than the largest component label.
    pub fn num_classes(&self) -> usize {
        self.components.iter().map(|c| c.label + 1).max().unwrap_or(0)
    }

    /// Two classes of 100 points with unequal spread, one label-flipped sample
    /// per class on the far side of its cloud.
    pub fn figure1_balanced() -> Self {
        Self {
            components: vec![iso(0, [-1.5, 0.0], 0.2, 100), iso(1, [1.5, 0.0], 0.02, 100)],
            outliers: vec![
                OutlierInjection {
                    class: 0,
                    near: [-2.0, 0.0],
                },
                OutlierInjection {
                    class: 1,
                    near: [1.7, 0.0],
                },
            ],
        }
    }

    /// 180 / 20 imbalanced classes with one flipped sample in the majority class.
    pub fn figure1_imbalanced() -> Self {
        Self {
            components: vec![
                GaussianComponent {
                    label: 0,
                    mean: [0.0, 0.0],
                    cov: [[1.0, 0.3], [0.3, 0.6]],
                    count: 180,
                },
                iso(1, [2.5, 2.0], 0.2, 20),
            ],
            outliers: vec![OutlierInjection {
                class: 0,
                near: [2.0, 1.5],
            }],
        }
    }

    /// Two well separated clouds, no outliers.
    pub fn separable() -> Self {
        Self {
            components: vec![iso(0, [-2.0, -2.0], 0.1, 50), iso(1, [2.0, 2.0], 0.1, 50)],
            outliers: vec![],
        }
    }
}

fn cholesky2(cov: &[[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let [[a, b], [c, d]] = *cov;
    if (b - c).abs() > 1e-12 || a <= 0.0 || a * d - b * b <= 0.0 {
        return Err(Error::Config(format!(
            "covariance {cov:?} is not symmetric positive definite"
        )));
    }
    let l11 = a.sqrt();
    let l21 = b / l11;
    let l22 = (d - l21 * l21).sqrt();
    Ok([[l11, 0.0], [l21, l22]])
}

/// Samples each class, applies the outlier relabelling, then rescales every
/// coordinate affinely onto `[0, 1]`.
pub fn gen_gaussian_2d<R: Rng + ?Sized>(spec: &GaussianSpec, rng: &mut R) -> Result<Dataset> {
    let num_classes = spec.num_classes();
    if num_classes < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    if let Some(empty) =
        (0..num_classes).find(|&c| spec.components.iter().all(|g| g.label != c || g.count == 0))
    {
        return Err(Error::Config(format!("class {empty} has zero samples")));
    }
    let mut points: Vec<[f64; 2]> = Vec::new();
    let mut clean = Vec::new();
    for comp in &spec.components {
        let l = cholesky2(&comp.cov)?;
        for _ in 0..comp.count {
            let (z1, z2) = (standard_normal(rng), standard_normal(rng));
            points.push([
                comp.mean[0] + l[0][0] * z1,
                comp.mean[1] + l[1][0] * z1 + l[1][1] * z2,
            ]);
            clean.push(comp.label);
        }
    }

    let mut labels = clean.clone();
    let mut outlier = vec![false; points.len()];
    for inj in &spec.outliers {
        if inj.class >= num_classes {
            return Err(Error::Config(format!(
                "outlier class {} does not exist",
                inj.class
            )));
        }
        let dist = |p: &[f64; 2]| (p[0] - inj.near[0]).powi(2) + (p[1] - inj.near[1]).powi(2);
        let target = (0..points.len())
            .filter(|&i| clean[i] == inj.class && !outlier[i])
            .min_by(|&i, &j| dist(&points[i]).total_cmp(&dist(&points[j])))
            .ok_or_else(|| Error::Config(format!("no sample left in class {} to flip", inj.class)))?;
        outlier[target] = true;
        labels[target] = (inj.class + 1) % num_classes;
    }

    let mut data = Vec::with_capacity(points.len() * 2);
    let (lo, hi) = (0..2).fold(
        ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]),
        |(mut lo, mut hi), c| {
            for p in &points {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
            (lo, hi)
        },
    );
    for p in &points {
        for c in 0..2 {
            let span = hi[c] - lo[c];
            let v = if span > 0.0 { (p[c] - lo[c]) / span } else { 0.5 };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Dataset::new(Tensor::matrix(points.len(), 2, data)?, labels, num_classes)?
        .with_clean_labels(clean)?
        .with_outlier_mask(outlier)
}

/// Shuffled index batches for one epoch; the last batch may be short.
/// Deterministic in `(seed, epoch)`.
pub fn minibatches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "minibatch", epoch as u64));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// IDX files as used by MNIST.
pub mod idx {
    use super::*;

    pub const IMAGES_MAGIC: u32 = 0x0000_0803;
    pub const LABELS_MAGIC: u32 = 0x0000_0801;

    fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or(IdxError::Truncated {
                offset,
                needed: 4,
                available: bytes.len().saturating_sub(offset),
            })
    }

    fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
        let found = read_u32(bytes, 0)?;
        if found != expected {
            return Err(IdxError::BadMagic {
                offset: 0,
                expected,
                found,
            });
        }
        Ok(())
    }

    fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8], IdxError> {
        bytes.get(offset..offset + len).ok_or(IdxError::Truncated {
            offset,
            needed: len,
            available: bytes.len().saturating_sub(offset),
        })
    }

    /// Returns `(count, rows * cols, pixels)`.
    pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, &[u8]), IdxError> {
        check_magic(bytes, IMAGES_MAGIC)?;
        let count = read_u32(bytes, 4)? as usize;
        let rows = read_u32(bytes, 8)? as usize;
        let cols = read_u32(bytes, 12)? as usize;
        let dim = rows * cols;
        Ok((count, dim, payload(bytes, 16, count * dim)?))
    }

    pub fn parse_labels(bytes: &[u8]) -> Result<&[u8], IdxError> {
        check_magic(bytes, LABELS_MAGIC)?;
        let count = read_u32(bytes, 4)? as usize;
        payload(bytes, 8, count)
    }

    /// Images scaled by 1/255; the class count is inferred from the largest label.
    pub fn decode(images: &[u8], labels: &[u8]) -> Result<Dataset> {
        let (count, dim, pixels) = parse_images(images)?;
        let label_bytes = parse_labels(labels)?;
        if label_bytes.len() != count {
            return Err(IdxError::CountMismatch {
                offset: 4,
                images: count,
                labels: label_bytes.len(),
            }
            .into());
        }
        let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        let labels: Vec<usize> = label_bytes.iter().map(|&l| usize::from(l)).collect();
        let num_classes = labels.iter().max().map_or(1, |m| m + 1);
        Dataset::new(Tensor::matrix(count, dim, features)?, labels, num_classes)
    }

    pub fn encode_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + pixels.len());
        for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(pixels);
        out
    }

    pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + labels.len());
        out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let images = read(images_path.as_ref())?;
    let labels = read(labels_path.as_ref())?;
    idx::decode(&images, &labels)
}

/// Loads `images-idx3-ubyte` / `labels-idx1-ubyte` from a directory.
pub fn load_idx_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    load_idx(dir.join("images-idx3-ubyte"), dir.join("labels-idx1-ubyte"))
}

/// Plot-ready CSV: `feature_0..feature_{d-1},label,clean_label,is_outlier`.
pub fn write_csv<W: std::io::Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("feature_{j}")).collect();
    header.extend(["label", "clean_label", "is_outlier"].map(String::from));
    w.write_record(&header)?;
    let clean = ds.ground_truth();
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.labels[i].to_string());
        rec.push(clean[i].to_string());
        let outlier = ds.is_outlier.as_ref().is_some_and(|m| m[i]);
        rec.push(u8::from(outlier).to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(ds, std::io::BufWriter::new(file))
}

/// Reads the format produced by [`write_csv`]. `num_classes` defaults to
/// one more than the largest label seen.
pub fn read_csv<R: std::io::Read>(input: R, num_classes: Option<usize>) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let d = header.iter().take_while(|h| h.starts_with("feature_")).count();
    let expected: Vec<String> = (0..d)
        .map(|j| format!("feature_{j}"))
        .chain(["label", "clean_label", "is_outlier"].map(String::from))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::CsvFormat(format!(
            "unexpected header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut features = Vec::new();
    let (mut labels, mut clean, mut outlier) = (Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |col: usize| Error::CsvFormat(format!("row {}: bad value in column {col}", row + 1));
        for j in 0..d {
            features.push(rec[j].parse::<f64>().map_err(|_| bad(j))?);
        }
        labels.push(rec[d].parse::<usize>().map_err(|_| bad(d))?);
        clean.push(rec[d + 1].parse::<usize>().map_err(|_| bad(d + 1))?);
        outlier.push(match &rec[d + 2] {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad(d + 2)),
        });
    }
    let n = labels.len();
    let inferred = labels.iter().chain(&clean).max().map_or(1, |m| m + 1);
    let ds = Dataset::new(
        Tensor::matrix(n, d, features)?,
        labels,
        num_classes.unwrap_or(inferred),
    )?
    .with_clean_labels(clean)?;
    if outlier.iter().any(|&o| o) {
        ds.with_outlier_mask(outlier)
    } else {
        Ok(ds)
    }
}

pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file), num_classes)
}
