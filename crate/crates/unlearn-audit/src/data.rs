//! Dataset synthesis, delimited-file I/O, membership masks, and the
//! augmentation generator consumed by the augmentation-based attack.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled example with a stable id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

/// Feature geometry: an unstructured vector or a 2-D grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Flat,
    Grid { h: usize, w: usize },
}

/// The sample universe over which membership is audited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub layout: Layout,
}

impl Dataset {
    /// Validates the full invariant set: consistent dimensions, unique ids
    /// covering `0..n`, finite features, labels in range, every class
    /// present, and grid dimensions matching the feature length.
    pub fn new(samples: Vec<Sample>, num_classes: usize, layout: Layout) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::validation("dataset must contain at least one sample"));
        }
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        let feature_dim = samples[0].features.len();
        if feature_dim == 0 {
            return Err(Error::validation("feature_dim must be positive"));
        }
        if let Layout::Grid { h, w } = layout {
            if h * w != feature_dim {
                return Err(Error::validation(format!(
                    "grid layout {h}x{w} does not match feature_dim {feature_dim}"
                )));
            }
        }
        let mut seen = vec![false; samples.len()];
        let mut class_present = vec![false; num_classes];
        for s in &samples {
            if s.features.len() != feature_dim {
                return Err(Error::validation(format!(
                    "sample {} has {} features, expected {feature_dim}",
                    s.id,
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("sample {} has non-finite features", s.id)));
            }
            if s.label >= num_classes {
                return Err(Error::validation(format!(
                    "sample {} label {} out of range [0, {num_classes})",
                    s.id, s.label
                )));
            }
            if s.id >= samples.len() || seen[s.id] {
                return Err(Error::validation(format!("sample ids must uniquely cover 0..{}", samples.len())));
            }
            seen[s.id] = true;
            class_present[s.label] = true;
        }
        if let Some(missing) = class_present.iter().position(|p| !p) {
            return Err(Error::validation(format!("class {missing} has no samples")));
        }
        let mut samples = samples;
        samples.sort_by_key(|s| s.id);
        Ok(Dataset { samples, num_classes, feature_dim, layout })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples in id order.
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, id: usize) -> Option<&Sample> {
        self.samples.get(id)
    }

    /// Reinterpret flat features as an `h`x`w` grid.
    pub fn with_grid_layout(mut self, h: usize, w: usize) -> Result<Self> {
        if h * w != self.feature_dim {
            return Err(Error::invalid(format!(
                "grid {h}x{w} does not match feature_dim {}",
                self.feature_dim
            )));
        }
        self.layout = Layout::Grid { h, w };
        Ok(self)
    }
}

/// Membership bit vector indexed by sample id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMask {
    bits: Vec<bool>,
}

impl SplitMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        SplitMask { bits }
    }

    pub fn from_members(n: usize, members: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![false; n];
        for id in members {
            bits[id] = true;
        }
        SplitMask { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_member(&self, id: usize) -> bool {
        self.bits.get(id).copied().unwrap_or(false)
    }

    pub fn member_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Member ids in ascending order.
    pub fn members(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Ids not in the mask, ascending.
    pub fn non_members(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }

    /// New mask with the given ids removed.
    pub fn without(&self, ids: &[usize]) -> SplitMask {
        let mut bits = self.bits.clone();
        for &id in ids {
            if id < bits.len() {
                bits[id] = false;
            }
        }
        SplitMask { bits }
    }

    /// New mask with the given id forced present/absent.
    pub fn with_bit(&self, id: usize, value: bool) -> SplitMask {
        let mut bits = self.bits.clone();
        bits[id] = value;
        SplitMask { bits }
    }
}

// Masks persist as compact '0'/'1' strings inside model files.
impl Serialize for SplitMask {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let s: String = self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        ser.serialize_str(&s)
    }
}

impl<'de> Deserialize<'de> for SplitMask {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        let mut bits = Vec::with_capacity(s.len());
        for c in s.chars() {
            match c {
                '0' => bits.push(false),
                '1' => bits.push(true),
                other => {
                    return Err(serde::de::Error::custom(format!("invalid mask character {other:?}")))
                }
            }
        }
        Ok(SplitMask { bits })
    }
}

/// How to draw a stochastic neighborhood of a sample.
///
/// `Jitter` adds zero-mean Gaussian noise of scale `eta` per feature.
/// `Grid` applies horizontal flips and integer pixel shifts with zero
/// padding, and is only valid for grid-layout datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationScheme {
    Jitter { eta: f64 },
    Grid { allow_flip: bool, max_shift: usize },
}

/// Class-balanced Gaussian clusters with one unit-sphere centroid per class.
///
/// Deterministic in `seed`: centroids are drawn first (class-major), then
/// per-sample noise in id order. Labels cycle `0, 1, ..., c-1, 0, ...` so
/// class counts differ by at most one.
pub fn generate_synthetic(
    n_samples: usize,
    num_classes: usize,
    feature_dim: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 || num_classes == 0 || feature_dim == 0 {
        return Err(Error::invalid("n_samples, num_classes and feature_dim must be positive"));
    }
    if n_samples < num_classes {
        return Err(Error::invalid("n_samples must be at least num_classes"));
    }
    if !(cluster_spread > 0.0) {
        return Err(Error::invalid("cluster_spread must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut c: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        c.iter_mut().for_each(|v| *v /= norm);
        centroids.push(c);
    }
    let mut samples = Vec::with_capacity(n_samples);
    for id in 0..n_samples {
        let label = id % num_classes;
        let features = centroids[label]
            .iter()
            .map(|&c| c + cluster_spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        samples.push(Sample { id, features, label });
    }
    Dataset::new(samples, num_classes, Layout::Flat)
}

/// Load a comma-delimited dataset: feature columns then an integer label,
/// UTF-8, no header. Ids are assigned by row order starting at 0.
pub fn load_delimited(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_delimited(&text, num_classes)
}

fn parse_delimited(text: &str, num_classes: usize) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut feature_dim = None;
    for (row0, line) in text.lines().enumerate() {
        let row = row0 + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::Format {
                row,
                message: "expected at least one feature column and a label".into(),
            });
        }
        let (feat_fields, label_field) = fields.split_at(fields.len() - 1);
        let mut features = Vec::with_capacity(feat_fields.len());
        for f in feat_fields {
            features.push(f.trim().parse::<f64>().map_err(|e| Error::Format {
                row,
                message: format!("bad feature value {f:?}: {e}"),
            })?);
        }
        let label = label_field[0].trim().parse::<usize>().map_err(|e| Error::Format {
            row,
            message: format!("bad label {:?}: {e}", label_field[0]),
        })?;
        match feature_dim {
            None => feature_dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(Error::Format {
                    row,
                    message: format!("row has {} features, expected {d}", features.len()),
                })
            }
            _ => {}
        }
        samples.push(Sample { id: samples.len(), features, label });
    }
    if samples.is_empty() {
        return Err(Error::Format { row: 0, message: "file contains no data rows".into() });
    }
    Dataset::new(samples, num_classes, Layout::Flat)
}

/// Write a dataset in the `load_delimited` format. Floats use the shortest
/// representation that round-trips, so write-then-load is the identity.
pub fn save_delimited(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for s in dataset.samples() {
        for f in &s.features {
            write!(out, "{f},").expect("string write");
        }
        writeln!(out, "{}", s.label).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Generate `n` augmented copies of a sample. Labels are preserved and the
/// draw is deterministic in `seed`.
pub fn augment(
    sample: &Sample,
    layout: &Layout,
    n: usize,
    scheme: &AugmentationScheme,
    seed: u64,
) -> Result<Vec<Sample>> {
    match scheme {
        AugmentationScheme::Jitter { eta } => {
            if !(*eta >= 0.0) {
                return Err(Error::invalid("jitter eta must be >= 0"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..n)
                .map(|_| {
                    let features = sample
                        .features
                        .iter()
                        .map(|&x| x + eta * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    Sample { id: sample.id, features, label: sample.label }
                })
                .collect())
        }
        AugmentationScheme::Grid { allow_flip, max_shift } => {
            let (h, w) = match layout {
                Layout::Grid { h, w } => (*h, *w),
                Layout::Flat => {
                    return Err(Error::invalid("grid augmentation requires a grid-layout dataset"))
                }
            };
            let shift = *max_shift as i64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..n)
                .map(|_| {
                    let flip = *allow_flip && rng.gen::<bool>();
                    let dx = rng.gen_range(-shift..=shift);
                    let dy = rng.gen_range(-shift..=shift);
                    let features = grid_transform(&sample.features, h, w, flip, dx, dy);
                    Sample { id: sample.id, features, label: sample.label }
                })
                .collect())
        }
    }
}

fn grid_transform(features: &[f64], h: usize, w: usize, flip: bool, dx: i64, dy: i64) -> Vec<f64> {
    let mut out = vec![0.0; features.len()];
    for r in 0..h {
        for c in 0..w {
            let src_r = r as i64 - dy;
            let src_c = c as i64 - dx;
            if src_r < 0 || src_r >= h as i64 || src_c < 0 || src_c >= w as i64 {
                continue;
            }
            let src_c = if flip { w as i64 - 1 - src_c } else { src_c };
            out[r * w + c] = features[src_r as usize * w + src_c as usize];
        }
    }
    out
}

/// Uniform random split with exactly `floor(n/2)` member bits set.
pub fn random_half_split(n: usize, seed: u64) -> Result<SplitMask> {
    if n < 2 {
        return Err(Error::invalid("random_half_split requires n >= 2"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    Ok(SplitMask::from_members(n, idx.into_iter().take(n / 2)))
}
