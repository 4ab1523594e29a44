//! Synthetic labeled data on the sphere, two-view augmentation and the
//! CIFAR-10 binary reader.
//!
//! Labels are never seen by the contrastive losses; they only feed the kNN
//! evaluation. Same-class points are what instance discrimination treats as
//! (false) negatives.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::types::ZERO_NORM_EPS;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    points: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(points: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        if labels.len() != points.nrows() {
            return Err(Error::DimensionMismatch {
                expected: points.nrows(),
                found: labels.len(),
            });
        }
        if classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidConfig(format!("label {bad} >= class count {classes}")));
        }
        Ok(Self {
            points,
            labels,
            classes,
        })
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Rows selected by `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            points: self.points.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize, sigma: f64) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| sigma * rng.sample::<f64, _>(StandardNormal))
}

fn normalized(mut v: Array1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm > ZERO_NORM_EPS {
        v.mapv_inplace(|x| x / norm);
    }
    v
}

/// `classes` centers uniform on `S^{d-1}`; each point is its center plus
/// isotropic Gaussian noise with per-coordinate standard deviation
/// `spread_sigma`, projected back onto the sphere. Points are stored class
/// by class.
pub fn synthetic_dataset(
    classes: usize,
    per_class: usize,
    d: usize,
    spread_sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || per_class == 0 || d < 2 || !(spread_sigma >= 0.0) || !spread_sigma.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "synthetic dataset needs C >= 2, per_class >= 1, d >= 2, sigma >= 0 \
             (got C={classes}, per_class={per_class}, d={d}, sigma={spread_sigma})"
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Data, 0);
    let centers: Vec<Array1<f64>> = (0..classes)
        .map(|_| loop {
            let c = gaussian_vec(&mut rng, d, 1.0);
            if c.dot(&c).sqrt() > ZERO_NORM_EPS {
                break normalized(c);
            }
        })
        .collect();
    let n = classes * per_class;
    let mut points = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for i in 0..per_class {
            let p = if spread_sigma == 0.0 {
                center.clone()
            } else {
                normalized(center + &gaussian_vec(&mut rng, d, spread_sigma))
            };
            points.row_mut(c * per_class + i).assign(&p);
            labels.push(c);
        }
    }
    LabeledDataset::new(points, labels, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Total noise scale: each coordinate gets `noise_sigma / sqrt(d)`, so
    /// the expected squared norm of the noise is `noise_sigma^2`.
    pub noise_sigma: f64,
    /// Probability of zeroing each coordinate; survivors are scaled by
    /// `1 / (1 - dropout_prob)`.
    pub dropout_prob: f64,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidConfig(format!(
                "dropout_prob must lie in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            dropout_prob: 0.0,
            seed: 0,
        }
    }
}

/// Two independently corrupted, unit-normalized copies of `point`. The
/// random stream is fixed by `(cfg.seed, draw)`. A view whose norm
/// collapses to zero is returned unnormalized.
pub fn two_view_augment(point: ArrayView1<'_, f64>, cfg: &AugmentConfig, draw: u64) -> (Array1<f64>, Array1<f64>) {
    let mut rng = rng::stream(cfg.seed, Purpose::Augment, draw);
    let a = augment_once(point, cfg, &mut rng);
    let b = augment_once(point, cfg, &mut rng);
    (a, b)
}

fn augment_once<R: Rng>(point: ArrayView1<'_, f64>, cfg: &AugmentConfig, rng: &mut R) -> Array1<f64> {
    let d = point.len();
    let mut v = point.to_owned();
    if cfg.noise_sigma > 0.0 {
        v += &gaussian_vec(rng, d, cfg.noise_sigma / (d as f64).sqrt());
    }
    if cfg.dropout_prob > 0.0 {
        let keep = 1.0 / (1.0 - cfg.dropout_prob);
        v.mapv_inplace(|x| {
            if rng.random::<f64>() < cfg.dropout_prob {
                0.0
            } else {
                x * keep
            }
        });
    }
    normalized(v)
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 10;

/// Reads a CIFAR-10 binary batch file: records of one label byte followed by
/// 3072 pixel bytes (R, G and B planes of 32x32, row-major). Pixels are
/// scaled to `[0, 1]` and then standardized per feature over the loaded
/// records. `indices` selects records in the given order.
pub fn cifar_load(path: &Path, indices: Option<&[usize]>) -> Result<LabeledDataset> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::MalformedRecord {
            len: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let total = bytes.len() / CIFAR_RECORD;
    let all: Vec<usize>;
    let selected = match indices {
        Some(idx) => idx,
        None => {
            all = (0..total).collect();
            &all
        }
    };
    if selected.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut points = Array2::zeros((selected.len(), CIFAR_PIXELS));
    let mut labels = Vec::with_capacity(selected.len());
    for (out, &index) in selected.iter().enumerate() {
        if index >= total {
            return Err(Error::IndexOutOfRange { index, len: total });
        }
        let record = &bytes[index * CIFAR_RECORD..(index + 1) * CIFAR_RECORD];
        let label = record[0];
        if label as usize >= CIFAR_CLASSES {
            return Err(Error::LabelOutOfRange { index, label });
        }
        labels.push(label as usize);
        for (dst, &px) in points.row_mut(out).iter_mut().zip(&record[1..]) {
            *dst = f64::from(px) / 255.0;
        }
    }
    standardize_columns(&mut points);
    LabeledDataset::new(points, labels, CIFAR_CLASSES)
}

/// Zero mean, unit variance per column; constant columns are only centered.
fn standardize_columns(points: &mut Array2<f64>) {
    let n = points.nrows() as f64;
    for mut col in points.axis_iter_mut(Axis(1)) {
        let mean = col.sum() / n;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
        col.mapv_inplace(|x| (x - mean) * scale);
    }
}

const CACHE_MAGIC: u32 = u32::from_le_bytes(*b"CLDS");

/// Writes the dataset as a 16-byte header `(magic, n, d, C)` of
/// little-endian `u32`s, the `n x d` points, then the `n` labels, all as
/// little-endian `f64`.
pub fn write_cache(data: &LabeledDataset, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * data.len() * (data.dim() + 1));
    let dims = [data.len(), data.dim(), data.classes()];
    buf.extend_from_slice(&CACHE_MAGIC.to_le_bytes());
    for v in dims {
        let v = u32::try_from(v).map_err(|_| Error::InvalidConfig("dataset too large to cache".into()))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for x in data.points().iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for &l in data.labels() {
        buf.extend_from_slice(&(l as f64).to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let word = |i: usize| -> Option<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };
    let malformed = || Error::InvalidConfig(format!("{} is not a dataset cache", path.display()));
    if word(0) != Some(CACHE_MAGIC) {
        return Err(malformed());
    }
    let (n, d, classes) = match (word(1), word(2), word(3)) {
        (Some(n), Some(d), Some(c)) => (n as usize, d as usize, c as usize),
        _ => return Err(malformed()),
    };
    if bytes.len() != 16 + 8 * n * (d + 1) {
        return Err(malformed());
    }
    let reals: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let points = Array2::from_shape_vec((n, d), reals[..n * d].to_vec()).map_err(|_| malformed())?;
    let labels = reals[n * d..].iter().map(|&l| l as usize).collect();
    LabeledDataset::new(points, labels, classes)
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn zero_spread_points_sit_on_centers() {
        let ds = synthetic_dataset(3, 4, 5, 0.0, 11).unwrap();
        for c in 0..3 {
            let first = ds.points().row(c * 4);
            for i in 1..4 {
                assert_eq!(ds.points().row(c * 4 + i), first);
            }
            assert!((first.dot(&first) - 1.0).abs() < 1e-12);
        }
        assert_eq!(ds.labels(), &[0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic_dataset(10, 100, 32, 0.1, 7).unwrap();
        let b = synthetic_dataset(10, 100, 32, 0.1, 7).unwrap();
        assert_eq!(a, b);
        let c = synthetic_dataset(10, 100, 32, 0.1, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn within_class_closer_than_across() {
        let ds = synthetic_dataset(10, 100, 32, 0.1, 7).unwrap();
        let gram = ds.points().dot(&ds.points().t());
        let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..ds.len() {
            for j in 0..i {
                if ds.labels()[i] == ds.labels()[j] {
                    within += gram[[i, j]];
                    nw += 1;
                } else {
                    across += gram[[i, j]];
                    na += 1;
                }
            }
        }
        assert!(within / nw as f64 > across / na as f64);
    }

    #[test]
    fn synthetic_config_errors() {
        assert!(synthetic_dataset(1, 10, 4, 0.1, 0).is_err());
        assert!(synthetic_dataset(3, 0, 4, 0.1, 0).is_err());
        assert!(synthetic_dataset(3, 2, 1, 0.1, 0).is_err());
        assert!(synthetic_dataset(3, 2, 4, -0.1, 0).is_err());
    }

    #[test]
    fn clean_augmentation_is_identity() {
        let cfg = AugmentConfig {
            noise_sigma: 0.0,
            dropout_prob: 0.0,
            seed: 3,
        };
        let p = array![3.0, 4.0];
        let (a, b) = two_view_augment(p.view(), &cfg, 9);
        assert_eq!(a, array![0.6, 0.8]);
        assert_eq!(a, b);
    }

    #[test]
    fn augmentation_reproducible_per_draw() {
        let cfg = AugmentConfig {
            noise_sigma: 0.2,
            dropout_prob: 0.1,
            seed: 5,
        };
        let p = array![1.0, 0.0, 0.0, 0.0];
        assert_eq!(two_view_augment(p.view(), &cfg, 4), two_view_augment(p.view(), &cfg, 4));
        let (a, b) = two_view_augment(p.view(), &cfg, 4);
        assert_ne!(a, b);
        assert_ne!(two_view_augment(p.view(), &cfg, 4), two_view_augment(p.view(), &cfg, 5));
    }

    #[test]
    fn view_agreement_band() {
        let cfg = AugmentConfig {
            noise_sigma: 0.1,
            dropout_prob: 0.0,
            seed: 17,
        };
        let mut p = Array1::zeros(32);
        p[0] = 1.0;
        let mean: f64 = (0..1000)
            .map(|draw| {
                let (a, b) = two_view_augment(p.view(), &cfg, draw);
                a.dot(&b)
            })
            .sum::<f64>()
            / 1000.0;
        // roughly 1 / (1 + sigma^2) for this noise model
        assert!(mean > 0.8 && mean < 1.0, "{mean}");
        assert!((mean - 0.990).abs() < 0.005, "{mean}");
    }

    fn cifar_bytes(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            out.push(l);
            out.extend((0..CIFAR_PIXELS).map(|p| ((p * 7 + i * 31) % 256) as u8));
        }
        out
    }

    #[test]
    fn cifar_reads_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        fs::write(&path, cifar_bytes(&[3, 0, 9, 1])).unwrap();
        let ds = cifar_load(&path, None).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.classes()), (4, 3072, 10));
        assert_eq!(ds.labels(), &[3, 0, 9, 1]);
        let col = ds.points().column(5);
        assert!(col.sum().abs() < 1e-9);
        let sub = cifar_load(&path, Some(&[2, 0, 1])).unwrap();
        assert_eq!(sub.labels(), &[9, 3, 0]);
        assert_eq!(sub.len(), 3);
    }

    #[test]
    fn cifar_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.bin");
        assert!(matches!(cifar_load(&missing, None), Err(Error::FileNotFound(_))));
        let short = dir.path().join("short.bin");
        fs::write(&short, vec![0u8; 3072]).unwrap();
        assert!(matches!(
            cifar_load(&short, None),
            Err(Error::MalformedRecord { len: 3072, .. })
        ));
        let bad = dir.path().join("bad.bin");
        fs::write(&bad, cifar_bytes(&[1, 12])).unwrap();
        assert!(matches!(
            cifar_load(&bad, None),
            Err(Error::LabelOutOfRange { index: 1, label: 12 })
        ));
        assert!(matches!(
            cifar_load(&bad, Some(&[5])),
            Err(Error::IndexOutOfRange { index: 5, len: 2 })
        ));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = synthetic_dataset(3, 5, 4, 0.2, 1).unwrap();
        write_cache(&ds, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"CLDS");
        assert_eq!(bytes.len(), 16 + 8 * 15 * 5);
        assert_eq!(read_cache(&path).unwrap(), ds);
    }
}
