//! Synthetic two-modality classification data.
//!
//! Each class `k` owns a modality-A prototype and a modality-B prototype,
//! drawn once per dataset. A sample of class `k` is
//!
//! ```text
//! x_img = proto_a[k] + sigma_a * e
//! x_txt = rho * proto_b[k] + (1 - rho) * proto_b[j] + sigma_b * e'
//! ```
//!
//! where `j` is a uniformly drawn confuser class, independent of `k`. With
//! `rho = 0` modality B carries no class information.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::params::Reader;
use crate::numcore::Tensor;
use crate::rng::{self, stream, Rng};

pub const DATASET_MAGIC: &[u8; 8] = b"DTCNDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub x_img: Vec<f64>,
    pub x_txt: Vec<f64>,
    pub label: usize,
}

/// A minibatch in matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub img: Tensor,
    pub txt: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Immutable collection of samples stored column-compatible as matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    img: Tensor,
    txt: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(img: Tensor, txt: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _) = img.expect_matrix("dataset")?;
        let (m, _) = txt.expect_matrix("dataset")?;
        if n != m || n != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{n} images, {m} texts, {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Self {
            img,
            txt,
            labels,
            classes,
        })
    }

    pub fn from_samples(samples: &[MultimodalSample], img_dim: usize, txt_dim: usize, classes: usize) -> Result<Self> {
        let mut img = Vec::with_capacity(samples.len() * img_dim);
        let mut txt = Vec::with_capacity(samples.len() * txt_dim);
        for s in samples {
            if s.x_img.len() != img_dim || s.x_txt.len() != txt_dim {
                return Err(Error::shape("dataset", "sample dims differ from dataset dims"));
            }
            img.extend_from_slice(&s.x_img);
            txt.extend_from_slice(&s.x_txt);
        }
        Self::new(
            Tensor::new(vec![samples.len(), img_dim], img)?,
            Tensor::new(vec![samples.len(), txt_dim], txt)?,
            samples.iter().map(|s| s.label).collect(),
            classes,
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn img_dim(&self) -> usize {
        self.img.cols()
    }

    pub fn txt_dim(&self) -> usize {
        self.txt.cols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.img
    }

    pub fn texts(&self) -> &Tensor {
        &self.txt
    }

    pub fn sample(&self, i: usize) -> MultimodalSample {
        MultimodalSample {
            x_img: self.img.row(i).to_vec(),
            x_txt: self.txt.row(i).to_vec(),
            label: self.labels[i],
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = MultimodalSample> + '_ {
        (0..self.len()).map(|i| self.sample(i))
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            img: self.img.gather_rows(indices),
            txt: self.txt.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            img: self.img.clone(),
            txt: self.txt.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset {
            img: b.img,
            txt: b.txt,
            labels: b.labels,
            classes: self.classes,
        }
    }

    /// Copy with modality A of sample `i` masked under seed `derive(seed, i)`.
    pub fn masked(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        let mut out = self.clone();
        for i in 0..self.len() {
            let s = mask_modality_a(&self.sample(i), fraction, rng::derive(seed, &[i as u64]))?;
            out.img.row_mut(i).copy_from_slice(&s.x_img);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + self.len() * 8 * (1 + self.img_dim() + self.txt_dim()));
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.classes as u32).to_le_bytes());
        buf.extend_from_slice(&(self.img_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.txt_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            buf.extend_from_slice(&(self.labels[i] as u32).to_le_bytes());
            for v in self.img.row(i).iter().chain(self.txt.row(i)) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        if r.take(8)? != DATASET_MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let classes = r.u32()? as usize;
        let img_dim = r.u32()? as usize;
        let txt_dim = r.u32()? as usize;
        let n = r.u64()? as usize;
        let record = 4 + 8 * (img_dim + txt_dim);
        if n.checked_mul(record) != Some(bytes.len() - 32) {
            return Err(r.fail("payload length does not match header"));
        }
        let mut img = Vec::with_capacity(n * img_dim);
        let mut txt = Vec::with_capacity(n * txt_dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = r.u32()? as usize;
            if label >= classes {
                return Err(r.fail("label out of range"));
            }
            labels.push(label);
            img.extend(r.f64s(img_dim)?);
            txt.extend(r.f64s(txt_dim)?);
        }
        Self::new(
            Tensor::new(vec![n, img_dim], img)?,
            Tensor::new(vec![n, txt_dim], txt)?,
            labels,
            classes,
        )
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, ds.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub img_dim: usize,
    pub txt_dim: usize,
    /// Per-coordinate scale of the class prototypes.
    pub separation: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
    /// Share of modality B that follows the true class.
    pub rho: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            img_dim: 256,
            txt_dim: 16,
            separation: 1.0,
            sigma_a: 1.0,
            sigma_b: 1.0,
            rho: 0.8,
            n_train: 2000,
            n_test: 1000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.img_dim == 0 || self.txt_dim == 0 {
            return Err(Error::InvalidArgument("modality dims must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.sigma_a < 0.0 || self.sigma_b < 0.0 || self.separation <= 0.0 {
            return Err(Error::InvalidArgument(
                "noise scales must be >= 0 and separation > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Class prototypes of one generated dataset.
#[derive(Debug, Clone)]
pub struct Prototypes {
    pub img: Vec<Vec<f64>>,
    pub txt: Vec<Vec<f64>>,
}

fn gaussian_vec(n: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            scale * z
        })
        .collect()
}

pub fn prototypes(spec: &SyntheticSpec) -> Prototypes {
    let mut rng = rng::rng_from(spec.seed, &[stream::DATA, 0]);
    let img = (0..spec.classes)
        .map(|_| gaussian_vec(spec.img_dim, spec.separation, &mut rng))
        .collect();
    let txt = (0..spec.classes)
        .map(|_| gaussian_vec(spec.txt_dim, spec.separation, &mut rng))
        .collect();
    Prototypes { img, txt }
}

fn draw_split(spec: &SyntheticSpec, protos: &Prototypes, n: usize, split: u64) -> Result<Dataset> {
    let mut rng = rng::rng_from(spec.seed, &[stream::DATA, split]);
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let mut img = Vec::with_capacity(n * spec.img_dim);
    let mut txt = Vec::with_capacity(n * spec.txt_dim);
    for &k in &labels {
        for &mu in &protos.img[k] {
            let z: f64 = rng.sample(StandardNormal);
            img.push(mu + spec.sigma_a * z);
        }
        let j = rng.random_range(0..spec.classes);
        for (&mk, &mj) in protos.txt[k].iter().zip(&protos.txt[j]) {
            let z: f64 = rng.sample(StandardNormal);
            txt.push(spec.rho * mk + (1.0 - spec.rho) * mj + spec.sigma_b * z);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, spec.img_dim], img)?,
        Tensor::new(vec![n, spec.txt_dim], txt)?,
        labels,
        spec.classes,
    )
}

/// Train and test splits drawn around shared prototypes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let protos = prototypes(spec);
    Ok((
        draw_split(spec, &protos, spec.n_train, 1)?,
        draw_split(spec, &protos, spec.n_test, 2)?,
    ))
}

/// Zeroes exactly `round(fraction * img_dim)` seed-chosen coordinates of modality A.
pub fn mask_modality_a(sample: &MultimodalSample, fraction: f64, seed: u64) -> Result<MultimodalSample> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "mask fraction {fraction} outside [0, 1]"
        )));
    }
    let dim = sample.x_img.len();
    let count = (fraction * dim as f64).round() as usize;
    let mut rng = rng::rng_from(seed, &[stream::MASK]);
    let mut coords: Vec<usize> = (0..dim).collect();
    coords.shuffle(&mut rng);
    let mut out = sample.clone();
    for &c in &coords[..count] {
        out.x_img[c] = 0.0;
    }
    Ok(out)
}

/// Nearest-prototype prediction by squared Euclidean distance.
pub fn nearest_prototype(x: &[f64], protos: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, p) in protos.iter().enumerate() {
        let d: f64 = x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}
