//! Dataset plumbing: big-endian IDX ingestion, synthetic Gaussian blobs for
//! minutes-scale experiments, stratified subsampling and splits.
//!
//! Images are kept raw in [0,1]; per-channel mean/std are computed at load
//! and applied when a typed tensor is materialized for a run.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug)]
pub struct Dataset {
    /// [N, C, H, W], values in [0,1].
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-channel normalization stats of THIS set's raw values.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape_chw(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn from_raw(images: Tensor<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = images.shape()[0];
        if n != labels.len() {
            return Err(Error::Idx(format!(
                "{} images but {} labels",
                n,
                labels.len()
            )));
        }
        if n == 0 {
            return Err(Error::Idx("empty dataset".to_string()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Idx(format!(
                "label {} outside {} classes",
                bad, num_classes
            )));
        }
        let (mean, std) = channel_stats(&images)?;
        Ok(Dataset {
            images,
            labels,
            num_classes,
            mean,
            std,
        })
    }

    /// Typed, normalized copy: (x - mean_c) / std_c per channel.
    pub fn normalized_images<S: Scalar>(&self) -> Tensor<S> {
        self.normalized_images_with(&self.mean, &self.std)
            .expect("own stats match own channels")
    }

    /// Normalize with externally supplied stats, e.g. a held-out set using
    /// the training split's mean/std so both share one input scale.
    pub fn normalized_images_with<S: Scalar>(
        &self,
        mean: &[f64],
        std: &[f64],
    ) -> Result<Tensor<S>> {
        let (n, c, h, w) = self.images.dims4().expect("dataset is 4-d");
        if mean.len() != c || std.len() != c {
            return Err(Error::invalid(
                "normalized_images_with",
                "stats length must match channel count",
            ));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid(
                "normalized_images_with",
                "std entries must be positive",
            ));
        }
        let plane = h * w;
        let mut out = Tensor::zeros(self.images.shape());
        let src = self.images.data();
        let dst = out.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let (m, s) = (mean[ch], std[ch]);
                for p in 0..plane {
                    dst[base + p] = S::from_f64((src[base + p] - m) / s);
                }
            }
        }
        Ok(out)
    }

    /// Deterministic stratified subsample of k items. Per-class quotas follow
    /// the source proportions, remainders go to the largest fractional parts,
    /// and the selected indices keep their original order.
    pub fn subsample(&self, k: usize, seed: u64) -> Result<Dataset> {
        if k == 0 {
            return Err(Error::invalid("subsample", "k must be positive"));
        }
        if k > self.len() {
            return Err(Error::invalid(
                "subsample",
                format!("k = {} exceeds {} samples", k, self.len()),
            ));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let n = self.len() as f64;
        let mut quotas: Vec<usize> = Vec::with_capacity(self.num_classes);
        let mut fracs: Vec<(usize, f64)> = Vec::new();
        for (c, idxs) in by_class.iter().enumerate() {
            let exact = k as f64 * idxs.len() as f64 / n;
            quotas.push(exact.floor() as usize);
            fracs.push((c, exact - exact.floor()));
        }
        let mut remaining = k - quotas.iter().sum::<usize>();
        // largest remainder first, class id breaking ties
        fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (c, _) in fracs {
            if remaining == 0 {
                break;
            }
            if quotas[c] < by_class[c].len() {
                quotas[c] += 1;
                remaining -= 1;
            }
        }
        if remaining > 0 {
            return Err(Error::invalid("subsample", "quota distribution failed"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut selected = Vec::with_capacity(k);
        for (c, idxs) in by_class.iter().enumerate() {
            let mut pool = idxs.clone();
            pool.shuffle(&mut rng);
            selected.extend_from_slice(&pool[..quotas[c]]);
        }
        selected.sort_unstable();
        self.take(&selected)
    }

    /// Stratified split into (train, test) with `train_fraction` of each
    /// class in the first part.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::invalid("split", "train_fraction must be in (0,1)"));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for idxs in &by_class {
            let mut pool = idxs.clone();
            pool.shuffle(&mut rng);
            let cut = (pool.len() as f64 * train_fraction).round() as usize;
            train_idx.extend_from_slice(&pool[..cut]);
            test_idx.extend_from_slice(&pool[cut..]);
        }
        if train_idx.is_empty() || test_idx.is_empty() {
            return Err(Error::invalid("split", "a side of the split came out empty"));
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        Ok((self.take(&train_idx)?, self.take(&test_idx)?))
    }

    fn take(&self, idxs: &[usize]) -> Result<Dataset> {
        let images = self.images.select_rows(idxs)?;
        let labels: Vec<usize> = idxs.iter().map(|&i| self.labels[i]).collect();
        Dataset::from_raw(images, labels, self.num_classes)
    }
}

fn channel_stats(images: &Tensor<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = images.dims4()?;
    let plane = h * w;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    let count = (n * plane) as f64;
    for ch in 0..c {
        let mut acc = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            acc += images.data()[base..base + plane].iter().sum::<f64>();
        }
        mean[ch] = acc / count;
        let mut var = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            var += images.data()[base..base + plane]
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
        let s = (var / count).sqrt();
        // constant channel: keep values finite, normalization centers only
        std[ch] = if s > 0.0 { s } else { 1.0 };
    }
    Ok((mean, std))
}

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Idx(format!("truncated {}", what)))?;
    Ok(u32::from_be_bytes(b))
}

/// Parse the classic big-endian IDX pair: u8 images (magic 0x00000803,
/// dims N,H,W) and u8 labels (magic 0x00000801). Pixels scale to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut f = std::fs::File::open(images_path)?;
    let magic = read_u32_be(&mut f, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx(format!(
            "image magic {:#010x}, expected {:#010x}",
            magic, IDX_IMAGES_MAGIC
        )));
    }
    let n = read_u32_be(&mut f, "image header")? as usize;
    let h = read_u32_be(&mut f, "image header")? as usize;
    let w = read_u32_be(&mut f, "image header")? as usize;
    let mut pixels = Vec::new();
    f.read_to_end(&mut pixels)?;
    if pixels.len() != n * h * w {
        return Err(Error::Idx(format!(
            "image payload holds {} bytes, header promises {}",
            pixels.len(),
            n * h * w
        )));
    }

    let mut f = std::fs::File::open(labels_path)?;
    let magic = read_u32_be(&mut f, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx(format!(
            "label magic {:#010x}, expected {:#010x}",
            magic, IDX_LABELS_MAGIC
        )));
    }
    let n_labels = read_u32_be(&mut f, "label header")? as usize;
    if n_labels != n {
        return Err(Error::Idx(format!(
            "{} images but {} labels",
            n, n_labels
        )));
    }
    let mut raw_labels = Vec::new();
    f.read_to_end(&mut raw_labels)?;
    if raw_labels.len() != n_labels {
        return Err(Error::Idx(format!(
            "label payload holds {} bytes, header promises {}",
            raw_labels.len(),
            n_labels
        )));
    }

    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let images = Tensor::from_vec(&[n, 1, h, w], data)?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::from_raw(images, labels, num_classes)
}

/// Class-conditional Gaussians: class k's mean sits on the k-th coordinate
/// axis, scaled so any two means are `separation` apart in feature space
/// (unit noise). The whole set is then mapped affinely into [0,1], which
/// preserves the separation-to-noise ratio. Labels cycle round robin.
pub fn synth_gaussian_blobs_sep(
    num_classes: usize,
    n: usize,
    dims: (usize, usize, usize),
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::invalid("synth_blobs", "need at least 2 classes"));
    }
    if n == 0 {
        return Err(Error::invalid("synth_blobs", "empty dataset"));
    }
    let (c, h, w) = dims;
    let feat = c * h * w;
    if feat < num_classes {
        return Err(Error::invalid(
            "synth_blobs",
            format!("{} features cannot separate {} classes", feat, num_classes),
        ));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::invalid("synth_blobs", "separation must be positive"));
    }
    let axis_scale = separation / std::f64::consts::SQRT_2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = vec![0.0f64; n * feat];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let row = &mut data[i * feat..(i + 1) * feat];
        for v in row.iter_mut() {
            *v = noise.sample(&mut rng);
        }
        row[class] += axis_scale;
        labels.push(class);
    }
    let lo = data.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = data.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in &mut data {
        *v = (*v - lo) / span;
    }
    let images = Tensor::from_vec(&[n, c, h, w], data)?;
    Dataset::from_raw(images, labels, num_classes)
}

/// Blobs with unit mean separation (1 sigma of the noise).
pub fn synth_gaussian_blobs(
    num_classes: usize,
    n: usize,
    dims: (usize, usize, usize),
    seed: u64,
) -> Result<Dataset> {
    synth_gaussian_blobs_sep(num_classes, n, dims, 1.0, seed)
}
