//! Datasets: IDX binary I/O, a synthetic generator, normalization, batching,
//! splits, and proxy sampling.
//!
//! Images live in memory as f32 in [0,1], always exactly k/255 right after
//! loading or generation, so writing back to the u8-based IDX format is
//! lossless for untransformed data. Normalization to zero-mean/unit-std
//! happens at batch time using statistics the caller computed on the
//! training split.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{Scalar, Tensor};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Salt tags keeping this module's RNG streams apart from each other.
const SALT_PROXY: u64 = 0x70;
const SALT_SPLIT: u64 = 0x71;
const SALT_CLASS: u64 = 0x72;
const SALT_SAMPLE: u64 = 0x73;

/// An in-memory labeled image set with per-channel normalization statistics.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<u32>,
    channels: usize,
    height: usize,
    width: usize,
    class_count: usize,
    tag: String,
    mean: Vec<f32>,
    std: Vec<f32>,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<u32>,
        channels: usize,
        height: usize,
        width: usize,
        class_count: usize,
        tag: impl Into<String>,
    ) -> Result<Self> {
        let per_image = channels * height * width;
        if per_image == 0 {
            return Err(Error::InvalidArgument(
                "dataset image shape has a zero dimension".into(),
            ));
        }
        if images.len() != labels.len() * per_image {
            return Err(Error::InvalidArgument(format!(
                "{} pixels do not make {} images of {} pixels each",
                images.len(),
                labels.len(),
                per_image
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            height,
            width,
            class_count,
            tag: tag.into(),
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Per-channel mean over all pixels, independent of the stored stats.
    pub fn channel_means(&self) -> Vec<f32> {
        let mut sums = vec![0.0f64; self.channels];
        let hw = self.height * self.width;
        for img in 0..self.len() {
            let px = self.image(img);
            for c in 0..self.channels {
                sums[c] += px[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let count = (self.len() * hw).max(1) as f64;
        sums.iter().map(|&s| (s / count) as f32).collect()
    }

    /// Computes per-channel mean/std over this set and stores them for
    /// batching. Call on the training split, then copy to eval splits via
    /// [`Self::set_stats`].
    pub fn compute_stats(&mut self) {
        let hw = self.height * self.width;
        let count = (self.len() * hw).max(1) as f64;
        let mut mean = vec![0.0f64; self.channels];
        let mut sq = vec![0.0f64; self.channels];
        for img in 0..self.len() {
            let px = self.image(img);
            for c in 0..self.channels {
                for &v in &px[c * hw..(c + 1) * hw] {
                    mean[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        for c in 0..self.channels {
            mean[c] /= count;
            let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
            self.mean[c] = mean[c] as f32;
            self.std[c] = (var.sqrt() as f32).max(1e-6);
        }
    }

    pub fn stats(&self) -> (&[f32], &[f32]) {
        (&self.mean, &self.std)
    }

    pub fn set_stats(&mut self, mean: &[f32], std: &[f32]) -> Result<()> {
        if mean.len() != self.channels || std.len() != self.channels {
            return Err(Error::InvalidArgument(format!(
                "stats for {} channels applied to a {}-channel dataset",
                mean.len(),
                self.channels
            )));
        }
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument("std entries must be positive".into()));
        }
        self.mean = mean.to_vec();
        self.std = std.to_vec();
        Ok(())
    }

    /// Normalized `[b, c, h, w]` batch plus the matching labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<u32>)> {
        let hw = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "batch index {i} outside dataset of {}",
                    self.len()
                )));
            }
            let px = self.image(i);
            for c in 0..self.channels {
                let (m, s) = (self.mean[c], self.std[c]);
                data.extend(
                    px[c * hw..(c + 1) * hw]
                        .iter()
                        .map(|&v| T::from_f64(((v - m) / s) as f64)),
                );
            }
            labels.push(self.labels[i]);
        }
        let t = Tensor::from_vec(
            data,
            &[indices.len(), self.channels, self.height, self.width],
        )?;
        Ok((t, labels))
    }

    /// New dataset holding the given records; stats and tag are inherited
    /// unless retagged.
    pub fn subset(&self, indices: &[usize], tag: impl Into<String>) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "subset index {i} outside dataset of {}",
                    self.len()
                )));
            }
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let mut out = Dataset::new(
            images,
            labels,
            self.channels,
            self.height,
            self.width,
            self.class_count,
            tag,
        )?;
        out.mean = self.mean.clone();
        out.std = self.std.clone();
        Ok(out)
    }

    /// Random split into (rest, held-out) with `eval_count` records held out.
    pub fn split(&self, eval_count: usize, seed: u64) -> Result<(Self, Self)> {
        if eval_count > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot hold out {eval_count} of {} records",
                self.len()
            )));
        }
        let idx = shuffle_indices(self.len(), seeds::derive(seed, SALT_SPLIT));
        let (eval_idx, train_idx) = idx.split_at(eval_count);
        Ok((
            self.subset(train_idx, format!("{}-train", self.tag))?,
            self.subset(eval_idx, format!("{}-eval", self.tag))?,
        ))
    }

    /// Uniform sample of indices without replacement, deterministic per
    /// seed. Asking for more than the dataset holds returns everything and
    /// logs a warning.
    pub fn sample_proxy(&self, n: usize, seed: u64) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot sample a proxy from an empty dataset".into(),
            ));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if n >= self.len() {
            if n > self.len() {
                log::warn!(
                    "proxy request of {n} exceeds dataset size {}; using all records",
                    self.len()
                );
            }
            return Ok(idx);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, SALT_PROXY));
        for i in 0..n {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(n);
        Ok(idx)
    }

    /// Images quantized back to the u8 grid they came from.
    pub fn quantized_images(&self) -> Vec<u8> {
        self.images
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn images_sha256(&self) -> String {
        hex(&Sha256::digest(self.quantized_images()))
    }

    pub fn labels_sha256(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.labels {
            h.update(l.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Structured-text description with content digests.
    pub fn manifest(&self) -> String {
        format!(
            "kind = \"dataset\"\n\
             tag = \"{}\"\n\
             samples = {}\n\
             channels = {}\n\
             height = {}\n\
             width = {}\n\
             class_count = {}\n\
             images_sha256 = \"{}\"\n\
             labels_sha256 = \"{}\"\n",
            self.tag,
            self.len(),
            self.channels,
            self.height,
            self.width,
            self.class_count,
            self.images_sha256(),
            self.labels_sha256(),
        )
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic permutation of `0..n`.
pub fn shuffle_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// `[n, class_count]` one-hot rows.
pub fn one_hot<T: Scalar>(labels: &[u32], class_count: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * class_count];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= class_count {
            return Err(Error::InvalidArgument(format!(
                "label {l} outside [0, {class_count})"
            )));
        }
        data[i * class_count + l as usize] = T::one();
    }
    Tensor::from_vec(data, &[labels.len(), class_count])
}

fn be_u32(bytes: &[u8], off: usize, path: &str) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4-byte slice")))
        .ok_or_else(|| Error::Corrupt {
            path: path.to_string(),
            offset: off as u64,
            detail: "unexpected end of file reading a big-endian u32".into(),
        })
}

/// Parses the big-endian IDX pair: 0x00000803 rank-3 u8 images and
/// 0x00000801 rank-1 u8 labels. The class count is inferred as
/// max(label) + 1.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_name = images_path.display().to_string();
    let lbl_name = labels_path.display().to_string();
    let img_bytes =
        std::fs::read(images_path).map_err(|e| Error::io(img_name.clone(), e))?;
    let lbl_bytes =
        std::fs::read(labels_path).map_err(|e| Error::io(lbl_name.clone(), e))?;

    let magic = be_u32(&img_bytes, 0, &img_name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Corrupt {
            path: img_name,
            offset: 0,
            detail: format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x} (rank-3 u8 images)"),
        });
    }
    let n = be_u32(&img_bytes, 4, &img_name)? as usize;
    let h = be_u32(&img_bytes, 8, &img_name)? as usize;
    let w = be_u32(&img_bytes, 12, &img_name)? as usize;
    let payload = n * h * w;
    if img_bytes.len() < 16 + payload {
        return Err(Error::Corrupt {
            path: img_name,
            offset: img_bytes.len() as u64,
            detail: format!(
                "payload truncated: header promises {payload} pixels, {} present",
                img_bytes.len() - 16
            ),
        });
    }
    if img_bytes.len() > 16 + payload {
        return Err(Error::Corrupt {
            path: img_name,
            offset: (16 + payload) as u64,
            detail: format!("{} trailing bytes after the payload", img_bytes.len() - 16 - payload),
        });
    }

    let magic = be_u32(&lbl_bytes, 0, &lbl_name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Corrupt {
            path: lbl_name,
            offset: 0,
            detail: format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x} (rank-1 u8 labels)"),
        });
    }
    let n_lbl = be_u32(&lbl_bytes, 4, &lbl_name)? as usize;
    if n_lbl != n {
        return Err(Error::Corrupt {
            path: lbl_name,
            offset: 4,
            detail: format!("label count {n_lbl} differs from image count {n}"),
        });
    }
    if lbl_bytes.len() != 8 + n {
        return Err(Error::Corrupt {
            path: lbl_name,
            offset: lbl_bytes.len().min(8 + n) as u64,
            detail: format!("expected {} label bytes, file holds {}", n, lbl_bytes.len() - 8),
        });
    }

    let images: Vec<f32> = img_bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<u32> = lbl_bytes[8..].iter().map(|&b| b as u32).collect();
    let class_count = labels.iter().max().map(|&m| m as usize + 1).unwrap_or(0);
    // Shape arguments must be nonzero even for an empty set.
    Dataset::new(images, labels, 1, h.max(1), w.max(1), class_count.max(1), "idx")
        .map(|mut d| {
            d.class_count = class_count;
            d
        })
}

/// Writes the dataset as an IDX pair; single-channel sets only, labels must
/// fit in u8.
pub fn store_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if ds.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "IDX rank-3 images are single-channel; dataset has {}",
            ds.channels()
        )));
    }
    if let Some(&l) = ds.labels().iter().find(|&&l| l > 255) {
        return Err(Error::InvalidArgument(format!("label {l} does not fit in u8")));
    }
    let mut img = Vec::with_capacity(16 + ds.len() * ds.height() * ds.width());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(ds.height() as u32).to_be_bytes());
    img.extend_from_slice(&(ds.width() as u32).to_be_bytes());
    img.extend_from_slice(&ds.quantized_images());
    std::fs::write(images_path, img)
        .map_err(|e| Error::io(images_path.display().to_string(), e))?;

    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lbl.extend(ds.labels().iter().map(|&l| l as u8));
    std::fs::write(labels_path, lbl)
        .map_err(|e| Error::io(labels_path.display().to_string(), e))
}

/// Recipe for a deterministic synthetic dataset whose class identity lives
/// in a local glyph patch on top of a per-class texture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub side: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn patch_side(&self) -> usize {
        (self.side / 4).max(2)
    }

    /// Top-left corner of a class's glyph patch. Deterministic in
    /// (seed, class).
    pub fn patch_origin(&self, class: usize) -> (usize, usize) {
        let ps = self.patch_side();
        let usable = self.side - ps;
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeds::derive2(self.seed, SALT_CLASS, class as u64));
        let row = rng.gen_range(0..=usable);
        let col = rng.gen_range(0..=usable);
        (row, col)
    }

    fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.per_class == 0 {
            return Err(Error::InvalidArgument(
                "synthetic spec needs at least one class and one sample per class".into(),
            ));
        }
        if self.side < 8 {
            return Err(Error::InvalidArgument(format!(
                "synthetic side {} too small for a glyph patch (minimum 8)",
                self.side
            )));
        }
        Ok(())
    }
}

/// Per-class drawing recipe derived once, reused for every sample.
struct ClassPattern {
    freq_x: f64,
    freq_y: f64,
    phase: f64,
    origin: (usize, usize),
    glyph: Vec<bool>,
}

impl ClassPattern {
    fn new(spec: &SyntheticSpec, class: usize) -> Self {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeds::derive2(spec.seed, SALT_CLASS, class as u64));
        let ps = spec.patch_side();
        let usable = spec.side - ps;
        let row = rng.gen_range(0..=usable);
        let col = rng.gen_range(0..=usable);
        let freq_x = rng.gen_range(1..=4) as f64;
        let freq_y = rng.gen_range(1..=4) as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let glyph = (0..ps * ps).map(|_| rng.gen_bool(0.5)).collect();
        ClassPattern {
            freq_x,
            freq_y,
            phase,
            origin: (row, col),
            glyph,
        }
    }
}

/// Generates the dataset described by `spec`; bitwise identical across runs.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let side = spec.side;
    let ps = spec.patch_side();
    let patterns: Vec<ClassPattern> = (0..spec.class_count)
        .map(|c| ClassPattern::new(spec, c))
        .collect();

    let n = spec.class_count * spec.per_class;
    let mut images = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.class_count {
        let pat = &patterns[class];
        for sample in 0..spec.per_class {
            let record = (class * spec.per_class + sample) as u64;
            let mut rng =
                ChaCha8Rng::seed_from_u64(seeds::derive2(spec.seed, SALT_SAMPLE, record));
            let (top, left) = pat.origin;
            for r in 0..side {
                for c in 0..side {
                    let in_patch =
                        r >= top && r < top + ps && c >= left && c < left + ps;
                    let noise = rng.gen_range(-0.08..0.08);
                    let v = if in_patch {
                        let g = pat.glyph[(r - top) * ps + (c - left)];
                        (if g { 0.9 } else { 0.1 }) + noise * 0.5
                    } else {
                        let arg = std::f64::consts::TAU
                            * (pat.freq_x * r as f64 + pat.freq_y * c as f64)
                            / side as f64
                            + pat.phase;
                        0.5 + 0.22 * arg.sin() + noise
                    };
                    let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    images.push(q as f32 / 255.0);
                }
            }
            labels.push(class as u32);
        }
    }
    Dataset::new(images, labels, 1, side, side, spec.class_count, "synthetic")
}
