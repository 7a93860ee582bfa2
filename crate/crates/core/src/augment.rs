//! Mixup batch construction and the dataset-expansion transforms (rotate,
//! cutout, tile shuffle).
//!
//! Expansion transforms work on raw [0,1] pixel buffers before
//! normalization, and their outputs are re-quantized to the u8 grid so an
//! expanded set survives the IDX container bitwise. Mixup works on
//! normalized batch tensors at training time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rand::SeedableRng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{Scalar, Tensor};

const SALT_ROTATE: u64 = 0x80;
const SALT_CUTOUT: u64 = 0x81;
const SALT_SHUFFLE2: u64 = 0x82;
const SALT_SHUFFLE3: u64 = 0x83;
const SALT_SHUFFLE4: u64 = 0x84;

// ---------------------------------------------------------------------------
// Mixup

/// A convex blend of two batches with the draw that produced it.
pub struct MixupBatch<T: Scalar> {
    pub images: Tensor<T>,
    /// Soft labels `[batch, class_count]`; rows still sum to 1.
    pub labels: Tensor<T>,
    pub lambda: f64,
}

/// Blends two equally-shaped batches with one `λ ~ Beta(a, a)` draw for the
/// whole batch.
pub fn mixup<T: Scalar, R: Rng>(
    images_a: &Tensor<T>,
    labels_a: &Tensor<T>,
    images_b: &Tensor<T>,
    labels_b: &Tensor<T>,
    a: f64,
    rng: &mut R,
) -> Result<MixupBatch<T>> {
    if !(a > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mixup concentration must be positive, got {a}"
        )));
    }
    let beta = Beta::new(a, a)
        .map_err(|e| Error::InvalidArgument(format!("mixup concentration {a}: {e}")))?;
    let lambda = beta.sample(rng);
    mixup_with_lambda(images_a, labels_a, images_b, labels_b, lambda)
}

/// Mixup with an explicit λ; exposed seam for the Beta endpoint cases.
pub(crate) fn mixup_with_lambda<T: Scalar>(
    images_a: &Tensor<T>,
    labels_a: &Tensor<T>,
    images_b: &Tensor<T>,
    labels_b: &Tensor<T>,
    lambda: f64,
) -> Result<MixupBatch<T>> {
    if images_a.shape() != images_b.shape() || labels_a.shape() != labels_b.shape() {
        return Err(Error::InvalidArgument(format!(
            "mixup needs matching shapes, got images {:?} vs {:?}, labels {:?} vs {:?}",
            images_a.shape(),
            images_b.shape(),
            labels_a.shape(),
            labels_b.shape()
        )));
    }
    // Blended in f64 and clamped to the pair's interval so the convexity
    // invariant survives narrowing.
    let blend = |a: &Tensor<T>, b: &Tensor<T>| -> Vec<T> {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&av, &bv)| {
                let (av, bv) = (av.to_f64(), bv.to_f64());
                let v = lambda * av + (1.0 - lambda) * bv;
                T::from_f64(v.clamp(av.min(bv), av.max(bv)))
            })
            .collect()
    };
    Ok(MixupBatch {
        images: Tensor::from_vec(blend(images_a, images_b), images_a.shape())?,
        labels: Tensor::from_vec(blend(labels_a, labels_b), labels_a.shape())?,
        lambda,
    })
}

// ---------------------------------------------------------------------------
// Expansion transforms

/// Rotates a square multi-channel image about its center, resampling
/// bilinearly; points that leave the frame read the per-channel fill value.
/// Source coordinates within 1e-9 of a gridpoint collapse onto it, so the
/// axis-aligned angles (0°, 180°) reproduce pixels exactly.
pub fn rotate(image: &[f32], channels: usize, side: usize, degrees: f64, fill: &[f32]) -> Vec<f32> {
    debug_assert_eq!(image.len(), channels * side * side);
    debug_assert_eq!(fill.len(), channels);
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let center = (side as f64 - 1.0) / 2.0;
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let hw = side * side;
    let mut out = Vec::with_capacity(image.len());
    for ch in 0..channels {
        let plane = &image[ch * hw..(ch + 1) * hw];
        for r in 0..side {
            for c in 0..side {
                let dr = r as f64 - center;
                let dc = c as f64 - center;
                let sr = snap(center + dr * cos - dc * sin);
                let sc = snap(center + dr * sin + dc * cos);
                let max = (side - 1) as f64;
                if sr < 0.0 || sr > max || sc < 0.0 || sc > max {
                    out.push(fill[ch]);
                    continue;
                }
                let (r0, c0) = (sr.floor() as usize, sc.floor() as usize);
                let (r1, c1) = ((r0 + 1).min(side - 1), (c0 + 1).min(side - 1));
                let (fr, fc) = (sr - r0 as f64, sc - c0 as f64);
                let at = |r: usize, c: usize| plane[r * side + c] as f64;
                let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                out.push((top * (1.0 - fr) + bottom * fr) as f32);
            }
        }
    }
    out
}

/// Patch side for a cutout factor: `floor(factor × side)`.
pub(crate) fn cutout_side(side: usize, factor: f64) -> usize {
    (factor * side as f64).floor() as usize
}

/// Replaces one square patch, centered uniformly at random and clipped at
/// the borders, with the per-channel fill value. The patch side is a
/// uniform [0.2, 0.5) fraction of the image side.
pub fn cutout<R: Rng>(
    image: &[f32],
    channels: usize,
    side: usize,
    rng: &mut R,
    fill: &[f32],
) -> Vec<f32> {
    assert!(side >= 5, "cutout needs at least a 5-pixel side");
    let patch = cutout_side(side, rng.gen_range(0.2..0.5));
    let cr = rng.gen_range(0..side);
    let cc = rng.gen_range(0..side);
    cutout_at(image, channels, side, patch, cr, cc, fill)
}

/// Cutout with an explicit patch size and center.
pub(crate) fn cutout_at(
    image: &[f32],
    channels: usize,
    side: usize,
    patch: usize,
    center_r: usize,
    center_c: usize,
    fill: &[f32],
) -> Vec<f32> {
    debug_assert_eq!(image.len(), channels * side * side);
    let span = |center: usize| {
        let lo = center as isize - (patch / 2) as isize;
        let hi = (lo + patch as isize).min(side as isize).max(0) as usize;
        lo.max(0) as usize..hi
    };
    let (rows, cols) = (span(center_r), span(center_c));
    let hw = side * side;
    let mut out = image.to_vec();
    for ch in 0..channels {
        for r in rows.clone() {
            for c in cols.clone() {
                out[ch * hw + r * side + c] = fill[ch];
            }
        }
    }
    out
}

/// Start and length of tile `i` along one axis: equal `side / n` cuts with
/// the remainder absorbed by the last tile.
fn tile_bounds(side: usize, n: usize, i: usize) -> (usize, usize) {
    let base = side / n;
    let start = i * base;
    let len = if i == n - 1 { side - start } else { base };
    (start, len)
}

/// Uniform random permutation of the n×n tile grid. Tiles only trade
/// places with tiles of their own shape, so when the side is not divisible
/// by `n` the remainder-absorbing last row and column permute among
/// themselves; a divisible side makes this one full permutation.
pub(crate) fn draw_tile_permutation<R: Rng>(side: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n * n).collect();
    let classes: &[&dyn Fn(usize, usize) -> bool] = if side % n == 0 {
        &[&|_, _| true]
    } else {
        &[
            &|i, j| i < n - 1 && j < n - 1,
            &|i, j| i < n - 1 && j == n - 1,
            &|i, j| i == n - 1 && j < n - 1,
            &|i, j| i == n - 1 && j == n - 1,
        ]
    };
    for class in classes {
        let members: Vec<usize> = (0..n * n).filter(|&t| class(t / n, t % n)).collect();
        let mut images = members.clone();
        for k in (1..images.len()).rev() {
            images.swap(k, rng.gen_range(0..=k));
        }
        for (&slot, &src) in members.iter().zip(&images) {
            perm[slot] = src;
        }
    }
    perm
}

/// Reassembles the image with tile `perm[dst]` placed at slot `dst`.
pub(crate) fn apply_tile_permutation(
    image: &[f32],
    channels: usize,
    side: usize,
    n: usize,
    perm: &[usize],
) -> Vec<f32> {
    debug_assert_eq!(perm.len(), n * n);
    let hw = side * side;
    let mut out = vec![0.0f32; image.len()];
    for dst in 0..n * n {
        let src = perm[dst];
        let (dr, dl) = tile_bounds(side, n, dst / n);
        let (dc, dw) = tile_bounds(side, n, dst % n);
        let (sr, sl) = tile_bounds(side, n, src / n);
        let (sc, sw) = tile_bounds(side, n, src % n);
        debug_assert_eq!((dl, dw), (sl, sw), "permutation crossed shape classes");
        for ch in 0..channels {
            for row in 0..dl {
                let from = ch * hw + (sr + row) * side + sc;
                let to = ch * hw + (dr + row) * side + dc;
                out[to..to + dw].copy_from_slice(&image[from..from + sw]);
            }
        }
    }
    out
}

/// Partitions the image into an n×n tile grid, permutes the tiles
/// uniformly at random, and reassembles.
pub fn shuffle_tiles<R: Rng>(
    image: &[f32],
    channels: usize,
    side: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f32>> {
    if !(2..=4).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "tile shuffle supports 2x2, 3x3, and 4x4 grids, got {n}x{n}"
        )));
    }
    if side < n {
        return Err(Error::InvalidArgument(format!(
            "cannot cut a {side}-pixel side into {n} tiles"
        )));
    }
    let perm = draw_tile_permutation(side, n, rng);
    Ok(apply_tile_permutation(image, channels, side, n, &perm))
}

// ---------------------------------------------------------------------------
// Dataset expansion

/// How a record in an expanded dataset was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Original,
    Rotate,
    Cutout,
    Shuffle2,
    Shuffle3,
    Shuffle4,
}

impl Transform {
    /// The five generated copies, in record-block order.
    const GENERATED: [(Transform, u64); 5] = [
        (Transform::Rotate, SALT_ROTATE),
        (Transform::Cutout, SALT_CUTOUT),
        (Transform::Shuffle2, SALT_SHUFFLE2),
        (Transform::Shuffle3, SALT_SHUFFLE3),
        (Transform::Shuffle4, SALT_SHUFFLE4),
    ];
}

impl std::fmt::Display for Transform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Transform::Original => "original",
            Transform::Rotate => "rotate",
            Transform::Cutout => "cutout",
            Transform::Shuffle2 => "shuffle2",
            Transform::Shuffle3 => "shuffle3",
            Transform::Shuffle4 => "shuffle4",
        })
    }
}

/// Origin of one expanded record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub transform: Transform,
    /// Index of the source record in the original dataset.
    pub source: usize,
}

/// A dataset six times its source: the originals plus one copy per
/// transform, with per-record provenance.
pub struct ExpandedDataset {
    pub data: Dataset,
    pub provenance: Vec<Provenance>,
}

impl ExpandedDataset {
    /// Sidecar manifest: one `record transform source` line per record.
    pub fn provenance_manifest(&self) -> String {
        let mut out = String::from("resprune-provenance v1\n");
        for (i, p) in self.provenance.iter().enumerate() {
            out.push_str(&format!("{i} {} {}\n", p.transform, p.source));
        }
        out
    }

    pub fn write_provenance(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.provenance_manifest())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Builds the 6× expansion: a pure function of (dataset, seed). Each
/// generated record draws its own generator from (seed, transform, record)
/// so the result does not depend on iteration order.
pub fn expand_dataset(data: &Dataset, seed: u64) -> Result<ExpandedDataset> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot expand an empty dataset".into()));
    }
    if data.height() != data.width() {
        return Err(Error::InvalidArgument(format!(
            "expansion transforms need square images, got {}x{}",
            data.height(),
            data.width()
        )));
    }
    let side = data.height();
    let channels = data.channels();
    let fill = data.channel_means();
    let n = data.len();
    let mut images: Vec<f32> = Vec::with_capacity(6 * data.images().len());
    let mut labels: Vec<u32> = Vec::with_capacity(6 * n);
    let mut provenance: Vec<Provenance> = Vec::with_capacity(6 * n);

    images.extend_from_slice(data.images());
    labels.extend_from_slice(data.labels());
    provenance.extend((0..n).map(|source| Provenance { transform: Transform::Original, source }));

    for (transform, salt) in Transform::GENERATED {
        for source in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(seed, salt, source as u64));
            let img = data.image(source);
            let new = match transform {
                Transform::Rotate => {
                    rotate(img, channels, side, rng.gen_range(0.0..360.0), &fill)
                }
                Transform::Cutout => cutout(img, channels, side, &mut rng, &fill),
                Transform::Shuffle2 => shuffle_tiles(img, channels, side, 2, &mut rng)?,
                Transform::Shuffle3 => shuffle_tiles(img, channels, side, 3, &mut rng)?,
                Transform::Shuffle4 => shuffle_tiles(img, channels, side, 4, &mut rng)?,
                Transform::Original => unreachable!("originals are copied, not generated"),
            };
            images.extend(new.into_iter().map(quantize));
            labels.push(data.label(source));
            provenance.push(Provenance { transform, source });
        }
    }

    let mut out = Dataset::new(
        images,
        labels,
        channels,
        side,
        side,
        data.class_count(),
        format!("{}-x6", data.tag()),
    )?;
    let (mean, std) = data.stats();
    out.set_stats(&mean.to_vec(), &std.to_vec())?;
    Ok(ExpandedDataset { data: out, provenance })
}
