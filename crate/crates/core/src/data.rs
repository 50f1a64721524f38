//! Dataset ingestion: IDX containers and the built-in procedural shape set.

use std::path::{Path, PathBuf};

use dat_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, DatError, Result};
use crate::rng::{self, labels};

/// Images `[N, C, H, W]` in `[0, 1]` with class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, ..) = images.dims4("dataset")?;
        if n != labels.len() {
            return Err(invalid(
                "dataset",
                format!("{n} images but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid(
                "dataset",
                format!("label {bad} outside [0, {num_classes})"),
            ));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let x = self.images.select_outer(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// The first `n` examples.
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Ok(Self {
            images: self.images.slice_outer(0, n)?,
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        })
    }

    /// Sequential batches covering every example.
    pub fn eval_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Shuffled full batches for one epoch; a trailing partial batch is dropped.
    pub fn train_batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, labels::DATA_SHUFFLE, epoch as u64));
        let bs = batch_size.max(1);
        idx.chunks_exact(bs).map(<[usize]>::to_vec).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train: 10_000,
            test: 2_000,
            size: 32,
            seed: 0,
        }
    }
}

/// Returns `(train, test)`.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Synthetic(s) => Ok((
            synthetic_split(s, Split::Train)?,
            synthetic_split(s, Split::Test)?,
        )),
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            load_idx_pair(train_images, train_labels)?,
            load_idx_pair(test_images, test_labels)?,
        )),
    }
}

// ---------------------------------------------------------------- IDX ------

/// Magic of a rank-3 (greyscale) image file; colour files use rank 4, 0x0000_0804.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A decoded unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX container holding unsigned bytes (type code 0x08).
pub fn parse_idx(bytes: &[u8], name: &str) -> Result<IdxArray> {
    let fail = |offset: usize, reason: String| DatError::Idx {
        path: name.to_string(),
        offset,
        reason,
    };
    if bytes.len() < 4 {
        return Err(fail(
            bytes.len(),
            format!("truncated header: {} of 4 magic bytes", bytes.len()),
        ));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fail(
            0,
            format!("bad magic 0x{magic:08x}: first two bytes must be zero"),
        ));
    }
    if bytes[2] != 0x08 {
        return Err(fail(
            2,
            format!(
                "unsupported element type 0x{:02x}; only unsigned bytes (0x08)",
                bytes[2]
            ),
        ));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(fail(3, "rank must be at least 1".into()));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(fail(
            bytes.len(),
            format!(
                "truncated header: {rank} dimensions need {header} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut total: usize = 1;
    for i in 0..rank {
        let o = 4 + 4 * i;
        let d = u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
        if d == 0 {
            return Err(fail(o, format!("dimension {i} is zero")));
        }
        total = total
            .checked_mul(d)
            .ok_or_else(|| fail(o, "dimension product overflows".into()))?;
        dims.push(d);
    }
    let payload = bytes.len() - header;
    if payload < total {
        return Err(fail(
            bytes.len(),
            format!("truncated payload: expected {total} bytes after the header, found {payload}"),
        ));
    }
    if payload > total {
        return Err(fail(
            header + total,
            format!("{} unexpected trailing bytes", payload - total),
        ));
    }
    Ok(IdxArray {
        magic,
        dims,
        data: bytes[header..].to_vec(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

/// Builds a dataset from an IDX image file (`[N, H, W]` grey or `[N, C, H, W]`)
/// and a label file (`[N]`).
pub fn idx_dataset(
    images: &[u8],
    labels: &[u8],
    images_name: &str,
    labels_name: &str,
) -> Result<Dataset> {
    let img = parse_idx(images, images_name)?;
    let lab = parse_idx(labels, labels_name)?;
    if lab.magic != IDX_LABELS_MAGIC {
        return Err(DatError::Idx {
            path: labels_name.into(),
            offset: 0,
            reason: format!(
                "expected label magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{:08x}",
                lab.magic
            ),
        });
    }
    let (n, c, h, w) = match img.dims[..] {
        [n, h, w] => (n, 1, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(DatError::Idx {
                path: images_name.into(),
                offset: 3,
                reason: format!(
                    "images must have rank 3 or 4, found rank {}",
                    img.dims.len()
                ),
            })
        }
    };
    if lab.dims.len() != 1 || lab.dims[0] != n {
        return Err(DatError::Idx {
            path: labels_name.into(),
            offset: 4,
            reason: format!("label dims {:?} do not match {n} images", lab.dims),
        });
    }
    let labels: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    let pixels = img.data.iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(Tensor::new([n, c, h, w], pixels)?, labels, num_classes)
}

pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    idx_dataset(
        &read_file(images)?,
        &read_file(labels)?,
        &images.display().to_string(),
        &labels.display().to_string(),
    )
}

/// Serializes an unsigned-byte IDX array; the magic's last byte is the rank.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// IDX bytes `(images [N, C, H, W], labels [N])` with pixels rounded to 1/255.
pub fn dataset_to_idx(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let pixels: Vec<u8> = ds
        .images
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let labels: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    (
        encode_idx(ds.images.shape(), &pixels),
        encode_idx(&[ds.len()], &labels),
    )
}

// ----------------------------------------------------------- synthetic -----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Split {
    Train,
    Test,
}

/// Number of distinct shape primitives the generator can draw.
pub const SHAPE_KINDS: usize = 10;

fn inside(kind: usize, u: f64, v: f64) -> bool {
    match kind {
        0 => u * u + v * v <= 1.0,
        1 => {
            let r = (u * u + v * v).sqrt();
            (0.55..=1.0).contains(&r)
        }
        2 => u.abs().max(v.abs()) <= 0.8,
        3 => (0.5..=0.85).contains(&u.abs().max(v.abs())),
        4 => v <= 0.7 && v >= -0.9 + (1.6 / 0.9) * u.abs(),
        5 => u.abs() + v.abs() <= 1.0,
        6 => (u.abs() <= 0.28 && v.abs() <= 1.0) || (v.abs() <= 0.28 && u.abs() <= 1.0),
        7 => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            inside(6, s * (u - v), s * (u + v))
        }
        8 => u.abs() <= 1.0 && v.abs() <= 0.3,
        _ => v.abs() <= 1.0 && u.abs() <= 0.3,
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Draws one `3×size×size` image of shape primitive `kind`.
fn render<R: Rng>(kind: usize, size: usize, rng: &mut R) -> Vec<f32> {
    let s = size as f64;
    let bg0 = random_color(rng);
    let bg1 = random_color(rng);
    let bg_angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let bg_mean = [
        (bg0[0] + bg1[0]) / 2.0,
        (bg0[1] + bg1[1]) / 2.0,
        (bg0[2] + bg1[2]) / 2.0,
    ];
    let fg = loop {
        let c = random_color(rng);
        let d = ((c[0] - bg_mean[0]).powi(2)
            + (c[1] - bg_mean[1]).powi(2)
            + (c[2] - bg_mean[2]).powi(2))
        .sqrt();
        if d >= 0.45 {
            break c;
        }
    };
    let shade: f64 = rng.random_range(-0.15..0.15);
    let radius = rng.random_range(0.22 * s..0.37 * s);
    let margin = 0.8 * radius + 1.0;
    let cx = rng.random_range(margin..s - margin);
    let cy = rng.random_range(margin..s - margin);
    let rot: f64 = rng.random_range(-0.26..0.26);
    let (sin, cos) = rot.sin_cos();
    let (dx, dy) = bg_angle.sin_cos();

    let mut img = vec![0f32; 3 * size * size];
    const SS: usize = 4;
    for py in 0..size {
        for px in 0..size {
            let mut cover = 0.0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f64 + (sx as f64 + 0.5) / SS as f64 - cx;
                    let y = py as f64 + (sy as f64 + 0.5) / SS as f64 - cy;
                    let u = (cos * x + sin * y) / radius;
                    let v = (-sin * x + cos * y) / radius;
                    if inside(kind, u, v) {
                        cover += 1.0;
                    }
                }
            }
            let cover = cover / (SS * SS) as f64;
            let t = ((px as f64 / s - 0.5) * dx + (py as f64 / s - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            let light = 1.0 + shade * ((py as f64 - cy) / radius);
            for ch in 0..3 {
                let bg = bg0[ch] * (1.0 - t) + bg1[ch] * t;
                let f = (fg[ch] * light).clamp(0.0, 1.0);
                img[(ch * size + py) * size + px] = (bg * (1.0 - cover) + f * cover) as f32;
            }
        }
    }
    img
}

fn synthetic_split(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > SHAPE_KINDS {
        return Err(invalid(
            "synthetic",
            format!("classes must be in 2..={SHAPE_KINDS}"),
        ));
    }
    if spec.size < 8 {
        return Err(invalid("synthetic", "image size must be at least 8"));
    }
    let (n, offset, split_id) = match split {
        Split::Train => (spec.train, 0u64, 0u64),
        Split::Test => (spec.test, spec.train as u64, 1u64),
    };
    if n == 0 {
        return Err(invalid("synthetic", "split size must be positive"));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng::stream(
        spec.seed,
        labels::SYNTHETIC_DATA,
        u64::MAX - split_id,
    ));
    let size = spec.size;
    let mut pixels = Vec::with_capacity(n * 3 * size * size);
    for (i, &label) in labels.iter().enumerate() {
        let mut r = rng::stream(spec.seed, labels::SYNTHETIC_DATA, offset + i as u64);
        pixels.extend(render(label, size, &mut r));
    }
    Dataset::new(
        Tensor::new([n, 3, size, size], pixels)?,
        labels,
        spec.classes,
    )
}

/// Generates both splits of the procedural shape dataset.
pub fn synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    load_dataset(&DatasetSpec::Synthetic(spec.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            classes: 10,
            train: 95,
            test: 23,
            size: 32,
            seed: 3,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let (a, at) = synthetic(&small()).unwrap();
        let (b, bt) = synthetic(&small()).unwrap();
        assert!(a.images.bitwise_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        assert!(at.images.bitwise_eq(&bt.images));
        let (c, _) = synthetic(&SyntheticSpec { seed: 4, ..small() }).unwrap();
        assert!(!a.images.bitwise_eq(&c.images));
    }

    #[test]
    fn synthetic_classes_are_balanced() {
        let (train, test) = synthetic(&small()).unwrap();
        for ds in [&train, &test] {
            let per = ds.len() as f64 / ds.num_classes as f64;
            for &c in &ds.class_counts() {
                assert!((c as f64 - per).abs() <= 1.0, "{c} vs {per}");
            }
        }
    }

    #[test]
    fn synthetic_pixels_in_unit_range() {
        let (train, _) = synthetic(&small()).unwrap();
        assert_eq!(train.image_shape(), (3, 32, 32));
        assert!(train
            .images
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn idx_magic_is_big_endian() {
        let bytes = encode_idx(&[2, 3, 4], &[7; 24]);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let arr = parse_idx(&bytes, "mem").unwrap();
        assert_eq!(arr.magic, 0x0000_0803);
        assert_eq!(arr.dims, vec![2, 3, 4]);
        assert_eq!(&bytes[4..8], &[0, 0, 0, 2]);
    }

    #[test]
    fn idx_pair_builds_dataset() {
        let img = encode_idx(&[2, 2, 2], &[0, 255, 51, 102, 0, 0, 0, 255]);
        let lab = encode_idx(&[2], &[3, 1]);
        let ds = idx_dataset(&img, &lab, "img", "lab").unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.labels, vec![3, 1]);
        assert_eq!(ds.num_classes, 4);
        assert_eq!(ds.images.data()[1], 1.0);
        assert_eq!(ds.images.data()[2], 0.2);

        let rank2 = encode_idx(&[2, 4], &[0; 8]);
        assert!(idx_dataset(&rank2, &lab, "img", "lab")
            .unwrap_err()
            .to_string()
            .contains("rank"));
    }

    #[test]
    fn colour_dataset_round_trips_through_idx() {
        let (train, _) = synthetic(&small()).unwrap();
        let (img, lab) = dataset_to_idx(&train);
        let back = idx_dataset(&img, &lab, "img", "lab").unwrap();
        assert_eq!(back.images.shape(), train.images.shape());
        assert_eq!(back.labels, train.labels);
        for (a, b) in back.images.data().iter().zip(train.images.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn train_batches_are_full_and_seeded() {
        let (train, _) = synthetic(&small()).unwrap();
        let a = train.train_batches(10, 1, 0);
        assert_eq!(a.len(), 9);
        assert!(a.iter().all(|b| b.len() == 10));
        assert_eq!(a, train.train_batches(10, 1, 0));
        assert_ne!(a, train.train_batches(10, 1, 1));
    }
}
