//! Dataset ingestion (IDX image/label files), batching, and the synthetic
//! fixtures oracle tests train against.

use crate::error::{Error, Result};
use crate::model::seeded_rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "CTT_DATA_DIR";

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled image set with pixels scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    pub split: String,
    pub source: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: &str, source: &str) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::RankMismatch { op: "dataset", expected: 4, got: images.shape().len() });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::DimensionMismatch {
                op: "dataset",
                axis: "samples",
                expected: images.shape()[0],
                got: labels.len(),
            });
        }
        Ok(Dataset { images, labels, split: split.into(), source: source.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single sample, `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copy of sample `i` as a rank-3 tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let [c, h, w] = self.image_shape();
        let n = c * h * w;
        let data = self.images.data()[i * n..(i + 1) * n].to_vec();
        Tensor::from_vec(vec![c, h, w], data).expect("slice length matches sample shape")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-pixel min/max over the whole set, as an interval over one sample.
    pub fn pixel_bounds(&self) -> crate::interval::IntervalTensor {
        let [c, h, w] = self.image_shape();
        let n = c * h * w;
        let mut lo = vec![f32::INFINITY; n];
        let mut hi = vec![f32::NEG_INFINITY; n];
        for i in 0..self.len() {
            let row = &self.images.data()[i * n..(i + 1) * n];
            for (j, &v) in row.iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        crate::interval::IntervalTensor::new(
            Tensor::from_vec(vec![c, h, w], lo).expect("shape matches"),
            Tensor::from_vec(vec![c, h, w], hi).expect("shape matches"),
        )
        .expect("min <= max by construction")
    }

    /// Seeded subsample of `n` indices without replacement (all indices when
    /// `n >= len`).
    pub fn subsample_indices(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if n >= self.len() {
            return idx;
        }
        let mut rng = seeded_rng(seed, 0x5b5);
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx.sort_unstable();
        idx
    }

    /// Epoch iterator over `(images, labels)` batches covering every sample
    /// exactly once; order is a seeded permutation when `shuffle` is set.
    pub fn batches(&self, batch_size: usize, seed: u64, shuffle: bool) -> Batches<'_> {
        assert!(batch_size >= 1, "batch_size must be >= 1");
        let mut order: Vec<usize> = (0..self.len()).collect();
        if shuffle {
            let mut rng = seeded_rng(seed, 0xba7c);
            order.shuffle(&mut rng);
        }
        Batches { dataset: self, order, batch_size, cursor: 0 }
    }
}

/// Iterator returned by [`Dataset::batches`].
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Vec<Tensor>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let images = idx.iter().map(|&i| self.dataset.image(i)).collect();
        let labels = idx.iter().map(|&i| self.dataset.label(i)).collect();
        Some((images, labels))
    }
}

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(u32::from_be_bytes(buf))
}

/// Parse a pair of big-endian IDX files (images magic 0x803, labels magic
/// 0x801). Pixels are u8 scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut f = File::open(images_path).map_err(|e| Error::Io {
        path: images_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let magic = read_u32_be(&mut f, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::DatasetFormat(format!(
            "{}: bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let n = read_u32_be(&mut f, images_path)? as usize;
    let h = read_u32_be(&mut f, images_path)? as usize;
    let w = read_u32_be(&mut f, images_path)? as usize;
    let expected = n * h * w;
    let mut raw = Vec::with_capacity(expected);
    f.read_to_end(&mut raw).map_err(|e| Error::Io {
        path: images_path.display().to_string(),
        detail: e.to_string(),
    })?;
    if raw.len() != expected {
        return Err(Error::Truncated { expected, got: raw.len() });
    }
    let data: Vec<f32> = raw.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::from_vec(vec![n, 1, h, w], data)?;

    let mut f = File::open(labels_path).map_err(|e| Error::Io {
        path: labels_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let magic = read_u32_be(&mut f, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::DatasetFormat(format!(
            "{}: bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let n_labels = read_u32_be(&mut f, labels_path)? as usize;
    if n_labels != n {
        return Err(Error::DatasetFormat(format!(
            "image count {n} does not match label count {n_labels}"
        )));
    }
    let mut raw = Vec::with_capacity(n_labels);
    f.read_to_end(&mut raw).map_err(|e| Error::Io {
        path: labels_path.display().to_string(),
        detail: e.to_string(),
    })?;
    if raw.len() != n_labels {
        return Err(Error::Truncated { expected: n_labels, got: raw.len() });
    }
    let labels = raw.into_iter().map(|b| b as usize).collect();
    Dataset::new(images, labels, "unknown", &images_path.display().to_string())
}

/// Which half of a standard IDX distribution to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Load `train-*`/`t10k-*` IDX files from `dir` (defaults to
/// `$CTT_DATA_DIR` when `dir` is `None`).
pub fn load_mnist(dir: Option<&Path>, split: Split) -> Result<Dataset> {
    let root: PathBuf = match dir {
        Some(d) => d.to_path_buf(),
        None => std::env::var(DATA_DIR_ENV)
            .map(PathBuf::from)
            .map_err(|_| Error::DatasetFormat(format!("{DATA_DIR_ENV} is not set and no --data-dir given")))?,
    };
    let (imgs, lbls, tag) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "train"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", "test"),
    };
    let mut ds = load_idx(&root.join(imgs), &root.join(lbls))?;
    ds.split = tag.to_string();
    ds.source = root.display().to_string();
    Ok(ds)
}

/// Kinds of deterministic synthetic datasets for oracle tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    /// Two Gaussian blobs in pixel space that a tiny network can fit to 100%.
    Separable,
    /// Identical mid-gray images, all labelled 0.
    Constant,
    /// Alternating all-0 / all-1 images, so profiled pixel bounds are [0, 1].
    Corner,
}

/// Build a synthetic dataset shaped for the `tiny` preset (1x6x6).
pub fn synthetic_fixture(kind: FixtureKind, n: usize, seed: u64) -> Dataset {
    assert!(n >= 1, "fixture needs at least one sample");
    let (c, h, w) = (1usize, 6usize, 6usize);
    let pixels = c * h * w;
    let mut data = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    let mut rng = seeded_rng(seed, 0xf1);
    match kind {
        FixtureKind::Separable => {
            let noise = Normal::new(0.0f32, 0.08).expect("valid std");
            for i in 0..n {
                let class = i % 2;
                labels.push(class);
                for p in 0..pixels {
                    let (y, x) = (p / w, p % w);
                    // class 0 lights the top-left quadrant, class 1 the bottom-right
                    let lit = if class == 0 { y < 3 && x < 3 } else { y >= 3 && x >= 3 };
                    let base = if lit { 0.85 } else { 0.1 };
                    data.push((base + noise.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
        }
        FixtureKind::Constant => {
            for _ in 0..n {
                labels.push(0);
                data.extend(std::iter::repeat(0.5).take(pixels));
            }
        }
        FixtureKind::Corner => {
            for i in 0..n {
                labels.push(i % 2);
                let v = if i % 2 == 0 { 0.0 } else { 1.0 };
                data.extend(std::iter::repeat(v).take(pixels));
            }
        }
    }
    let images = Tensor::from_vec(vec![n, c, h, w], data).expect("fixture buffer matches shape");
    Dataset::new(images, labels, "train", &format!("synthetic:{kind:?}")).expect("labels match")
}

/// Seeded uniform-noise image in [0, 1] (black-box attack starting points).
pub fn random_image<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::rand_uniform(shape, 0.0, 1.0, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_pair(dir: &Path, n: usize, h: usize, w: usize) -> (PathBuf, PathBuf) {
        let img_path = dir.join("imgs");
        let lbl_path = dir.join("lbls");
        let mut f = File::create(&img_path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(h as u32).to_be_bytes()).unwrap();
        f.write_all(&(w as u32).to_be_bytes()).unwrap();
        let payload: Vec<u8> = (0..n * h * w).map(|i| (i % 256) as u8).collect();
        f.write_all(&payload).unwrap();
        let mut f = File::create(&lbl_path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&vec![7u8; n]).unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = write_idx_pair(dir.path(), 3, 4, 4);
        let ds = load_idx(&imgs, &lbls).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.image_shape(), [1, 4, 4]);
        assert_eq!(ds.label(0), 7);
        for (i, &v) in ds.images.data().iter().enumerate() {
            assert_eq!(v, (i % 256) as f32 / 255.0);
        }
        assert_eq!(255.0f32 / 255.0, 1.0);
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn u8_to_float_round_trip_is_lossless() {
        for b in 0..=255u8 {
            let f = b as f32 / 255.0;
            let back = (f * 255.0).round() as u8;
            assert_eq!(b, back);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = write_idx_pair(dir.path(), 2, 4, 4);
        let mut bytes = std::fs::read(&imgs).unwrap();
        bytes[3] = 0x42;
        std::fs::write(&imgs, bytes).unwrap();
        assert!(matches!(load_idx(&imgs, &lbls), Err(Error::DatasetFormat(_))));
    }

    #[test]
    fn truncated_payload_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = write_idx_pair(dir.path(), 2, 4, 4);
        let bytes = std::fs::read(&imgs).unwrap();
        std::fs::write(&imgs, &bytes[..bytes.len() - 5]).unwrap();
        match load_idx(&imgs, &lbls) {
            Err(Error::Truncated { expected: 32, got: 27 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = write_idx_pair(dir.path(), 2, 4, 4);
        let mut bytes = std::fs::read(&lbls).unwrap();
        bytes[7] = 3; // claim 3 labels
        bytes.push(7);
        std::fs::write(&lbls, bytes).unwrap();
        assert!(matches!(load_idx(&imgs, &lbls), Err(Error::DatasetFormat(_))));
    }

    #[test]
    fn batch_sizes_cover_every_sample_once() {
        let ds = synthetic_fixture(FixtureKind::Separable, 10, 0);
        let sizes: Vec<usize> = ds.batches(3, 1, true).map(|(im, _)| im.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn same_seed_gives_same_order() {
        let ds = synthetic_fixture(FixtureKind::Separable, 16, 0);
        let a: Vec<usize> = ds.batches(4, 9, true).flat_map(|(_, l)| l).collect();
        let b: Vec<usize> = ds.batches(4, 9, true).flat_map(|(_, l)| l).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn shuffle_off_keeps_original_order() {
        let ds = synthetic_fixture(FixtureKind::Corner, 6, 0);
        let labels: Vec<usize> = ds.batches(2, 1, false).flat_map(|(_, l)| l).collect();
        assert_eq!(labels, vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn constant_fixture_profiles_to_degenerate_box() {
        let ds = synthetic_fixture(FixtureKind::Constant, 5, 0);
        let bounds = ds.pixel_bounds();
        assert_eq!(bounds.lower().data(), bounds.upper().data());
        assert!(bounds.lower().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn corner_fixture_profiles_to_unit_box() {
        let ds = synthetic_fixture(FixtureKind::Corner, 4, 0);
        let bounds = ds.pixel_bounds();
        assert!(bounds.lower().data().iter().all(|&v| v == 0.0));
        assert!(bounds.upper().data().iter().all(|&v| v == 1.0));
    }
}
