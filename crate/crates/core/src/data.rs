//! MNIST (IDX) and CIFAR-10 (binary) datasets with deterministic batching.
//!
//! Pixels stay as raw bytes; a batch is decoded as
//! `(byte / 255 - mean[c]) / std[c]`.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

pub const MNIST_MEAN: [f64; 1] = [0.1307];
pub const MNIST_STD: [f64; 1] = [0.3081];
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "SLB_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

impl DatasetName {
    /// Canonical `(train, test)` sizes.
    pub fn canonical_counts(self) -> (usize, usize) {
        match self {
            DatasetName::Mnist => (60_000, 10_000),
            DatasetName::Cifar10 => (50_000, 10_000),
        }
    }

    /// `[channels, height, width]` of one image.
    pub fn image_shape(self) -> [usize; 3] {
        match self {
            DatasetName::Mnist => [1, 28, 28],
            DatasetName::Cifar10 => [3, 32, 32],
        }
    }

    pub fn normalization(self) -> Normalization {
        match self {
            DatasetName::Mnist => Normalization { mean: MNIST_MEAN.to_vec(), std: MNIST_STD.to_vec() },
            DatasetName::Cifar10 => Normalization { mean: CIFAR_MEAN.to_vec(), std: CIFAR_STD.to_vec() },
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar10" => Ok(DatasetName::Cifar10),
            other => Err(Error::InvalidArgument(format!("unknown dataset `{other}` (mnist|cifar10)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub root: PathBuf,
    pub split: Split,
    /// Random crop with 4-pixel padding plus horizontal flip; CIFAR train split only.
    pub augment: bool,
}

impl DatasetSpec {
    pub fn new(name: DatasetName, root: impl Into<PathBuf>, split: Split) -> Self {
        DatasetSpec { name, root: root.into(), split, augment: false }
    }
}

/// Dataset root from [`DATA_ROOT_ENV`], falling back to `default`.
pub fn data_root(default: impl Into<PathBuf>) -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| default.into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: DatasetName,
    /// `[C, H, W]` of one image.
    pub image_shape: [usize; 3],
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub normalization: Normalization,
    pub augment: bool,
}

fn parse_err(source: &str, detail: impl Into<String>) -> Error {
    Error::Parse { source_name: source.to_string(), detail: detail.into() }
}

fn maybe_gunzip(bytes: Vec<u8>, source: &str) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..]).read_to_end(&mut out).map_err(|e| parse_err(source, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], at: usize, source: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(source, format!("truncated header ({} bytes)", bytes.len())))
}

/// IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], source: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, source)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { source_name: source.to_string(), expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4, source)? as usize;
    let rows = be_u32(bytes, 8, source)? as usize;
    let cols = be_u32(bytes, 12, source)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(parse_err(source, format!("expected {need} pixel bytes for {n}x{rows}x{cols}, found {}", body.len())));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], source: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, source)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { source_name: source.to_string(), expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4, source)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(parse_err(source, format!("expected {n} labels, found {}", body.len())));
    }
    if let Some(bad) = body.iter().find(|&&l| l > 9) {
        return Err(parse_err(source, format!("label {bad} out of range 0..=9")));
    }
    Ok(body.to_vec())
}

/// Concatenated CIFAR-10 records: returns `(pixels, labels)`, pixels CHW per image.
pub fn parse_cifar_records(bytes: &[u8], source: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(parse_err(
            source,
            format!("{} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        if rec[0] > 9 {
            return Err(parse_err(source, format!("label {} out of range 0..=9", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn find_existing(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [dir.join(stem), dir.join(format!("{stem}.gz"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::io(dir.join(stem), std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found")))
}

impl Dataset {
    pub fn from_parts(
        name: DatasetName,
        image_shape: [usize; 3],
        pixels: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Dataset> {
        let per: usize = image_shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} pixel bytes for {} images of {image_shape:?}", pixels.len(), labels.len()),
            ));
        }
        Ok(Dataset { name, image_shape, pixels, labels, normalization: name.normalization(), augment: false })
    }

    /// Loads a split and checks it against the canonical counts.
    pub fn load(spec: &DatasetSpec) -> Result<Dataset> {
        let mut ds = match spec.name {
            DatasetName::Mnist => {
                let dir = if spec.root.join("mnist").is_dir() { spec.root.join("mnist") } else { spec.root.clone() };
                let prefix = match spec.split {
                    Split::Train => "train",
                    Split::Test => "t10k",
                };
                let ip = find_existing(&dir, &format!("{prefix}-images-idx3-ubyte"))?;
                let lp = find_existing(&dir, &format!("{prefix}-labels-idx1-ubyte"))?;
                let isrc = ip.display().to_string();
                let lsrc = lp.display().to_string();
                let (n, rows, cols, pixels) = parse_idx_images(&maybe_gunzip(read_file(&ip)?, &isrc)?, &isrc)?;
                let labels = parse_idx_labels(&maybe_gunzip(read_file(&lp)?, &lsrc)?, &lsrc)?;
                if labels.len() != n {
                    return Err(parse_err(&lsrc, format!("{} labels for {n} images", labels.len())));
                }
                Dataset::from_parts(DatasetName::Mnist, [1, rows, cols], pixels, labels)?
            }
            DatasetName::Cifar10 => {
                let dir = ["cifar-10-batches-bin", "cifar10"]
                    .iter()
                    .map(|d| spec.root.join(d))
                    .find(|d| d.is_dir())
                    .unwrap_or_else(|| spec.root.clone());
                let files: Vec<String> = match spec.split {
                    Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
                    Split::Test => vec!["test_batch.bin".into()],
                };
                let (mut pixels, mut labels) = (Vec::new(), Vec::new());
                for f in files {
                    let p = dir.join(f);
                    let (px, lb) = parse_cifar_records(&read_file(&p)?, &p.display().to_string())?;
                    pixels.extend(px);
                    labels.extend(lb);
                }
                Dataset::from_parts(DatasetName::Cifar10, [3, 32, 32], pixels, labels)?
            }
        };
        let (train, test) = spec.name.canonical_counts();
        let want = match spec.split {
            Split::Train => train,
            Split::Test => test,
        };
        if ds.len() != want {
            return Err(parse_err(
                &spec.root.display().to_string(),
                format!("{} {} split has {} samples, expected {want}", spec.name, spec.split, ds.len()),
            ));
        }
        ds.augment = spec.augment && spec.split == Split::Train && spec.name == DatasetName::Cifar10;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Decodes samples `indices` into a normalized `[B, C, H, W]` tensor.
    /// `augment_rng` enables crop-and-flip when the dataset allows it.
    pub fn batch(&self, indices: &[usize], mut augment_rng: Option<&mut ChaCha8Rng>) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_shape;
        let per = self.image_len();
        let scale: Vec<f64> = self.normalization.std.iter().map(|s| 1.0 / (255.0 * s)).collect();
        let shift: Vec<f64> = self.normalization.mean.iter().zip(&self.normalization.std).map(|(m, s)| m / s).collect();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            let img = &self.pixels[i * per..(i + 1) * per];
            let (dy, dx, flip) = match augment_rng.as_deref_mut() {
                Some(rng) if self.augment => {
                    (rng.gen_range(0..=8) as isize - 4, rng.gen_range(0..=8) as isize - 4, rng.gen_bool(0.5))
                }
                _ => (0, 0, false),
            };
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize + dy;
                        let sx = if flip { (w - 1 - x) as isize } else { x as isize } + dx;
                        let byte = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            img[(ch * h + sy as usize) * w + sx as usize]
                        } else {
                            0
                        };
                        data.push(byte as f64 * scale[ch] - shift[ch]);
                    }
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        (Tensor::new(vec![indices.len(), c, h, w], data).expect("shape"), labels)
    }

    /// Batches of one epoch. With `shuffle` the order is a permutation drawn
    /// from `(seed, epoch)`; the final partial batch is included.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Batches<'_> {
        let order = epoch_order(self.len(), seed, epoch, shuffle);
        let mut aug = ChaCha8Rng::seed_from_u64(seed);
        aug.set_stream(epoch.wrapping_add(1 << 32));
        Batches { data: self, order, batch_size: batch_size.max(1), pos: 0, aug }
    }
}

/// Sample order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    order
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    aug: ChaCha8Rng,
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.data.batch(idx, Some(&mut self.aug)))
    }
}

/// Synthetic IDX encoding, used by tests and tools.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn toy(n: usize) -> Dataset {
        let pixels: Vec<u8> = (0..n * 4).map(|i| (i * 37 % 256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::from_parts(DatasetName::Mnist, [1, 2, 2], pixels, labels).unwrap()
    }

    #[test]
    fn idx_header_is_big_endian() {
        let bytes = encode_idx_images(2, 3, &[1, 2, 3, 4, 5, 6]);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(&bytes[4..8], &[0, 0, 0, 1]);
        let (n, r, c, px) = parse_idx_images(&bytes, "t").unwrap();
        assert_eq!((n, r, c), (1, 2, 3));
        assert_eq!(px, vec![1, 2, 3, 4, 5, 6]);
        let lb = encode_idx_labels(&[7, 9]);
        assert_eq!(&lb[..4], &[0, 0, 8, 1]);
        assert_eq!(parse_idx_labels(&lb, "t").unwrap(), vec![7, 9]);
    }

    #[test]
    fn wrong_magic_names_both_values() {
        let lb = encode_idx_labels(&[1]);
        let err = parse_idx_images(&lb, "labels.bin").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("0x00000803") && msg.contains("0x00000801"), "{msg}");
    }

    #[test]
    fn truncated_files_are_rejected() {
        let bytes = encode_idx_images(2, 2, &[1, 2, 3, 4]);
        assert!(parse_idx_images(&bytes[..18], "t").is_err());
        assert!(parse_idx_images(&bytes[..10], "t").is_err());
        assert!(parse_idx_labels(&encode_idx_labels(&[1, 2])[..9], "t").is_err());
    }

    #[test]
    fn gzip_is_transparent() {
        let raw = encode_idx_labels(&[3, 1, 4]);
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(maybe_gunzip(gz, "t").unwrap(), raw);
    }

    #[test]
    fn cifar_records() {
        let mut rec = vec![0u8; 2 * CIFAR_RECORD_BYTES];
        rec[0] = 3;
        rec[1] = 200;
        rec[CIFAR_RECORD_BYTES] = 8;
        let (px, lb) = parse_cifar_records(&rec, "t").unwrap();
        assert_eq!(lb, vec![3, 8]);
        assert_eq!(px.len(), 2 * 3072);
        assert_eq!(px[0], 200);
        assert!(parse_cifar_records(&rec[..3000], "t").is_err());
    }

    #[test]
    fn decoding_is_exact_normalization() {
        let ds = toy(3);
        let (x, y) = ds.batch(&[1], None);
        assert_eq!(y, vec![1]);
        for (v, b) in x.data().iter().zip(&ds.pixels[4..8]) {
            assert_eq!(*v, *b as f64 * (1.0 / (255.0 * 0.3081)) - 0.1307 / 0.3081);
            assert!((v - (*b as f64 / 255.0 - 0.1307) / 0.3081).abs() < 1e-12);
        }
    }

    #[test]
    fn single_batch_keeps_order() {
        let ds = toy(7);
        let batches: Vec<_> = ds.batches(7, 1, 0, false).collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].1, vec![0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn shuffling_is_seeded_and_complete() {
        let ds = toy(23);
        let a: Vec<_> = ds.batches(5, 9, 2, true).map(|b| b.1).collect();
        let b: Vec<_> = ds.batches(5, 9, 2, true).map(|b| b.1).collect();
        let c: Vec<_> = ds.batches(5, 9, 3, true).map(|b| b.1).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 5);
        assert_eq!(a.last().unwrap().len(), 3);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        let mut want: Vec<usize> = ds.labels.iter().map(|&l| l as usize).collect();
        want.sort();
        assert_eq!(all, want);
    }

    #[test]
    fn augmentation_only_when_enabled() {
        let pixels: Vec<u8> = (0..2 * 3072).map(|i| (i % 251) as u8).collect();
        let mut ds = Dataset::from_parts(DatasetName::Cifar10, [3, 32, 32], pixels, vec![1, 2]).unwrap();
        let plain = ds.batch(&[0, 1], None).0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(ds.batch(&[0, 1], Some(&mut rng)).0, plain);
        ds.augment = true;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let aug: Vec<_> = (0..4).map(|_| ds.batch(&[0, 1], Some(&mut rng)).0).collect();
        assert!(aug.iter().any(|a| *a != plain));
    }

    #[test]
    fn load_checks_canonical_counts() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("t10k-images-idx3-ubyte"), encode_idx_images(2, 2, &[0; 8])).unwrap();
        fs::write(dir.path().join("t10k-labels-idx1-ubyte"), encode_idx_labels(&[0, 1])).unwrap();
        let spec = DatasetSpec::new(DatasetName::Mnist, dir.path(), Split::Test);
        let err = Dataset::load(&spec).unwrap_err().to_string();
        assert!(err.contains("expected 10000"), "{err}");
        let missing = DatasetSpec::new(DatasetName::Mnist, dir.path(), Split::Train);
        assert!(Dataset::load(&missing).is_err());
    }
}
