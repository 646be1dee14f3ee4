//! MNIST IDX and CIFAR-10 binary readers, normalization and batching.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Result, TrainError};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images as `f64` planes (channel-major per example) plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub side: usize,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<u8>, channels: usize, side: usize) -> Result<Self> {
        let per = channels * side * side;
        if per == 0 || images.len() != labels.len() * per {
            return Err(TrainError::Format(format!(
                "{} pixel values for {} labels of {channels}x{side}x{side}",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            channels,
            side,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.example_len();
        &self.images[i * d..(i + 1) * d]
    }

    /// First `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.example_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            channels: self.channels,
            side: self.side,
        }
    }

    /// Gathers the given examples into one contiguous batch.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.example_len());
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.image(i));
            y.push(self.labels[i] as usize);
        }
        (x, y)
    }

    pub fn label_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            if (l as usize) < classes {
                h[l as usize] += 1;
            }
        }
        h
    }
}

/// Per-channel mean and standard deviation of a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(data: &Dataset) -> Self {
        let plane = data.side * data.side;
        let count = (data.len() * plane) as f64;
        let mut mean = vec![0.0; data.channels];
        let mut std = vec![0.0; data.channels];
        for c in 0..data.channels {
            let values = || (0..data.len()).flat_map(move |i| &data.image(i)[c * plane..(c + 1) * plane]);
            let mu = values().sum::<f64>() / count;
            let var = values().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
            mean[c] = mu;
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, data: &mut Dataset) {
        let plane = data.side * data.side;
        let d = data.example_len();
        for ex in data.images.chunks_mut(d) {
            for (c, ch) in ex.chunks_mut(plane).enumerate() {
                ch.iter_mut().for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
            }
        }
    }
}

/// Reads a whole file, transparently inflating gzip.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path).map_err(|e| TrainError::io(path, e))?)
        .read_to_end(&mut raw)
        .map_err(|e| TrainError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| TrainError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| TrainError::Length(format!("{what}: header truncated")))
}

/// IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "IDX images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(TrainError::Format(format!(
            "IDX images: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "IDX images")? as usize;
    let rows = be_u32(bytes, 8, "IDX images")? as usize;
    let cols = be_u32(bytes, 12, "IDX images")? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() < want {
        return Err(TrainError::Length(format!(
            "IDX images: header promises {want} pixels, file holds {}",
            body.len()
        )));
    }
    Ok((n, rows, cols, &body[..want]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "IDX labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(TrainError::Format(format!(
            "IDX labels: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "IDX labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(TrainError::Length(format!(
            "IDX labels: header promises {n} labels, file holds {}",
            body.len()
        )));
    }
    Ok(&body[..n])
}

/// Images scaled to `[0, 1]`, shape `(N, 1, 28, 28)` for MNIST.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = read_maybe_gz(images)?;
    let lb = read_maybe_gz(labels)?;
    let (n, rows, cols, px) = parse_idx_images(&ib)?;
    let ls = parse_idx_labels(&lb)?;
    if rows != cols {
        return Err(TrainError::Format(format!("IDX images are {rows}x{cols}, expected square")));
    }
    if ls.len() != n {
        return Err(TrainError::Format(format!("{n} images but {} labels", ls.len())));
    }
    Dataset::new(px.iter().map(|&p| p as f64 / 255.0).collect(), ls.to_vec(), 1, rows)
}

/// Concatenated CIFAR-10 batch files: 1 label byte then 3072 pixel bytes
/// (red, green, blue planes) per record.
pub fn load_cifar10_bin(paths: &[PathBuf]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_maybe_gz(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(TrainError::Format(format!(
                "{}: {} bytes is not a multiple of {CIFAR_RECORD}",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            labels.push(rec[0]);
            images.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
        }
    }
    Dataset::new(images, labels, 3, 32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

impl std::str::FromStr for DatasetName {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "cifar10" | "cifar-10" => Ok(Self::Cifar10),
            other => Err(TrainError::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mnist => "mnist",
            Self::Cifar10 => "cifar10",
        })
    }
}

/// Where a dataset lives and how much of it to use.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub dir: PathBuf,
    /// Keep only the first `n` training / test examples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

/// Finds `name` or `name.gz` in `dir`.
fn locate(dir: &Path, name: &str) -> Result<PathBuf> {
    for candidate in [dir.join(name), dir.join(format!("{name}.gz"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(TrainError::Config(format!("{name}[.gz] not found in {}", dir.display())))
}

/// A normalized train/test pair.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

impl DatasetSpec {
    pub fn new(name: DatasetName, dir: impl Into<PathBuf>) -> Self {
        Self {
            name,
            dir: dir.into(),
            train_limit: None,
            test_limit: None,
        }
    }

    pub fn load_raw(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.name {
            DatasetName::Mnist => (
                load_mnist_idx(
                    &locate(&self.dir, "train-images-idx3-ubyte")?,
                    &locate(&self.dir, "train-labels-idx1-ubyte")?,
                )?,
                load_mnist_idx(
                    &locate(&self.dir, "t10k-images-idx3-ubyte")?,
                    &locate(&self.dir, "t10k-labels-idx1-ubyte")?,
                )?,
            ),
            DatasetName::Cifar10 => {
                let dir = if self.dir.join("cifar-10-batches-bin").is_dir() {
                    self.dir.join("cifar-10-batches-bin")
                } else {
                    self.dir.clone()
                };
                let train: Result<Vec<_>> = (1..=5).map(|i| locate(&dir, &format!("data_batch_{i}.bin"))).collect();
                (
                    load_cifar10_bin(&train?)?,
                    load_cifar10_bin(&[locate(&dir, "test_batch.bin")?])?,
                )
            }
        };
        let train = match self.train_limit {
            Some(n) => train.take(n),
            None => train,
        };
        let test = match self.test_limit {
            Some(n) => test.take(n),
            None => test,
        };
        Ok((train, test))
    }

    /// Loads both splits and normalizes them with training statistics.
    pub fn load(&self) -> Result<Splits> {
        let (mut train, mut test) = self.load_raw()?;
        let normalization = Normalization::fit(&train);
        normalization.apply(&mut train);
        normalization.apply(&mut test);
        Ok(Splits {
            train,
            test,
            normalization,
        })
    }
}

/// Zero-pads by `pad`, crops a random window back to the original size and
/// flips horizontally with probability 1/2, independently per example.
pub fn augment_pad_crop_flip<R: Rng + ?Sized>(x: &mut [f64], channels: usize, side: usize, pad: usize, rng: &mut R) {
    let d = channels * side * side;
    let mut src = vec![0.0; d];
    for ex in x.chunks_mut(d) {
        src.copy_from_slice(ex);
        let di = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dj = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_bool(0.5);
        for c in 0..channels {
            for i in 0..side {
                for j in 0..side {
                    let jj = if flip { side - 1 - j } else { j };
                    let (si, sj) = (i as isize + di, jj as isize + dj);
                    let inside = (0..side as isize).contains(&si) && (0..side as isize).contains(&sj);
                    ex[(c * side + i) * side + j] = if inside {
                        src[(c * side + si as usize) * side + sj as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// Shuffled minibatch index lists covering `0..n`.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Assembles batches on a background thread, at most `depth` ahead of the
/// consumer.
pub fn prefetch(
    data: &Dataset,
    batches: Vec<Vec<usize>>,
    depth: usize,
    mut consume: impl FnMut((Vec<f64>, Vec<usize>)) -> Result<bool>,
) -> Result<()> {
    std::thread::scope(|scope| {
        let (tx, rx) = std::sync::mpsc::sync_channel(depth.max(1));
        scope.spawn(move || {
            for idx in batches {
                if tx.send(data.gather(&idx)).is_err() {
                    break;
                }
            }
        });
        for batch in rx {
            if !consume(batch)? {
                break;
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn idx_images(n: u32, side: u32, px: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, side, side] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    #[test]
    fn idx_header_errors() {
        let mut b = idx_images(2, 2, &[0; 8]);
        assert!(parse_idx_images(&b).is_ok());
        b[3] = 0x01;
        assert!(matches!(parse_idx_images(&b), Err(TrainError::Format(_))));
        let short = idx_images(2, 2, &[0; 7]);
        assert!(matches!(parse_idx_images(&short), Err(TrainError::Length(_))));
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(TrainError::Length(_))));
    }

    #[test]
    fn normalization_centers_each_channel() {
        let mut d = Dataset::new(vec![0.0, 10.0, 1.0, 20.0, 2.0, 30.0, 3.0, 40.0], vec![0, 1, 2, 3], 2, 1).unwrap();
        let n = Normalization::fit(&d);
        assert_eq!(n.mean, vec![1.5, 25.0]);
        n.apply(&mut d);
        let fit = Normalization::fit(&d);
        for c in 0..2 {
            assert!(fit.mean[c].abs() < 1e-12);
            assert!((fit.std[c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_without_padding_only_flips() {
        let mut x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let orig = x.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        augment_pad_crop_flip(&mut x, 1, 3, 0, &mut rng);
        let flipped: Vec<f64> = orig.chunks(3).flat_map(|r| r.iter().rev().copied()).collect();
        assert!(x == orig || x == flipped);
    }

    #[test]
    fn batches_cover_everything_once() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let b = epoch_batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
