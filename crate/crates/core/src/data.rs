//! Datasets: IDX ingestion, the block-sparse teacher generator, and
//! deterministic mini-batching.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{tile_grid, write_block};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{LossKind, Targets};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    /// Regression targets, one row per sample.
    pub y: Option<Matrix>,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(
        x: Matrix,
        y: Option<Matrix>,
        labels: Option<Vec<usize>>,
        class_count: usize,
    ) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::InvalidArgument("features must be finite".into()));
        }
        if let Some(y) = &y {
            if y.rows() != x.rows() {
                return Err(Error::shape("dataset targets", x.rows(), y.rows()));
            }
        }
        if let Some(l) = &labels {
            if l.len() != x.rows() {
                return Err(Error::CountMismatch {
                    images: x.rows(),
                    labels: l.len(),
                });
            }
            if let Some(&bad) = l.iter().find(|&&c| c >= class_count) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} outside [0, {class_count})"
                )));
            }
        }
        if y.is_none() && labels.is_none() {
            return Err(Error::InvalidArgument(
                "dataset needs targets or labels".into(),
            ));
        }
        Ok(Dataset {
            x,
            y,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.as_ref().map(|y| y.select_rows(idx)),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
        }
    }

    /// First `n_train` rows and the rest.
    pub fn split(&self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split point {n_train} must lie in [1, {})",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n_train).collect();
        let tail: Vec<usize> = (n_train..self.len()).collect();
        Ok((self.subset(&head), self.subset(&tail)))
    }

    /// Targets suited to `loss`. Squared loss on a labels-only dataset uses
    /// one-hot rows.
    pub fn targets(&self, loss: LossKind) -> Result<OwnedTargets> {
        match loss {
            LossKind::SoftmaxCrossEntropy => match &self.labels {
                Some(l) => Ok(OwnedTargets::Labels(l.clone())),
                None => Err(Error::InvalidArgument(
                    "cross-entropy needs class labels".into(),
                )),
            },
            LossKind::SquaredFrobenius => match (&self.y, &self.labels) {
                (Some(y), _) => Ok(OwnedTargets::Values(y.clone())),
                (None, Some(l)) => Ok(OwnedTargets::Values(one_hot(l, self.class_count))),
                (None, None) => unreachable!("validated at construction"),
            },
        }
    }

    /// Labels for accuracy; regression sets fall back to the argmax of `y`.
    pub fn eval_labels(&self) -> Vec<usize> {
        match (&self.labels, &self.y) {
            (Some(l), _) => l.clone(),
            (None, Some(y)) => y.argmax_rows(),
            (None, None) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OwnedTargets {
    Values(Matrix),
    Labels(Vec<usize>),
}

impl OwnedTargets {
    pub fn borrow(&self) -> Targets<'_> {
        match self {
            OwnedTargets::Values(m) => Targets::Values(m),
            OwnedTargets::Labels(l) => Targets::Labels(l),
        }
    }

    pub fn select(&self, idx: &[usize]) -> OwnedTargets {
        match self {
            OwnedTargets::Values(m) => OwnedTargets::Values(m.select_rows(idx)),
            OwnedTargets::Labels(l) => OwnedTargets::Labels(idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len().max(1), classes.max(1));
    for (i, &c) in labels.iter().enumerate() {
        m[(i, c)] = 1.0;
    }
    m
}

/// Sample order for one epoch. Shuffles are keyed by `(seed, epoch)` so any
/// epoch can be replayed on its own.
pub fn batch_order(n: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Matrix,
    pub targets: OwnedTargets,
}

/// Mini-batches of one epoch; the last one may be short.
pub fn batches<'a>(
    ds: &'a Dataset,
    targets: &'a OwnedTargets,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Batch> + 'a {
    let order = batch_order(ds.len(), shuffle, seed, epoch);
    let size = batch_size.max(1);
    let chunks: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
    chunks.into_iter().map(move |indices| Batch {
        x: ds.x.select_rows(&indices),
        targets: targets.select(&indices),
        indices,
    })
}

// ---------------------------------------------------------------- IDX files

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

/// A parsed IDX container. Supported element types: unsigned byte (0x08)
/// and big-endian double (0x0E).
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        let ty = match self.data {
            IdxData::U8(_) => 0x08,
            IdxData::F64(_) => 0x0E,
        };
        (ty << 8) | self.dims.len() as u32
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            IdxData::U8(v) => v.iter().map(|&b| b as f64).collect(),
            IdxData::F64(v) => v.clone(),
        }
    }
}

pub fn read_idx(bytes: &[u8], what: &str) -> Result<IdxArray> {
    let mut r = bytes;
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated(format!("{what}: missing header")))?;
    if magic >> 16 != 0 {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let ty = (magic >> 8) & 0xFF;
    let ndim = (magic & 0xFF) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = r
            .read_u32::<BigEndian>()
            .map_err(|_| Error::Truncated(format!("{what}: short dimension header")))?;
        dims.push(d as usize);
    }
    let count: usize = dims.iter().product();
    let data = match ty {
        0x08 => {
            if r.len() < count {
                return Err(Error::Truncated(format!(
                    "{what}: expected {count} bytes of data, found {}",
                    r.len()
                )));
            }
            IdxData::U8(r[..count].to_vec())
        }
        0x0E => {
            if r.len() < count * 8 {
                return Err(Error::Truncated(format!(
                    "{what}: expected {} bytes of data, found {}",
                    count * 8,
                    r.len()
                )));
            }
            let mut v = vec![0.0; count];
            r.read_f64_into::<BigEndian>(&mut v)?;
            IdxData::F64(v)
        }
        other => {
            return Err(Error::Format(format!(
                "{what}: IDX element type {other:#04x} is not supported"
            )))
        }
    };
    Ok(IdxArray { dims, data })
}

pub fn write_idx<W: Write>(mut w: W, arr: &IdxArray) -> Result<()> {
    if arr.dims.len() > 255 {
        return Err(Error::InvalidArgument("too many IDX dimensions".into()));
    }
    w.write_u32::<BigEndian>(arr.magic())?;
    for &d in &arr.dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("IDX dimension {d} too large")))?;
        w.write_u32::<BigEndian>(d)?;
    }
    match &arr.data {
        IdxData::U8(v) => w.write_all(v)?,
        IdxData::F64(v) => {
            for &x in v {
                w.write_f64::<BigEndian>(x)?;
            }
        }
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Loads an MNIST-style image/label pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    parse_mnist(&images, &labels)
}

pub fn parse_mnist(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    for (bytes, expected) in [(images, IDX_IMAGES_MAGIC), (labels, IDX_LABELS_MAGIC)] {
        if bytes.len() >= 4 {
            let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
            if found != expected {
                return Err(Error::BadMagic { expected, found });
            }
        }
    }
    let img = read_idx(images, "images")?;
    let lab = read_idx(labels, "labels")?;
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: lab.dims[0],
        });
    }
    let d = img.dims[1] * img.dims[2];
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("empty IDX dataset".into()));
    }
    let x = Matrix::new(n, d, img.to_f64().into_iter().map(|p| p / 255.0).collect())?;
    let IdxData::U8(raw) = lab.data else {
        unreachable!("label magic pins the element type");
    };
    let labels: Vec<usize> = raw.into_iter().map(usize::from).collect();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(x, None, Some(labels), class_count)
}

/// File names used by [`write_dataset`] under a prefix.
pub fn dataset_paths(dir: &Path, prefix: &str) -> [std::path::PathBuf; 3] {
    [
        dir.join(format!("{prefix}-images.idx")),
        dir.join(format!("{prefix}-labels.idx")),
        dir.join(format!("{prefix}-targets.idx")),
    ]
}

/// Writes features and targets as double-precision IDX files (labels as
/// bytes when every class fits). Missing parts are skipped.
pub fn write_dataset(ds: &Dataset, dir: &Path, prefix: &str) -> Result<()> {
    let [xp, lp, yp] = dataset_paths(dir, prefix);
    let mat = |m: &Matrix| IdxArray {
        dims: vec![m.rows(), m.cols()],
        data: IdxData::F64(m.data().to_vec()),
    };
    write_idx(fs::File::create(xp)?, &mat(&ds.x))?;
    if let Some(l) = &ds.labels {
        let data = if ds.class_count <= 256 {
            IdxData::U8(l.iter().map(|&c| c as u8).collect())
        } else {
            IdxData::F64(l.iter().map(|&c| c as f64).collect())
        };
        write_idx(
            fs::File::create(lp)?,
            &IdxArray {
                dims: vec![l.len()],
                data,
            },
        )?;
    }
    if let Some(y) = &ds.y {
        write_idx(fs::File::create(yp)?, &mat(y))?;
    }
    Ok(())
}

fn as_matrix(arr: &IdxArray, what: &str) -> Result<Matrix> {
    if arr.dims.is_empty() {
        return Err(Error::Format(format!("{what}: scalar IDX array")));
    }
    let rows = arr.dims[0];
    let cols = arr.dims[1..].iter().product::<usize>();
    Matrix::new(rows, cols, arr.to_f64())
}

/// Reads a dataset written by [`write_dataset`]. `class_count` is one past
/// the largest label, or at least the target width when targets exist.
pub fn read_dataset(dir: &Path, prefix: &str) -> Result<Dataset> {
    let [xp, lp, yp] = dataset_paths(dir, prefix);
    let x = as_matrix(&read_idx(&read_file(&xp)?, "images")?, "images")?;
    let labels = if lp.exists() {
        let arr = read_idx(&read_file(&lp)?, "labels")?;
        Some(arr.to_f64().into_iter().map(|c| c as usize).collect::<Vec<_>>())
    } else {
        None
    };
    let y = if yp.exists() {
        Some(as_matrix(&read_idx(&read_file(&yp)?, "targets")?, "targets")?)
    } else {
        None
    };
    let from_labels = labels
        .as_ref()
        .and_then(|l: &Vec<usize>| l.iter().max().map(|&m| m + 1))
        .unwrap_or(0);
    let class_count = from_labels.max(y.as_ref().map_or(0, |y| y.cols())).max(1);
    Dataset::new(x, y, labels, class_count)
}

// ------------------------------------------------------------ teacher task

/// Parameters of the synthetic block-sparse teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    /// Output width of the teacher weight.
    pub m: usize,
    /// Input width.
    pub n: usize,
    /// Tile size `(m₂, n₂)`.
    pub block: (usize, usize),
    pub zero_tile_fraction: f64,
    pub samples: usize,
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
}

impl TeacherSpec {
    pub fn generate(&self) -> Result<(Dataset, Matrix)> {
        make_teacher_dataset(
            self.m,
            self.n,
            self.block,
            self.zero_tile_fraction,
            self.samples,
            self.noise,
            self.seed,
        )
    }
}

/// Number of tiles a teacher zeroes: `round(fraction · tiles)`.
pub fn teacher_zero_tiles(tiles: usize, fraction: f64) -> usize {
    ((fraction * tiles as f64).round() as usize).min(tiles)
}

/// Draws a block-sparse teacher `W*` (m×n, entries `N(0, 1/n)` outside the
/// zeroed tiles), inputs `X ~ N(0, 1)` and targets `Y = X W*ᵀ + σ·noise`.
/// Labels are the argmax of the noiseless outputs.
pub fn make_teacher_dataset(
    m: usize,
    n: usize,
    blk: (usize, usize),
    zero_tile_fraction: f64,
    samples: usize,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Matrix)> {
    if m == 0 || n == 0 || samples == 0 {
        return Err(Error::InvalidArgument(
            "teacher dimensions and sample count must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&zero_tile_fraction) {
        return Err(Error::InvalidArgument(format!(
            "zero-tile fraction {zero_tile_fraction} outside [0, 1)"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level {noise} must be ≥ 0")));
    }
    let (m2, n2) = blk;
    if m2 == 0 || n2 == 0 {
        return Err(Error::InvalidArgument("block dims must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (n as f64).sqrt();
    let mut w = Matrix::random_normal(m, n, &mut rng).scale(scale);
    let (m1, n1) = tile_grid(&w, m2, n2)?;
    let tiles = m1 * n1;
    let mut order: Vec<usize> = (0..tiles).collect();
    order.shuffle(&mut rng);
    let zero = Matrix::zeros(m2, n2);
    for &t in &order[..teacher_zero_tiles(tiles, zero_tile_fraction)] {
        write_block(&mut w, &zero, t / n1, t % n1);
    }
    let x = Matrix::random_normal(samples, n, &mut rng);
    let clean = x.matmul_nt(&w)?;
    let labels = clean.argmax_rows();
    let mut y = clean;
    if noise > 0.0 {
        let dist = rand_distr::Normal::new(0.0, noise)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in y.data_mut() {
            *v += rng.sample(dist);
        }
    }
    Ok((Dataset::new(x, Some(y), Some(labels), m)?, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::extract_block;

    fn mnist_fixture(n: usize, magic: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.write_u32::<BigEndian>(magic).unwrap();
        for d in [n as u32, 28, 28] {
            img.write_u32::<BigEndian>(d).unwrap();
        }
        for k in 0..n * 784 {
            img.push((k % 256) as u8);
        }
        let mut lab = Vec::new();
        lab.write_u32::<BigEndian>(IDX_LABELS_MAGIC).unwrap();
        lab.write_u32::<BigEndian>(n as u32).unwrap();
        for k in 0..n {
            lab.push((k % 10) as u8);
        }
        (img, lab)
    }

    #[test]
    fn two_image_fixture() {
        let (img, lab) = mnist_fixture(2, IDX_IMAGES_MAGIC);
        let ds = parse_mnist(&img, &lab).unwrap();
        assert_eq!((ds.len(), ds.features()), (2, 784));
        assert_eq!(ds.x[(0, 255)], 1.0);
        assert_eq!(ds.x[(0, 0)], 0.0);
        assert_eq!(ds.labels.as_deref(), Some(&[0, 1][..]));
    }

    #[test]
    fn distinct_idx_errors() {
        let (img, lab) = mnist_fixture(2, 0x0000_0804);
        assert!(matches!(parse_mnist(&img, &lab), Err(Error::BadMagic { .. })));

        let (img, lab) = mnist_fixture(2, IDX_IMAGES_MAGIC);
        assert!(matches!(
            parse_mnist(&img[..img.len() - 1], &lab),
            Err(Error::Truncated(_))
        ));

        let (img3, _) = mnist_fixture(3, IDX_IMAGES_MAGIC);
        assert!(matches!(
            parse_mnist(&img3, &lab),
            Err(Error::CountMismatch { images: 3, labels: 2 })
        ));
    }

    #[test]
    fn teacher_zero_fraction_and_determinism() {
        let (ds, w) = make_teacher_dataset(8, 16, (2, 2), 0.6, 20, 0.0, 3).unwrap();
        let mut zeros = 0;
        for i in 0..4 {
            for j in 0..8 {
                if extract_block(&w, 2, 2, i, j).unwrap().max_abs() == 0.0 {
                    zeros += 1;
                }
            }
        }
        assert_eq!(zeros, teacher_zero_tiles(32, 0.6));
        let (ds2, w2) = make_teacher_dataset(8, 16, (2, 2), 0.6, 20, 0.0, 3).unwrap();
        assert_eq!(ds, ds2);
        assert_eq!(w, w2);
        assert!(ds.y.unwrap().max_abs_diff(&ds.x.matmul_nt(&w).unwrap()) == 0.0);
    }

    #[test]
    fn teacher_rejects_bad_arguments() {
        assert!(matches!(
            make_teacher_dataset(8, 15, (2, 2), 0.5, 4, 0.0, 0),
            Err(Error::NotDivisible { .. })
        ));
        assert!(make_teacher_dataset(8, 16, (2, 2), 1.0, 4, 0.0, 0).is_err());
    }

    #[test]
    fn batches_cover_dataset() {
        let (ds, _) = make_teacher_dataset(4, 4, (2, 2), 0.0, 10, 0.0, 1).unwrap();
        let t = ds.targets(LossKind::SquaredFrobenius).unwrap();
        let mut seen: Vec<usize> = batches(&ds, &t, 3, true, 9, 0)
            .flat_map(|b| b.indices)
            .collect();
        assert_ne!(seen, (0..10).collect::<Vec<_>>());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batches(&ds, &t, 10, true, 9, 0).count(), 1);
        assert_eq!(batch_order(10, true, 9, 4), batch_order(10, true, 9, 4));
        assert_ne!(batch_order(10, true, 9, 4), batch_order(10, true, 9, 5));
    }
}
