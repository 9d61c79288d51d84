//! Data ingestion: IDX-format image files (gzip sniffed), synthetic 2-D
//! distributions for fast experiments, a procedural two-class digit set, and
//! shuffled mini-batch iteration. All image data is scaled to [-1, 1].

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug)]
pub struct DataSet {
    /// `[n, ...signal shape]`, values in [-1, 1].
    pub examples: Tensor,
    /// Class labels, when the source provides them (used for basin purity).
    pub labels: Option<Vec<u8>>,
    pub source: String,
}

impl DataSet {
    pub fn len(&self) -> usize {
        self.examples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn signal_shape(&self) -> &[usize] {
        &self.examples.shape()[1..]
    }

    pub fn new(examples: Tensor, labels: Option<Vec<u8>>, source: impl Into<String>) -> Result<Self> {
        if let Some(labels) = &labels {
            if labels.len() != examples.shape()[0] {
                return Err(Error::IdxCountMismatch {
                    images: examples.shape()[0],
                    labels: labels.len(),
                });
            }
        }
        Ok(DataSet { examples, labels, source: source.into() })
    }

    /// First `limit` examples (all when `limit` exceeds the set).
    pub fn take(&self, limit: usize) -> DataSet {
        let n = limit.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        DataSet {
            examples: self.examples.gather_rows(&idx),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            source: self.source.clone(),
        }
    }
}

// ── IDX loading ─────────────────────────────────────────────────────────

fn open_sniffed(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 2];
    reader.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    // Re-chain the sniffed bytes in front of the remaining stream.
    let rest = std::io::Cursor::new(magic.to_vec()).chain(reader);
    if magic == [0x1f, 0x8b] {
        Ok(Box::new(GzDecoder::new(rest)))
    } else {
        Ok(Box::new(rest))
    }
}

fn read_idx_images(reader: &mut dyn Read) -> Result<(Vec<u8>, usize, usize, usize)> {
    let magic = reader
        .read_u32::<BigEndian>()
        .map_err(|_| Error::IdxTruncated("missing magic".into()))?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::IdxBadMagic(magic));
    }
    let n = reader
        .read_u32::<BigEndian>()
        .map_err(|_| Error::IdxTruncated("missing image count".into()))? as usize;
    let rows = reader
        .read_u32::<BigEndian>()
        .map_err(|_| Error::IdxTruncated("missing row count".into()))? as usize;
    let cols = reader
        .read_u32::<BigEndian>()
        .map_err(|_| Error::IdxTruncated("missing column count".into()))? as usize;
    let mut bytes = vec![0u8; n * rows * cols];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| Error::IdxTruncated(format!("expected {} pixel bytes", n * rows * cols)))?;
    Ok((bytes, n, rows, cols))
}

fn read_idx_labels(reader: &mut dyn Read) -> Result<Vec<u8>> {
    let magic = reader
        .read_u32::<BigEndian>()
        .map_err(|_| Error::IdxTruncated("missing magic".into()))?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::IdxBadMagic(magic));
    }
    let n = reader
        .read_u32::<BigEndian>()
        .map_err(|_| Error::IdxTruncated("missing label count".into()))? as usize;
    let mut bytes = vec![0u8; n];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| Error::IdxTruncated(format!("expected {n} label bytes")))?;
    Ok(bytes)
}

/// Map a pixel byte to [-1, 1]: 0 -> -1, 255 -> +1.
pub fn byte_to_unit(b: u8) -> f64 {
    2.0 * (b as f64) / 255.0 - 1.0
}

/// Load an IDX image file (optionally with labels), scale to [-1, 1], and
/// optionally 2x mean-pool (28x28 -> 14x14) and truncate to `limit` examples.
pub fn load_idx(
    images_path: &Path,
    labels_path: Option<&Path>,
    limit: Option<usize>,
    downsample: bool,
) -> Result<DataSet> {
    let (bytes, mut n, rows, cols) = read_idx_images(&mut *open_sniffed(images_path)?)?;
    let mut labels = match labels_path {
        Some(p) => {
            let l = read_idx_labels(&mut *open_sniffed(p)?)?;
            if l.len() != n {
                return Err(Error::IdxCountMismatch { images: n, labels: l.len() });
            }
            Some(l)
        }
        None => None,
    };
    if let Some(limit) = limit {
        n = n.min(limit);
        if let Some(l) = &mut labels {
            l.truncate(n);
        }
    }

    let mut data: Vec<f64> = bytes[..n * rows * cols].iter().map(|&b| byte_to_unit(b)).collect();
    let (mut out_rows, mut out_cols) = (rows, cols);
    if downsample {
        if rows % 2 != 0 || cols % 2 != 0 {
            return Err(Error::Data(format!("cannot 2x downsample odd extents {rows}x{cols}")));
        }
        (out_rows, out_cols) = (rows / 2, cols / 2);
        let mut pooled = Vec::with_capacity(n * out_rows * out_cols);
        for i in 0..n {
            let img = &data[i * rows * cols..(i + 1) * rows * cols];
            for r in 0..out_rows {
                for c in 0..out_cols {
                    let s = img[2 * r * cols + 2 * c]
                        + img[2 * r * cols + 2 * c + 1]
                        + img[(2 * r + 1) * cols + 2 * c]
                        + img[(2 * r + 1) * cols + 2 * c + 1];
                    pooled.push(s / 4.0);
                }
            }
        }
        data = pooled;
    }
    let examples = Tensor::from_vec(vec![n, 1, out_rows, out_cols], data)?;
    DataSet::new(examples, labels, images_path.display().to_string())
}

// ── Synthetic 2-D distributions ─────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum Synthetic2D {
    GaussianMixture { means: Vec<[f64; 2]>, weights: Vec<f64>, std: f64 },
    Ring { radius: f64, std: f64 },
}

impl Synthetic2D {
    fn validate(&self) -> Result<()> {
        match self {
            Synthetic2D::GaussianMixture { means, weights, std } => {
                if means.is_empty() || means.len() != weights.len() {
                    return Err(Error::Data("mixture means/weights length mismatch".into()));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
                    return Err(Error::Data("mixture weights must be nonnegative and sum to 1".into()));
                }
                if *std < 0.0 {
                    return Err(Error::Data("mixture std must be nonnegative".into()));
                }
                Ok(())
            }
            Synthetic2D::Ring { radius, std } => {
                if *radius <= 0.0 || *std < 0.0 {
                    return Err(Error::Data("ring radius must be positive, std nonnegative".into()));
                }
                Ok(())
            }
        }
    }
}

/// Draw `n` i.i.d. samples from a synthetic 2-D distribution.
pub fn sample_synthetic(spec: &Synthetic2D, n: usize, rng: &mut impl Rng) -> Result<DataSet> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Data("sample_synthetic requires n >= 1".into()));
    }
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    match spec {
        Synthetic2D::GaussianMixture { means, weights, std } => {
            for _ in 0..n {
                let u: f64 = rng.random_range(0.0..1.0);
                let mut acc = 0.0;
                let mut comp = means.len() - 1;
                for (k, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        comp = k;
                        break;
                    }
                }
                let e1: f64 = rng.sample(StandardNormal);
                let e2: f64 = rng.sample(StandardNormal);
                data.push(means[comp][0] + std * e1);
                data.push(means[comp][1] + std * e2);
                labels.push(comp as u8);
            }
        }
        Synthetic2D::Ring { radius, std } => {
            for _ in 0..n {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let e1: f64 = rng.sample(StandardNormal);
                let e2: f64 = rng.sample(StandardNormal);
                data.push(radius * angle.cos() + std * e1);
                data.push(radius * angle.sin() + std * e2);
                labels.push(0);
            }
        }
    }
    DataSet::new(Tensor::from_vec(vec![n, 2], data)?, Some(labels), "synthetic2d")
}

// ── Procedural digits ───────────────────────────────────────────────────

/// Render a two-class set of digit-like grayscale images ("0" rings and "1"
/// strokes) with jittered geometry, at `size` x `size`, values in [-1, 1].
///
/// Stands in for handwritten-digit data when no IDX files are on disk; the
/// two classes give the landscape and recovery runs genuine label structure.
pub fn synthetic_digits(n: usize, size: usize, rng: &mut impl Rng) -> Result<DataSet> {
    if n == 0 || size < 8 {
        return Err(Error::Data("synthetic_digits requires n >= 1 and size >= 8".into()));
    }
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    let s = size as f64;
    for i in 0..n {
        let class = (i % 2) as u8;
        let cx = s / 2.0 + rng.random_range(-1.0..1.0);
        let cy = s / 2.0 + rng.random_range(-1.0..1.0);
        let intensity = rng.random_range(0.75..1.0);
        let thickness = rng.random_range(0.9..1.5);
        if class == 0 {
            let rx = rng.random_range(0.26..0.34) * s;
            let ry = rng.random_range(0.30..0.38) * s;
            for py in 0..size {
                for px in 0..size {
                    let dx = (px as f64 + 0.5 - cx) / rx;
                    let dy = (py as f64 + 0.5 - cy) / ry;
                    let d = (dx * dx + dy * dy).sqrt() - 1.0;
                    let dist = d.abs() * rx.min(ry);
                    let cov = (thickness / 2.0 + 0.5 - dist).clamp(0.0, 1.0);
                    data.push(-1.0 + 2.0 * cov * intensity);
                }
            }
        } else {
            let x0 = cx + rng.random_range(-0.8..0.8);
            let slant = rng.random_range(-1.2..1.2);
            let y0 = 0.18 * s;
            let y1 = 0.82 * s;
            for py in 0..size {
                for px in 0..size {
                    let p = (px as f64 + 0.5, py as f64 + 0.5);
                    let t = ((p.1 - y0) / (y1 - y0)).clamp(0.0, 1.0);
                    let lx = x0 + slant * (t - 0.5);
                    let ly = y0 + t * (y1 - y0);
                    let dist = ((p.0 - lx).powi(2) + (p.1 - ly).powi(2)).sqrt();
                    let cov = (thickness / 2.0 + 0.5 - dist).clamp(0.0, 1.0);
                    data.push(-1.0 + 2.0 * cov * intensity);
                }
            }
        }
        labels.push(class);
    }
    DataSet::new(Tensor::from_vec(vec![n, 1, size, size], data)?, Some(labels), "digits2")
}

// ── Batching ────────────────────────────────────────────────────────────

/// One epoch's batch order over `n` examples: a seeded permutation cut into
/// batches of `batch_size` with the last partial batch dropped. Pure function
/// of `(seed tree, epoch)`.
pub fn permutation_batches(
    n: usize,
    batch_size: usize,
    seeds: &SeedTree,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Data(format!("batch size {batch_size} invalid for dataset of {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeds.stream("data", &[epoch]));
    Ok(perm.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

/// [`permutation_batches`] over a dataset.
pub fn epoch_batches(
    ds: &DataSet,
    batch_size: usize,
    seeds: &SeedTree,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    permutation_batches(ds.len(), batch_size, seeds, epoch)
}
