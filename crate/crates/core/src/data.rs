//! Dataset generation, non-IID partitioning, batch sampling, and IDX ingestion.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Dense row-major matrix; rows are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// The full training (or test) collection before partitioning.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if features.rows() == 0 {
            return Err(Error::Config("dataset must contain at least one sample".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.features.cols()
    }
}

/// A sampled realization handed to loss/gradient evaluations.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// One client's local data: an index view into the shared dataset.
#[derive(Debug, Clone)]
pub struct ClientShard {
    data: Arc<Dataset>,
    indices: Vec<usize>,
}

impl ClientShard {
    pub fn new(data: Arc<Dataset>, indices: Vec<usize>) -> Self {
        ClientShard { data, indices }
    }

    /// Local dataset size n.
    pub fn n(&self) -> usize {
        self.indices.len()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        self.data.features.row(self.indices[i])
    }

    pub fn label(&self, i: usize) -> usize {
        self.data.labels[self.indices[i]]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn distinct_labels(&self) -> usize {
        let mut seen = vec![false; self.data.classes];
        let mut count = 0;
        for &i in &self.indices {
            let l = self.data.labels[i];
            if !seen[l] {
                seen[l] = true;
                count += 1;
            }
        }
        count
    }

    fn batch_of(&self, picked: &[usize]) -> Batch {
        let cols = self.data.in_dim();
        let mut features = Matrix::zeros(picked.len(), cols);
        let mut labels = Vec::with_capacity(picked.len());
        for (row, &i) in picked.iter().enumerate() {
            features.row_mut(row).copy_from_slice(self.feature_row(i));
            labels.push(self.label(i));
        }
        Batch { features, labels }
    }

    /// Every sample exactly once, in shard order.
    pub fn full_batch(&self) -> Batch {
        let all: Vec<usize> = (0..self.n()).collect();
        self.batch_of(&all)
    }
}

/// A disjoint cover of the dataset by M client shards.
#[derive(Debug, Clone)]
pub struct Partition {
    shards: Vec<ClientShard>,
    classes_per_client: usize,
}

impl Partition {
    /// Builds a partition from explicit shards (used for objectives whose
    /// "data" is synthetic per-client state, e.g. quadratic ensembles).
    pub fn from_shards(shards: Vec<ClientShard>, classes_per_client: usize) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::Config("partition needs at least one shard".into()));
        }
        if shards.iter().any(|s| s.n() == 0) {
            return Err(Error::EmptyShard);
        }
        Ok(Partition {
            shards,
            classes_per_client,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, m: usize) -> &ClientShard {
        &self.shards[m]
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    pub fn classes_per_client(&self) -> usize {
        self.classes_per_client
    }

    /// Checks the partition invariants against the source dataset: shards are
    /// disjoint, their union is the dataset, sizes are equal up to 1, and no
    /// shard holds more than `classes_per_client` distinct labels.
    pub fn check_invariants(&self, source: &Dataset) -> Result<()> {
        let mut all: Vec<usize> = self
            .shards
            .iter()
            .flat_map(|s| s.indices.iter().copied())
            .collect();
        all.sort_unstable();
        if all.len() != source.len() || all.iter().enumerate().any(|(i, &v)| i != v) {
            return Err(Error::Config(
                "partition is not a disjoint cover of the dataset".into(),
            ));
        }
        let sizes: Vec<usize> = self.shards.iter().map(|s| s.n()).collect();
        let (min, max) = (
            *sizes.iter().min().unwrap_or(&0),
            *sizes.iter().max().unwrap_or(&0),
        );
        if max - min > 1 {
            return Err(Error::Config(format!(
                "shard sizes differ by more than 1 (min {min}, max {max})"
            )));
        }
        for (m, shard) in self.shards.iter().enumerate() {
            let distinct = shard.distinct_labels();
            if distinct > self.classes_per_client {
                return Err(Error::Config(format!(
                    "shard {m} holds {distinct} labels, more than classes_per_client = {}",
                    self.classes_per_client
                )));
            }
        }
        Ok(())
    }
}

fn standard_normal(rng: &mut RngStream) -> f64 {
    rng.sample(StandardNormal)
}

/// Seeded class means: one unit-norm vector per class.
pub fn gen_class_means(in_dim: usize, classes: usize, rng: &mut RngStream) -> Result<Matrix> {
    if classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    let mut means = Matrix::zeros(classes, in_dim);
    for k in 0..classes {
        loop {
            let draw: Vec<f64> = (0..in_dim).map(|_| standard_normal(rng)).collect();
            let norm = draw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for (dst, v) in means.row_mut(k).iter_mut().zip(&draw) {
                    *dst = v / norm;
                }
                break;
            }
        }
    }
    Ok(means)
}

/// Gaussian clusters around fixed class means. `cluster_spread` is the
/// per-coordinate standard deviation, so a spread of zero collapses every
/// sample onto its mean. Class k receives floor(N/C) samples, plus one for
/// the first N mod C classes; samples are emitted class-major.
pub fn gen_samples_for_means(
    means: &Matrix,
    n: usize,
    cluster_spread: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    let classes = means.rows();
    let in_dim = means.cols();
    if n < classes {
        return Err(Error::Config(format!(
            "need at least one sample per class (N = {n}, C = {classes})"
        )));
    }
    if cluster_spread < 0.0 {
        return Err(Error::Config("cluster_spread must be >= 0".into()));
    }
    let base = n / classes;
    let extra = n % classes;
    let mut features = Matrix::zeros(n, in_dim);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for k in 0..classes {
        let count = base + usize::from(k < extra);
        for _ in 0..count {
            for (j, dst) in features.row_mut(row).iter_mut().enumerate() {
                *dst = means.row(k)[j] + cluster_spread * standard_normal(rng);
            }
            labels.push(k);
            row += 1;
        }
    }
    Dataset::new(features, labels, classes)
}

/// Synthetic classification data: C Gaussian clusters with seeded unit-norm
/// means, both drawn from the given stream. A held-out set from the same
/// distribution comes from [`gen_class_means`] on an identically keyed
/// stream plus [`gen_samples_for_means`] on a fresh one.
pub fn gen_synthetic_classification(
    in_dim: usize,
    classes: usize,
    n: usize,
    cluster_spread: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    let means = gen_class_means(in_dim, classes, rng)?;
    gen_samples_for_means(&means, n, cluster_spread, rng)
}

/// Label-skew partition: sort samples by label, slice into M * cpc contiguous
/// chunks, and deal a seeded shuffle of the chunks so every client receives
/// `classes_per_client` of them. Chunk boundaries are chosen so client quotas
/// are N/M up to 1, which keeps shard sizes equal up to 1. When class sizes
/// align with the chunk size (as in the balanced configurations used here),
/// each chunk is single-label and every shard holds at most cpc labels.
pub fn partition_label_skew(
    dataset: &Arc<Dataset>,
    num_clients: usize,
    classes_per_client: usize,
    rng: &mut RngStream,
) -> Result<Partition> {
    let n = dataset.len();
    let c = dataset.classes;
    if num_clients == 0 || classes_per_client == 0 {
        return Err(Error::Config("M and classes_per_client must be >= 1".into()));
    }
    if c > num_clients * classes_per_client {
        return Err(Error::Config(format!(
            "impossible constraint: C = {c} > M * classes_per_client = {}",
            num_clients * classes_per_client
        )));
    }
    if n < num_clients {
        return Err(Error::Config(format!(
            "cannot split {n} samples into {num_clients} non-empty shards"
        )));
    }

    // Stable sort by label keeps equal-label samples in original order.
    let mut sorted: Vec<usize> = (0..n).collect();
    sorted.sort_by_key(|&i| dataset.labels[i]);

    let num_chunks = num_clients * classes_per_client;
    let mut order: Vec<usize> = (0..num_chunks).collect();
    // Fisher-Yates over the chunk slots.
    for i in 0..num_chunks.saturating_sub(1) {
        let j = i + rng.random_range(0..num_chunks - i);
        order.swap(i, j);
    }

    // Client i owns the chunk slots order[i*cpc .. (i+1)*cpc]. Its quota
    // (N/M up to 1) is split across those slots, so slot sizes are fixed by
    // ownership and the slices can be cut in slot order.
    let mut slot_size = vec![0usize; num_chunks];
    for client in 0..num_clients {
        let quota = n / num_clients + usize::from(client < n % num_clients);
        let mut slots: Vec<usize> =
            order[client * classes_per_client..(client + 1) * classes_per_client].to_vec();
        slots.sort_unstable();
        for (idx, &slot) in slots.iter().enumerate() {
            slot_size[slot] = quota / classes_per_client
                + usize::from(idx < quota % classes_per_client);
        }
    }

    let mut slot_start = vec![0usize; num_chunks];
    let mut acc = 0;
    for (slot, &size) in slot_size.iter().enumerate() {
        slot_start[slot] = acc;
        acc += size;
    }
    debug_assert_eq!(acc, n);

    let mut shards = Vec::with_capacity(num_clients);
    for client in 0..num_clients {
        let mut slots: Vec<usize> =
            order[client * classes_per_client..(client + 1) * classes_per_client].to_vec();
        slots.sort_unstable();
        let mut indices = Vec::new();
        for &slot in &slots {
            indices.extend_from_slice(&sorted[slot_start[slot]..slot_start[slot] + slot_size[slot]]);
        }
        shards.push(ClientShard::new(Arc::clone(dataset), indices));
    }

    Ok(Partition {
        shards,
        classes_per_client,
    })
}

/// Uniform sample of `size` shard elements without replacement. A request
/// larger than the shard clamps to n with a logged warning. The exhaustive
/// draw (`size == n`) returns the shard in natural order, which makes a
/// full-batch gradient bit-identical to the per-shard full gradient.
pub fn sample_batch(shard: &ClientShard, size: usize, rng: &mut RngStream) -> Result<Batch> {
    let n = shard.n();
    if n == 0 {
        return Err(Error::EmptyShard);
    }
    if size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let size = if size > n {
        warn!("requested batch of {size} from shard of {n}; clamping to {n}");
        n
    } else {
        size
    };

    if size == n {
        let picked: Vec<usize> = (0..n).collect();
        return Ok(shard.batch_of(&picked));
    }

    // Partial Fisher-Yates: the first `size` entries are a uniform subset.
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..size {
        let j = i + rng.random_range(0..n - i);
        pool.swap(i, j);
    }
    pool.truncate(size);
    Ok(shard.batch_of(&pool))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> IdxReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        IdxReader { bytes, offset: 0 }
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset as u64,
            message: message.into(),
        }
    }

    fn read_u32_be(&mut self) -> Result<u32> {
        if self.offset + 4 > self.bytes.len() {
            return Err(self.fail("truncated file while reading u32"));
        }
        let raw: [u8; 4] = self.bytes[self.offset..self.offset + 4].try_into().unwrap();
        self.offset += 4;
        Ok(u32::from_be_bytes(raw))
    }

    fn read_bytes(&mut self, count: usize) -> Result<&'a [u8]> {
        if self.offset + count > self.bytes.len() {
            return Err(self.fail(format!(
                "truncated file: need {count} bytes, {} remain",
                self.bytes.len() - self.offset
            )));
        }
        let out = &self.bytes[self.offset..self.offset + count];
        self.offset += count;
        Ok(out)
    }
}

/// Parses an IDX image/label file pair into a dataset. Pixels are scaled to
/// [0, 1]; the class count is the largest label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = fs::read(images_path)?;
    let mut r = IdxReader::new(&image_bytes);
    let magic = r.read_u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(r.fail(format!(
            "bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let count = r.read_u32_be()? as usize;
    let rows = r.read_u32_be()? as usize;
    let cols = r.read_u32_be()? as usize;
    let pixels = r.read_bytes(count * rows * cols)?;

    let label_bytes = fs::read(labels_path)?;
    let mut r = IdxReader::new(&label_bytes);
    let magic = r.read_u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(r.fail(format!(
            "bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let label_count = r.read_u32_be()? as usize;
    if label_count != count {
        return Err(r.fail(format!(
            "count mismatch: {count} images but {label_count} labels"
        )));
    }
    let raw_labels = r.read_bytes(count)?;

    let in_dim = rows * cols;
    let mut features = Matrix::zeros(count, in_dim);
    for i in 0..count {
        for (dst, &px) in features
            .row_mut(i)
            .iter_mut()
            .zip(&pixels[i * in_dim..(i + 1) * in_dim])
        {
            *dst = f64::from(px) / 255.0;
        }
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::new(features, labels, classes)
}

/// Writes raw pixels as an IDX image file (big-endian magic and dims).
pub fn write_idx_images(
    path: &Path,
    count: usize,
    rows: usize,
    cols: usize,
    pixels: &[u8],
) -> Result<()> {
    if pixels.len() != count * rows * cols {
        return Err(Error::DimensionMismatch {
            expected: count * rows * cols,
            got: pixels.len(),
        });
    }
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(count as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes labels as an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes)?;
    Ok(())
}
