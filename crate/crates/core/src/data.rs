//! MNIST ingestion, PCA, feature rescaling, and client partitioning.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Grayscale images with digit labels, pixels stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl RawDataset {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != rows * cols * labels.len() {
            return Err(Error::usage(format!(
                "{} pixels do not make {} images of {rows}x{cols}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(RawDataset {
            rows,
            cols,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.image_len();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> RawDataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        RawDataset {
            rows: self.rows,
            cols: self.cols,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Pixels scaled to [0, 1].
    pub fn scaled_image(&self, i: usize) -> Vec<f64> {
        self.image(i).iter().map(|&p| p as f64 / 255.0).collect()
    }
}

fn be_u32(bytes: &[u8], offset: usize, source: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::ingestion(source, offset, "truncated header"))
}

/// Parses an IDX3 image file: `(rows, cols, pixels, count)`.
pub fn parse_idx_images(bytes: &[u8], source: &str) -> Result<(usize, usize, Vec<u8>, usize)> {
    let magic = be_u32(bytes, 0, source)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::ingestion(
            source,
            0,
            format!("magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, source)? as usize;
    let rows = be_u32(bytes, 8, source)? as usize;
    let cols = be_u32(bytes, 12, source)? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::ingestion(source, 4, "dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() != expected {
        return Err(Error::ingestion(
            source,
            16 + body.len().min(expected),
            format!("expected {expected} pixel bytes, found {}", body.len()),
        ));
    }
    Ok((rows, cols, body.to_vec(), count))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], source: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, source)?;
    if magic != LABELS_MAGIC {
        return Err(Error::ingestion(
            source,
            0,
            format!("magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, source)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::ingestion(
            source,
            8 + body.len().min(count),
            format!("expected {count} labels, found {}", body.len()),
        ));
    }
    if let Some(i) = body.iter().position(|&l| l > 9) {
        return Err(Error::ingestion(
            source,
            8 + i,
            format!("label {} is not a digit", body[i]),
        ));
    }
    Ok(body.to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::ingestion(path.display().to_string(), 0, e.to_string()))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawDataset> {
    let img_name = images_path.display().to_string();
    let lbl_name = labels_path.display().to_string();
    let (rows, cols, pixels, count) = parse_idx_images(&read_file(images_path)?, &img_name)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, &lbl_name)?;
    if labels.len() != count {
        return Err(Error::ingestion(
            lbl_name,
            4,
            format!("{} labels for {count} images", labels.len()),
        ));
    }
    RawDataset::new(rows, cols, pixels, labels)
}

/// Paths of the four standard MNIST files under `dir`.
#[derive(Debug, Clone)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn in_dir(dir: &Path) -> Self {
        MnistFiles {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }
}

/// Images of two digits with bit labels (`class_a` → 0, `class_b` → 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryDataset {
    pub images: RawDataset,
    pub bits: Vec<u8>,
}

pub fn select_binary(dataset: &RawDataset, class_a: u8, class_b: u8) -> Result<BinaryDataset> {
    if class_a == class_b {
        return Err(Error::usage(format!(
            "class pair ({class_a}, {class_b}) must be two different digits"
        )));
    }
    let keep: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.labels[i] == class_a || dataset.labels[i] == class_b)
        .collect();
    for c in [class_a, class_b] {
        if !keep.iter().any(|&i| dataset.labels[i] == c) {
            return Err(Error::ingestion(
                "labels",
                8,
                format!("digit {c} does not occur"),
            ));
        }
    }
    let images = dataset.subset(&keep);
    let bits = images
        .labels
        .iter()
        .map(|&l| u8::from(l == class_b))
        .collect();
    Ok(BinaryDataset { images, bits })
}

/// Mean and top-k principal axes of a set of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    components: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl PcaModel {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    /// Eigenvalues of the sample covariance for the kept components.
    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(v)
                    .zip(&self.mean)
                    .map(|((ci, vi), mi)| ci * (vi - mi))
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &zk) in self.components.iter().zip(z) {
            for (o, ci) in out.iter_mut().zip(c) {
                *o += zk * ci;
            }
        }
        out
    }
}

/// Fits PCA on row vectors. Each component is normalized so that its
/// largest-magnitude entry is positive.
pub fn fit_pca(rows: &[Vec<f64>], k: usize) -> Result<PcaModel> {
    let n = rows.len();
    if k == 0 {
        return Err(Error::usage("PCA needs at least one component"));
    }
    if n < k.max(2) {
        return Err(Error::ingestion(
            "pca",
            0,
            format!("{n} samples cannot give {k} components"),
        ));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::usage("PCA rows have different lengths"));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let tol = top.abs().max(f64::MIN_POSITIVE) * 1e-12 * d as f64;
    if eig.eigenvalues[order[k - 1]] <= tol {
        return Err(Error::ingestion(
            "pca",
            0,
            format!("covariance rank is below {k}"),
        ));
    }
    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for &idx in &order[..k] {
        let mut c: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let pivot = c.iter().copied().fold(
            0.0f64,
            |best, v| if v.abs() > best.abs() { v } else { best },
        );
        if pivot < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        variances.push(eig.eigenvalues[idx]);
    }
    Ok(PcaModel {
        mean,
        components,
        variances,
    })
}

/// Per-dimension affine map of the training range onto [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(vectors: &[Vec<f64>]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::usage("cannot fit a scaler on no data"))?;
        let mut min = first.clone();
        let mut max = first.clone();
        for v in vectors {
            if v.len() != min.len() {
                return Err(Error::usage("feature vectors have different lengths"));
            }
            for j in 0..v.len() {
                min[j] = min[j].min(v[j]);
                max[j] = max[j].max(v[j]);
            }
        }
        Ok(MinMaxScaler { min, max })
    }

    /// Maps into [−1, 1], clipping values outside the training range.
    /// Constant dimensions map to 0.
    pub fn transform(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(j, &x)| {
                let (lo, hi) = (self.min[j], self.max[j]);
                if hi <= lo {
                    0.0
                } else {
                    (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
                }
            })
            .collect()
    }
}

/// Scaled (train, test) feature rows.
pub type FeatureSplits = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Fits a scaler on `train` and applies it to both splits.
pub fn rescale_features(train: &[Vec<f64>], test: &[Vec<f64>]) -> Result<FeatureSplits> {
    let s = MinMaxScaler::fit(train)?;
    Ok((
        train.iter().map(|v| s.transform(v)).collect(),
        test.iter().map(|v| s.transform(v)).collect(),
    ))
}

/// Feature vectors with bit labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl FeatureDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionMode {
    /// Fraction of class 0 and class 1 for each client.
    Proportions(Vec<[f64; 2]>),
    /// Each client's class mix drawn from Dirichlet(α, α).
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    /// Samples per client, `m_i`.
    pub sizes: Vec<usize>,
}

impl PartitionSpec {
    pub fn n_clients(&self) -> usize {
        self.sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::config("partition needs at least one client"));
        }
        if let Some(i) = self.sizes.iter().position(|&m| m == 0) {
            return Err(Error::config(format!("client {i} has size 0")));
        }
        match &self.mode {
            PartitionMode::Proportions(p) => {
                if p.len() != self.sizes.len() {
                    return Err(Error::config(format!(
                        "proportions lists {} clients, sizes lists {}",
                        p.len(),
                        self.sizes.len()
                    )));
                }
                for (i, f) in p.iter().enumerate() {
                    if f.iter().any(|v| !(0.0..=1.0).contains(v))
                        || ((f[0] + f[1]) - 1.0).abs() > 1e-9
                    {
                        return Err(Error::config(format!(
                            "proportions for client {i} must be in [0, 1] and sum to 1, got {f:?}"
                        )));
                    }
                }
            }
            PartitionMode::Dirichlet { alpha } => {
                if !(alpha.is_finite() && *alpha > 0.0) {
                    return Err(Error::config(format!(
                        "dirichlet alpha must be positive, got {alpha}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-client class counts, the label-skew report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeterogeneityReport {
    /// `counts[i][c]` samples of class `c` at client `i`.
    pub counts: Vec<[usize; 2]>,
    pub class_digits: [u8; 2],
}

impl HeterogeneityReport {
    pub fn from_labels(clients: &[Vec<u8>], class_digits: [u8; 2]) -> Self {
        let counts = clients
            .iter()
            .map(|ls| {
                let ones = ls.iter().filter(|&&l| l == 1).count();
                [ls.len() - ones, ones]
            })
            .collect();
        HeterogeneityReport {
            counts,
            class_digits,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("client_id,class,count,fraction\n");
        for (i, c) in self.counts.iter().enumerate() {
            let total = (c[0] + c[1]).max(1) as f64;
            for (digit, &count) in self.class_digits.iter().zip(c) {
                writeln!(out, "{i},{digit},{count},{:.6}", count as f64 / total).unwrap();
            }
        }
        out
    }
}

fn class_counts(m: usize, frac: [f64; 2]) -> [usize; 2] {
    let ones = ((m as f64) * frac[1]).round() as usize;
    let ones = ones.min(m);
    [m - ones, ones]
}

/// Splits the indices of `labels` into disjoint client sets with the
/// requested sizes and class mixes.
pub fn partition_noniid<R: Rng + ?Sized>(
    labels: &[u8],
    spec: &PartitionSpec,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    if spec.n_clients() == 1 && spec.sizes[0] == labels.len() {
        return Ok(vec![(0..labels.len()).collect()]);
    }
    let mut pools: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        if l > 1 {
            return Err(Error::usage(format!("label {l} at index {i} is not a bit")));
        }
        pools[l as usize].push(i);
    }
    let fractions: Vec<[f64; 2]> = match &spec.mode {
        PartitionMode::Proportions(p) => p.clone(),
        PartitionMode::Dirichlet { alpha } => {
            let dist =
                Dirichlet::new([*alpha, *alpha]).map_err(|e| Error::config(e.to_string()))?;
            (0..spec.n_clients()).map(|_| dist.sample(rng)).collect()
        }
    };
    let wanted: Vec<[usize; 2]> = spec
        .sizes
        .iter()
        .zip(&fractions)
        .map(|(&m, &f)| class_counts(m, f))
        .collect();
    for c in 0..2 {
        let need: usize = wanted.iter().map(|w| w[c]).sum();
        if need > pools[c].len() {
            return Err(Error::config(format!(
                "partition needs {need} samples of class {c} but only {} exist (short by {})",
                pools[c].len(),
                need - pools[c].len()
            )));
        }
    }
    pools.iter_mut().for_each(|p| p.shuffle(rng));
    let mut next = [0usize; 2];
    let mut out = Vec::with_capacity(spec.n_clients());
    for w in &wanted {
        let mut idx = Vec::with_capacity(w[0] + w[1]);
        for c in 0..2 {
            idx.extend_from_slice(&pools[c][next[c]..next[c] + w[c]]);
            next[c] += w[c];
        }
        idx.shuffle(rng);
        out.push(idx);
    }
    Ok(out)
}

/// What to load and how to split it.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPlan {
    pub data_dir: PathBuf,
    pub classes: [u8; 2],
    pub partition: PartitionSpec,
    /// Total test samples, drawn from the test split without label skew.
    pub test_size: usize,
    pub components: usize,
    pub seed: u64,
}

/// Preprocessed features ready for encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub clients: Vec<FeatureDataset>,
    pub test: FeatureDataset,
    pub report: HeterogeneityReport,
    pub pca: PcaModel,
}

fn sample_indices(
    len: usize,
    count: usize,
    seed: u64,
    index: u64,
    what: &str,
) -> Result<Vec<usize>> {
    if count > len {
        return Err(Error::config(format!(
            "{what} asks for {count} samples, only {len} available"
        )));
    }
    let mut r = rng::stream_rng(seed, Stream::DataSelect, index);
    let mut idx = rand::seq::index::sample(&mut r, len, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Loads MNIST, picks the class pair, partitions training samples across
/// clients, fits PCA and the [−1, 1] scaler on the pooled training images,
/// and transforms both splits.
pub fn prepare(plan: &DataPlan) -> Result<PreparedData> {
    plan.partition.validate()?;
    let files = MnistFiles::in_dir(&plan.data_dir);
    let train = select_binary(
        &load_idx(&files.train_images, &files.train_labels)?,
        plan.classes[0],
        plan.classes[1],
    )?;
    let test = select_binary(
        &load_idx(&files.test_images, &files.test_labels)?,
        plan.classes[0],
        plan.classes[1],
    )?;

    let client_idx = if plan.partition.n_clients() == 1 {
        vec![sample_indices(
            train.bits.len(),
            plan.partition.sizes[0],
            plan.seed,
            0,
            "training set",
        )?]
    } else {
        let mut r = rng::stream_rng(plan.seed, Stream::Partition, 0);
        partition_noniid(&train.bits, &plan.partition, &mut r)?
    };
    let test_idx = sample_indices(test.bits.len(), plan.test_size, plan.seed, 1, "test set")?;

    let pooled: Vec<usize> = client_idx.iter().flatten().copied().collect();
    let pooled_rows: Vec<Vec<f64>> = pooled
        .iter()
        .map(|&i| train.images.scaled_image(i))
        .collect();
    let pca = fit_pca(&pooled_rows, plan.components)?;
    let train_proj: Vec<Vec<f64>> = pooled_rows.iter().map(|r| pca.project(r)).collect();
    let test_proj: Vec<Vec<f64>> = test_idx
        .iter()
        .map(|&i| pca.project(&test.images.scaled_image(i)))
        .collect();
    let (train_feat, test_feat) = rescale_features(&train_proj, &test_proj)?;

    let mut clients = Vec::with_capacity(client_idx.len());
    let mut offset = 0;
    for idx in &client_idx {
        clients.push(FeatureDataset {
            features: train_feat[offset..offset + idx.len()].to_vec(),
            labels: idx.iter().map(|&i| train.bits[i]).collect(),
        });
        offset += idx.len();
    }
    let report = HeterogeneityReport::from_labels(
        &clients.iter().map(|c| c.labels.clone()).collect::<Vec<_>>(),
        plan.classes,
    );
    Ok(PreparedData {
        clients,
        test: FeatureDataset {
            features: test_feat,
            labels: test_idx.iter().map(|&i| test.bits[i]).collect(),
        },
        report,
        pca,
    })
}
