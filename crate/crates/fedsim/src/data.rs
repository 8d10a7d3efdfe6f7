//! Federation construction: synthetic regression generators, IDX ingestion,
//! and sample partitioning across clients.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimization::{ClientDataset, FeatureMatrix, LossModel, Targets};
use crate::rng::{self, domain, standard_normal};

/// IDX magic for unsigned-byte image tensors (3 dimensions).
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
/// IDX magic for unsigned-byte label vectors (1 dimension).
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Reproducibility metadata exported alongside run outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationMeta {
    pub generator: String,
    pub seed: u64,
}

/// A full federation: one dataset per client plus the shared model family.
#[derive(Clone, Debug)]
pub struct FederationData {
    pub datasets: Vec<ClientDataset>,
    pub model: LossModel,
    pub meta: FederationMeta,
}

impl FederationData {
    pub fn n_clients(&self) -> usize {
        self.datasets.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.datasets[0].feature_dim()
    }

    pub fn param_dim(&self) -> usize {
        self.model.param_dim(self.feature_dim())
    }

    pub fn min_samples(&self) -> usize {
        self.datasets
            .iter()
            .map(|d| d.n_samples())
            .min()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::validation("a federation needs at least one client"));
        }
        let d = self.feature_dim();
        for (i, data) in self.datasets.iter().enumerate() {
            if data.feature_dim() != d {
                return Err(Error::dimension(format!(
                    "client {} has feature dimension {}, expected {d}",
                    i + 1,
                    data.feature_dim()
                )));
            }
            self.model.check_dataset(data)?;
        }
        Ok(())
    }
}

/// Parameters of the synthetic heterogeneous linear-regression federation.
///
/// Features are i.i.d. standard normal. Each client regresses against its
/// own true parameter, a Gaussian perturbation of a shared one, with
/// additive Gaussian label noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRegressionSpec {
    pub n_clients: usize,
    pub samples_per_client: usize,
    pub dim: usize,
    pub noise_std: f64,
    /// Std of the per-client shift of the true parameter.
    pub heterogeneity: f64,
    pub seed: u64,
}

impl Default for SynthRegressionSpec {
    fn default() -> Self {
        Self {
            n_clients: 100,
            samples_per_client: 50,
            dim: 20,
            noise_std: 0.1,
            heterogeneity: 0.5,
            seed: 0,
        }
    }
}

impl SynthRegressionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.samples_per_client == 0 || self.dim == 0 {
            return Err(Error::validation(
                "n_clients, samples_per_client and dim must all be at least 1",
            ));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::validation("noise_std must be finite and >= 0"));
        }
        if !self.heterogeneity.is_finite() || self.heterogeneity < 0.0 {
            return Err(Error::validation("heterogeneity must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Generate the synthetic regression federation. Deterministic given the
/// spec's seed.
pub fn generate_regression(spec: &SynthRegressionSpec) -> Result<FederationData> {
    spec.validate()?;
    let mut stream = rng::derive_stream(spec.seed, domain::DATA, 0);
    let shared: Vec<f64> = (0..spec.dim)
        .map(|_| standard_normal(&mut stream))
        .collect();
    let mut datasets = Vec::with_capacity(spec.n_clients);
    for _ in 0..spec.n_clients {
        let theta_i: Vec<f64> = shared
            .iter()
            .map(|t| t + spec.heterogeneity * standard_normal(&mut stream))
            .collect();
        let mut values = Vec::with_capacity(spec.samples_per_client * spec.dim);
        let mut targets = Vec::with_capacity(spec.samples_per_client);
        for _ in 0..spec.samples_per_client {
            let row: Vec<f64> = (0..spec.dim)
                .map(|_| standard_normal(&mut stream))
                .collect();
            let clean: f64 = row.iter().zip(&theta_i).map(|(x, t)| x * t).sum();
            targets.push(clean + spec.noise_std * standard_normal(&mut stream));
            values.extend(row);
        }
        datasets.push(ClientDataset::new(
            FeatureMatrix::new(spec.samples_per_client, spec.dim, values)?,
            Targets::Real(targets),
        )?);
    }
    Ok(FederationData {
        datasets,
        model: LossModel::SquaredError,
        meta: FederationMeta {
            generator: format!(
                "synth-regression(n_clients={}, samples_per_client={}, dim={}, noise_std={}, heterogeneity={})",
                spec.n_clients, spec.samples_per_client, spec.dim, spec.noise_std, spec.heterogeneity
            ),
            seed: spec.seed,
        },
    })
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let end = at + 4;
    if end > bytes.len() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("truncated IDX file while reading {what}"),
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[at],
        bytes[at + 1],
        bytes[at + 2],
        bytes[at + 3],
    ]))
}

/// Load an IDX image/label file pair.
///
/// Big-endian IDX: images carry magic 2051 and dimensions
/// `(count, rows, cols)`; labels carry magic 2049 and `count`. Pixels are
/// scaled to `[0, 1]`. The two counts must agree.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<(FeatureMatrix, Vec<usize>)> {
    let image_bytes = std::fs::read(images_path.as_ref())?;
    let magic = read_be_u32(&image_bytes, 0, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format(format!(
            "image file has magic {magic}, expected {IDX_IMAGE_MAGIC} (0x00000803)"
        )));
    }
    let count = read_be_u32(&image_bytes, 4, "image count")? as usize;
    let rows = read_be_u32(&image_bytes, 8, "image rows")? as usize;
    let cols = read_be_u32(&image_bytes, 12, "image cols")? as usize;
    let pixels = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format("image dimensions overflow"))?;
    let body = &image_bytes[16.min(image_bytes.len())..];
    if body.len() < pixels {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!(
                "truncated IDX image file: expected {pixels} pixel bytes, found {}",
                body.len()
            ),
        )));
    }
    if body.len() > pixels {
        return Err(Error::format(format!(
            "IDX image file has {} trailing bytes",
            body.len() - pixels
        )));
    }
    let values: Vec<f64> = body.iter().map(|&b| b as f64 / 255.0).collect();
    let features = FeatureMatrix::new(count, rows * cols, values)?;

    let label_bytes = std::fs::read(labels_path.as_ref())?;
    let magic = read_be_u32(&label_bytes, 0, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::format(format!(
            "label file has magic {magic}, expected {IDX_LABEL_MAGIC} (0x00000801)"
        )));
    }
    let label_count = read_be_u32(&label_bytes, 4, "label count")? as usize;
    let body = &label_bytes[8.min(label_bytes.len())..];
    if body.len() < label_count {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!(
                "truncated IDX label file: expected {label_count} bytes, found {}",
                body.len()
            ),
        )));
    }
    if body.len() > label_count {
        return Err(Error::format(format!(
            "IDX label file has {} trailing bytes",
            body.len() - label_count
        )));
    }
    if label_count != count {
        return Err(Error::validation(format!(
            "image/label count mismatch: {count} images but {label_count} labels"
        )));
    }
    let labels: Vec<usize> = body.iter().map(|&b| b as usize).collect();
    Ok((features, labels))
}

/// Write an IDX image file (magic 2051). Fixture/tooling counterpart of
/// [`load_mnist_idx`].
pub fn write_idx_images(
    path: impl AsRef<Path>,
    images: &[u8],
    count: usize,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if images.len() != count * rows * cols {
        return Err(Error::dimension(format!(
            "expected {} pixel bytes, got {}",
            count * rows * cols,
            images.len()
        )));
    }
    let mut bytes = Vec::with_capacity(16 + images.len());
    bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(count as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    bytes.extend_from_slice(images);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Write an IDX label file (magic 2049).
pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// How to split a labeled sample pool across clients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionStrategy {
    /// Random permutation cut into near-equal shards.
    IidShards,
    /// Sort by label, then cut contiguously: classic non-iid shards.
    LabelSorted,
}

/// Partition a classification sample pool into a federation of `n_clients`.
///
/// Shard sizes differ by at most one; the union of the client datasets is
/// exactly the input.
pub fn partition(
    features: FeatureMatrix,
    labels: Vec<usize>,
    n_clients: usize,
    strategy: PartitionStrategy,
    seed: u64,
) -> Result<FederationData> {
    if features.n_rows() != labels.len() {
        return Err(Error::dimension(format!(
            "{} feature rows but {} labels",
            features.n_rows(),
            labels.len()
        )));
    }
    let total = labels.len();
    if n_clients == 0 {
        return Err(Error::validation("n_clients must be at least 1"));
    }
    if total < n_clients {
        return Err(Error::capacity(format!(
            "cannot partition {total} samples across {n_clients} clients"
        )));
    }
    let mut order: Vec<usize> = (0..total).collect();
    match strategy {
        PartitionStrategy::IidShards => {
            let mut stream = rng::derive_stream(seed, domain::DATA, 1);
            order.shuffle(&mut stream);
        }
        PartitionStrategy::LabelSorted => {
            order.sort_by_key(|&i| labels[i]); // stable: preserves input order within a class
        }
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let base = total / n_clients;
    let extra = total % n_clients;
    let d = features.n_cols();
    let mut datasets = Vec::with_capacity(n_clients);
    let mut cursor = 0usize;
    for c in 0..n_clients {
        let size = base + usize::from(c < extra);
        let shard = &order[cursor..cursor + size];
        cursor += size;
        let mut values = Vec::with_capacity(size * d);
        let mut ys = Vec::with_capacity(size);
        for &i in shard {
            values.extend_from_slice(features.row(i));
            ys.push(labels[i]);
        }
        datasets.push(ClientDataset::new(
            FeatureMatrix::new(size, d, values)?,
            Targets::Class(ys),
        )?);
    }
    Ok(FederationData {
        datasets,
        model: LossModel::MultinomialLogistic { classes },
        meta: FederationMeta {
            generator: format!(
                "partition(n_clients={n_clients}, strategy={strategy:?}, samples={total}, classes={classes})"
            ),
            seed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::availability::MarginalWeights;
    use crate::optimization::{local_loss, solve_reference_optimum, ProjectionSet, SolveOptions};
    use std::collections::BTreeMap;

    #[test]
    fn noiseless_homogeneous_is_realizable() {
        let spec = SynthRegressionSpec {
            n_clients: 4,
            samples_per_client: 10,
            dim: 3,
            noise_std: 0.0,
            heterogeneity: 0.0,
            seed: 7,
        };
        let fed = generate_regression(&spec).unwrap();
        // Recover the shared parameter from any one client and check all.
        let w = MarginalWeights::uniform(4);
        let sol = solve_reference_optimum(
            &w,
            &fed.datasets,
            &fed.model,
            &ProjectionSet::new(10.0).unwrap(),
            &SolveOptions::default(),
        )
        .unwrap();
        for data in &fed.datasets {
            assert!(local_loss(&sol.theta, data, &fed.model).unwrap() < 1e-16);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthRegressionSpec::default();
        let spec = SynthRegressionSpec {
            n_clients: 3,
            samples_per_client: 5,
            ..spec
        };
        let a = generate_regression(&spec).unwrap();
        let b = generate_regression(&spec).unwrap();
        for (x, y) in a.datasets.iter().zip(&b.datasets) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn noiseless_recovery_matches_truth() {
        let spec = SynthRegressionSpec {
            n_clients: 5,
            samples_per_client: 20,
            dim: 4,
            noise_std: 0.0,
            heterogeneity: 0.0,
            seed: 3,
        };
        let fed = generate_regression(&spec).unwrap();
        let p = MarginalWeights::exact(vec![0.4, 0.3, 0.1, 0.1, 0.1]).unwrap();
        let sol = solve_reference_optimum(
            &p,
            &fed.datasets,
            &fed.model,
            &ProjectionSet::new(10.0).unwrap(),
            &SolveOptions::default(),
        )
        .unwrap();
        // Any weighting recovers the shared parameter on a consistent system.
        assert!(sol.objective < 1e-16);
        let other = MarginalWeights::uniform(5);
        let sol2 = solve_reference_optimum(
            &other,
            &fed.datasets,
            &fed.model,
            &ProjectionSet::new(10.0).unwrap(),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(sol.theta.minus(&sol2.theta).norm() < 1e-8);
    }

    fn tiny_idx_pair(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let images = dir.join("images.idx");
        let labels = dir.join("labels.idx");
        let pixels: Vec<u8> = (0..2 * 28 * 28).map(|i| (i % 256) as u8).collect();
        write_idx_images(&images, &pixels, 2, 28, 28).unwrap();
        write_idx_labels(&labels, &[7, 3]).unwrap();
        (images, labels)
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = tiny_idx_pair(dir.path());
        let (features, ys) = load_mnist_idx(&images, &labels).unwrap();
        assert_eq!(features.n_rows(), 2);
        assert_eq!(features.n_cols(), 784);
        assert_eq!(ys, vec![7, 3]);
        assert_eq!(features.row(0)[0], 0.0);
        assert_eq!(features.row(0)[255], 1.0);
        assert!((features.row(0)[1] - 1.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn idx_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("bad.idx");
        let labels = dir.path().join("labels.idx");
        // label magic in the image slot
        let mut bytes = IDX_LABEL_MAGIC.to_be_bytes().to_vec();
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.push(0);
        std::fs::write(&images, bytes).unwrap();
        write_idx_labels(&labels, &[0]).unwrap();
        let err = load_mnist_idx(&images, &labels).unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("2051"), "message: {msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_rejects_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = tiny_idx_pair(dir.path());

        let truncated = dir.path().join("trunc.idx");
        let bytes = std::fs::read(&images).unwrap();
        std::fs::write(&truncated, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            load_mnist_idx(&truncated, &labels),
            Err(Error::Io(_))
        ));

        let short_labels = dir.path().join("short.idx");
        write_idx_labels(&short_labels, &[1]).unwrap();
        assert!(matches!(
            load_mnist_idx(&images, &short_labels),
            Err(Error::Validation(_))
        ));
    }

    fn sample_pool(n: usize, d: usize) -> (FeatureMatrix, Vec<usize>) {
        let values: Vec<f64> = (0..n * d).map(|i| i as f64 / (n * d) as f64).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        (FeatureMatrix::new(n, d, values).unwrap(), labels)
    }

    #[test]
    fn partition_one_sample_each() {
        let (features, labels) = sample_pool(100, 2);
        let fed = partition(features, labels, 100, PartitionStrategy::IidShards, 0).unwrap();
        assert_eq!(fed.n_clients(), 100);
        assert!(fed.datasets.iter().all(|d| d.n_samples() == 1));
    }

    #[test]
    fn partition_single_client_keeps_everything() {
        let (features, labels) = sample_pool(10, 2);
        let fed = partition(features, labels, 1, PartitionStrategy::IidShards, 1).unwrap();
        assert_eq!(fed.datasets[0].n_samples(), 10);
    }

    #[test]
    fn label_sorted_separates_classes() {
        let features = FeatureMatrix::new(4, 1, vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        let labels = vec![0, 0, 1, 1];
        let fed = partition(features, labels, 2, PartitionStrategy::LabelSorted, 0).unwrap();
        match &fed.datasets[0].targets {
            Targets::Class(ys) => assert_eq!(ys, &vec![0, 0]),
            _ => unreachable!(),
        }
        match &fed.datasets[1].targets {
            Targets::Class(ys) => assert_eq!(ys, &vec![1, 1]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn partition_conserves_samples_and_balances_shards() {
        for strategy in [PartitionStrategy::IidShards, PartitionStrategy::LabelSorted] {
            let (features, labels) = sample_pool(23, 3);
            let before: BTreeMap<String, usize> = (0..23).fold(BTreeMap::new(), |mut m, i| {
                let key = format!("{:?}/{}", features.row(i), labels[i]);
                *m.entry(key).or_default() += 1;
                m
            });
            let fed = partition(features, labels, 5, strategy, 9).unwrap();
            let mut after: BTreeMap<String, usize> = BTreeMap::new();
            for data in &fed.datasets {
                let ys = match &data.targets {
                    Targets::Class(v) => v,
                    _ => unreachable!(),
                };
                for (j, y) in ys.iter().enumerate() {
                    let key = format!("{:?}/{}", data.features.row(j), y);
                    *after.entry(key).or_default() += 1;
                }
            }
            assert_eq!(before, after, "strategy {strategy:?}");
            let sizes: Vec<usize> = fed.datasets.iter().map(|d| d.n_samples()).collect();
            let max = sizes.iter().max().unwrap();
            let min = sizes.iter().min().unwrap();
            assert!(max - min <= 1, "sizes {sizes:?}");
        }
    }

    #[test]
    fn partition_rejects_too_few_samples() {
        let (features, labels) = sample_pool(3, 2);
        assert!(matches!(
            partition(features, labels, 4, PartitionStrategy::IidShards, 0),
            Err(Error::Capacity(_))
        ));
    }
}
