//! Synthetic datasets, CSV ingestion and deterministic sharding.
//!
//! CSV format: UTF-8, comma separated, one sample per line, features as
//! decimal reals, final column an integer class label, no header. Empty
//! files are rejected.

use crate::model::Batch;
use crate::tensor::{Matrix, Rng};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("label {label} at line {line} out of range for {classes} classes")]
    LabelRange {
        line: usize,
        label: i64,
        classes: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("cannot split {n} samples into {workers} shards")]
    TooManyShards { workers: usize, n: usize },
    #[error("worker id {worker_id} out of range for {workers} workers")]
    WorkerRange { worker_id: usize, workers: usize },
    #[error("empty shard")]
    EmptyShard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub n: usize,
    pub input_dim: usize,
    pub classes: usize,
}

/// Immutable sample store; shards and batches are read-only views into it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(name: &str, inputs: Matrix, labels: Vec<usize>, classes: usize) -> Self {
        assert_eq!(inputs.rows(), labels.len());
        assert!(labels.iter().all(|&l| l < classes), "label out of range");
        let meta = DatasetMeta {
            name: name.to_string(),
            n: inputs.rows(),
            input_dim: inputs.cols(),
            classes,
        };
        Self {
            inputs,
            labels,
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.meta.n
    }

    pub fn is_empty(&self) -> bool {
        self.meta.n == 0
    }

    /// Copies the selected rows into a batch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let dim = self.meta.input_dim;
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(Matrix::new(indices.len(), dim, data), labels)
    }

    /// The whole dataset as one batch (for evaluation).
    pub fn as_batch(&self) -> Batch {
        let all: Vec<usize> = (0..self.len()).collect();
        self.gather(&all)
    }
}

/// One worker's slice of a dataset: indices into the parent.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub worker_id: usize,
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Gaussian class blobs: class `c` is an isotropic Gaussian of standard
/// deviation `spread` around a seeded center drawn uniformly in [-2, 2]^dim.
/// Samples are laid out class-block by class-block.
pub fn make_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    rng: &mut Rng,
) -> Result<Dataset, DataError> {
    if classes < 1 || per_class < 1 || dim < 1 {
        return Err(DataError::InvalidArg(
            "classes, per_class and dim must all be >= 1".into(),
        ));
    }
    if !(spread > 0.0) {
        return Err(DataError::InvalidArg("spread must be > 0".into()));
    }
    let mut centers = Vec::with_capacity(classes);
    for _ in 0..classes {
        let center: Vec<f64> = (0..dim).map(|_| rng.uniform(-2.0, 2.0)).collect();
        centers.push(center);
    }
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &mu in center {
                data.push(mu + spread * rng.next_normal());
            }
            labels.push(c);
        }
    }
    Ok(Dataset::new(
        "blobs",
        Matrix::new(n, dim, data),
        labels,
        classes,
    ))
}

/// Splits a seeded global permutation of {0..N-1} into `workers` contiguous
/// ranges. Sizes differ by at most one; remainder samples go to the
/// lowest-ranked shards. Every worker calling with the same rng stream gets
/// consistent, pairwise-disjoint shards.
pub fn shard(
    dataset: &Dataset,
    workers: usize,
    worker_id: usize,
    rng: &mut Rng,
) -> Result<Shard, DataError> {
    let n = dataset.len();
    if workers == 0 || workers > n {
        return Err(DataError::TooManyShards { workers, n });
    }
    if worker_id >= workers {
        return Err(DataError::WorkerRange { worker_id, workers });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let base = n / workers;
    let rem = n % workers;
    let start = worker_id * base + worker_id.min(rem);
    let len = base + usize::from(worker_id < rem);
    Ok(Shard {
        worker_id,
        indices: perm[start..start + len].to_vec(),
    })
}

/// Loads the CSV format described in the module docs. Malformed rows are
/// reported with their 1-based line number.
pub fn load_csv(path: &Path, classes: usize) -> Result<Dataset, DataError> {
    let content = std::fs::read_to_string(path)?;
    let mut data: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut dim: Option<usize> = None;
    let mut rows = 0usize;
    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() < 2 {
            return Err(DataError::Parse {
                line,
                msg: "need at least one feature and a label".into(),
            });
        }
        let (feat, label_field) = fields.split_at(fields.len() - 1);
        match dim {
            None => dim = Some(feat.len()),
            Some(d) if d != feat.len() => {
                return Err(DataError::Parse {
                    line,
                    msg: format!("expected {d} features, found {}", feat.len()),
                })
            }
            _ => {}
        }
        for f in feat {
            let v: f64 = f.trim().parse().map_err(|_| DataError::Parse {
                line,
                msg: format!("non-numeric feature {f:?}"),
            })?;
            data.push(v);
        }
        let label: i64 = label_field[0].trim().parse().map_err(|_| DataError::Parse {
            line,
            msg: format!("non-integer label {:?}", label_field[0]),
        })?;
        if label < 0 || label as usize >= classes {
            return Err(DataError::LabelRange {
                line,
                label,
                classes,
            });
        }
        labels.push(label as usize);
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::Parse {
            line: 0,
            msg: "empty file".into(),
        });
    }
    let dim = dim.expect("rows > 0 implies dim known");
    Ok(Dataset::new(
        "csv",
        Matrix::new(rows, dim, data),
        labels,
        classes,
    ))
}

/// Writes a dataset in the same CSV format `load_csv` reads. Features are
/// printed with Rust's shortest round-trip formatting, so a save/load cycle
/// reproduces the dataset exactly.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for r in 0..dataset.len() {
        for v in dataset.inputs.row(r) {
            write!(out, "{v},").expect("string write");
        }
        writeln!(out, "{}", dataset.labels[r]).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Splits a shard into mini-batches for one epoch. The shard's indices are
/// reshuffled from `epoch_seed`; the final partial batch is kept.
pub fn batches(
    dataset: &Dataset,
    shard: &Shard,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Batch>, DataError> {
    if batch_size == 0 {
        return Err(DataError::InvalidArg("batch_size must be >= 1".into()));
    }
    if shard.is_empty() {
        return Err(DataError::EmptyShard);
    }
    let mut order = shard.indices.clone();
    let mut rng = Rng::new(epoch_seed);
    rng.shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| dataset.gather(chunk))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_dataset(n: usize) -> Dataset {
        let data: Vec<f64> = (0..n * 2).map(|i| i as f64).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        Dataset::new("toy", Matrix::new(n, 2, data), labels, 2)
    }

    #[test]
    fn blobs_have_expected_shape_and_label_counts() {
        let mut rng = Rng::new(3);
        let ds = make_blobs(2, 10, 2, 0.5, &mut rng).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 10);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 1).count(), 10);
    }

    #[test]
    fn blobs_zero_spread_rejected() {
        let mut rng = Rng::new(3);
        assert!(make_blobs(2, 10, 2, 0.0, &mut rng).is_err());
    }

    #[test]
    fn blobs_same_seed_bitwise_equal() {
        let a = make_blobs(3, 7, 4, 1.0, &mut Rng::new(99)).unwrap();
        let b = make_blobs(3, 7, 4, 1.0, &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shard_even_split() {
        let ds = toy_dataset(8);
        for w in 0..4 {
            let s = shard(&ds, 4, w, &mut Rng::new(1)).unwrap();
            assert_eq!(s.len(), 2);
        }
    }

    #[test]
    fn shard_remainder_goes_to_lowest_ranks() {
        let ds = toy_dataset(10);
        let sizes: Vec<usize> = (0..4)
            .map(|w| shard(&ds, 4, w, &mut Rng::new(1)).unwrap().len())
            .collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
    }

    #[test]
    fn shards_partition_exhaustively() {
        for n in 1..=24usize {
            let ds = toy_dataset(n);
            for workers in 1..=n {
                let mut seen = vec![false; n];
                for w in 0..workers {
                    let s = shard(&ds, workers, w, &mut Rng::new(5)).unwrap();
                    for &i in &s.indices {
                        assert!(!seen[i], "duplicate index {i} (n={n}, workers={workers})");
                        seen[i] = true;
                    }
                }
                assert!(seen.iter().all(|&b| b), "incomplete (n={n}, workers={workers})");
            }
        }
    }

    #[test]
    fn shard_rejects_bad_arguments() {
        let ds = toy_dataset(3);
        assert!(matches!(
            shard(&ds, 4, 0, &mut Rng::new(0)),
            Err(DataError::TooManyShards { .. })
        ));
        assert!(matches!(
            shard(&ds, 2, 2, &mut Rng::new(0)),
            Err(DataError::WorkerRange { .. })
        ));
    }

    #[test]
    fn batches_sizes_and_determinism() {
        let ds = toy_dataset(10);
        let s = shard(&ds, 1, 0, &mut Rng::new(1)).unwrap();
        let b1 = batches(&ds, &s, 4, 77).unwrap();
        assert_eq!(b1.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let b2 = batches(&ds, &s, 4, 77).unwrap();
        for (x, y) in b1.iter().zip(&b2) {
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.inputs.as_slice(), y.inputs.as_slice());
        }
    }

    #[test]
    fn batches_empty_shard_is_error() {
        let ds = toy_dataset(4);
        let empty = Shard {
            worker_id: 0,
            indices: vec![],
        };
        assert!(matches!(
            batches(&ds, &empty, 2, 0),
            Err(DataError::EmptyShard)
        ));
    }

    #[test]
    fn csv_round_trip_reproduces_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blobs.csv");
        let ds = make_blobs(3, 5, 4, 0.75, &mut Rng::new(21)).unwrap();
        save_csv(&ds, &path).unwrap();
        let reloaded = load_csv(&path, 3).unwrap();
        assert_eq!(ds.inputs.as_slice(), reloaded.inputs.as_slice());
        assert_eq!(ds.labels, reloaded.labels);
    }

    #[test]
    fn csv_parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "1.0,2.0,0\n1.0,oops,1\n").unwrap();
        match load_csv(&path, 2) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_small_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("three.csv");
        std::fs::write(&path, "1.0,2.0,0\n3.5,-1.0,1\n0.0,0.0,0\n").unwrap();
        let ds = load_csv(&path, 2).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.meta.input_dim, 2);
    }

    #[test]
    fn csv_empty_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        assert!(load_csv(&path, 2).is_err());
    }

    #[test]
    fn csv_label_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("label.csv");
        std::fs::write(&path, "1.0,5\n").unwrap();
        assert!(matches!(
            load_csv(&path, 2),
            Err(DataError::LabelRange { line: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn batches_concatenation_is_shard_permutation(
            n in 1usize..40,
            batch_size in 1usize..10,
            seed in any::<u64>(),
        ) {
            let ds = toy_dataset(n);
            let s = shard(&ds, 1, 0, &mut Rng::new(2)).unwrap();
            let bs = batches(&ds, &s, batch_size, seed).unwrap();
            // Recover sample identity from the first feature (row index * 2).
            let mut seen: Vec<usize> = bs
                .iter()
                .flat_map(|b| (0..b.len()).map(|r| (b.inputs.row(r)[0] / 2.0) as usize).collect::<Vec<_>>())
                .collect();
            seen.sort_unstable();
            let mut want = s.indices.clone();
            want.sort_unstable();
            prop_assert_eq!(seen, want);
        }
    }
}
