//! Embedding datasets: on-disk format, splits, batching, and synthetic data.
//!
//! A dataset directory holds a JSON manifest (`format = "duch-emb/1"`) and
//! headerless blobs: four little-endian `f32` row-major embedding matrices,
//! `u32` labels, and one split byte per row (0 train, 1 query, 2 retrieval).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const FORMAT_VERSION: &str = "duch-emb/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Retrieval,
}

impl Split {
    pub fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Query => 1,
            Split::Retrieval => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Split::Train),
            1 => Some(Split::Query),
            2 => Some(Split::Retrieval),
            _ => None,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "retrieval" => Ok(Split::Retrieval),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Aligned image/text embeddings, their augmented views, labels and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub x: Matrix,
    pub x_aug: Matrix,
    pub y: Matrix,
    pub y_aug: Matrix,
    pub labels: Vec<u32>,
    pub split: Vec<Split>,
    pub provenance: BTreeMap<String, String>,
}

/// Embeddings of the training rows only. Labels never reach the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub x: Matrix,
    pub x_aug: Matrix,
    pub y: Matrix,
    pub y_aug: Matrix,
}

impl TrainingData {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

impl EmbeddingDataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d_img(&self) -> usize {
        self.x.cols()
    }

    pub fn d_txt(&self) -> usize {
        self.y.cols()
    }

    /// Checks shape alignment and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let shapes = [
            ("x", self.x.shape(), self.d_img()),
            ("x_aug", self.x_aug.shape(), self.d_img()),
            ("y", self.y.shape(), self.d_txt()),
            ("y_aug", self.y_aug.shape(), self.d_txt()),
        ];
        for (name, (rows, cols), want) in shapes {
            if rows != n || cols != want {
                return Err(Error::dim(
                    "dataset",
                    format!("{name} is {rows}x{cols}, expected {n}x{want}"),
                ));
            }
        }
        if self.labels.len() != n || self.split.len() != n {
            return Err(Error::dim(
                "dataset",
                format!(
                    "{} labels and {} split tags for {n} rows",
                    self.labels.len(),
                    self.split.len()
                ),
            ));
        }
        for (name, m) in [
            ("x", &self.x),
            ("x_aug", &self.x_aug),
            ("y", &self.y),
            ("y_aug", &self.y_aug),
        ] {
            if let Some(row) = (0..n).find(|&r| m.row(r).iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteRow {
                    path: PathBuf::from(name),
                    row,
                });
            }
        }
        Ok(())
    }

    /// Row indices tagged with `split`, in ascending order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn training_data(&self) -> TrainingData {
        let idx = self.indices(Split::Train);
        TrainingData {
            x: self.x.select_rows(&idx),
            x_aug: self.x_aug.select_rows(&idx),
            y: self.y.select_rows(&idx),
            y_aug: self.y_aug.select_rows(&idx),
        }
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<u32> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Shuffles `0..n` with `seed` and assigns the first `⌊r_train·n⌋` rows to
/// train, the next `⌊r_query·n⌋` to query, and the remainder to retrieval.
pub fn split_dataset(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Vec<Split>> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n_train = (a * n as f64).floor() as usize;
    let n_query = (b * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tags = vec![Split::Retrieval; n];
    for (pos, &i) in order.iter().enumerate() {
        if pos < n_train {
            tags[i] = Split::Train;
        } else if pos < n_train + n_query {
            tags[i] = Split::Query;
        }
    }
    Ok(tags)
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.5, 0.1, 0.4);

/// Partitions `0..n` into shuffled contiguous chunks of `batch_size`; the last may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Seeded batches of dataset row indices drawn from one split.
pub fn make_batches(
    dataset: &EmbeddingDataset,
    split: Split,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let rows = dataset.indices(split);
    if rows.is_empty() {
        return Err(Error::Config(format!("split {split:?} is empty")));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(batch_indices(rows.len(), batch_size, epoch_seed)
        .into_iter()
        .map(|b| b.into_iter().map(|i| rows[i]).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub x: String,
    pub x_aug: String,
    pub y: String,
    pub y_aug: String,
    pub labels: String,
    pub split: String,
}

impl Default for ManifestFiles {
    fn default() -> Self {
        Self {
            x: "x.f32".into(),
            x_aug: "x_aug.f32".into(),
            y: "y.f32".into(),
            y_aug: "y_aug.f32".into(),
            labels: "labels.u32".into(),
            split: "split.u8".into(),
        }
    }
}

/// On-disk description of a dataset. File paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub n: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub files: ManifestFiles,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_blob(m: &Matrix) -> Vec<u8> {
    m.as_slice()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

/// Writes the manifest and blobs into `dir`, returning the manifest path.
pub fn save_dataset(dataset: &EmbeddingDataset, dir: &Path) -> Result<PathBuf> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ManifestFiles::default();
    write_file(&dir.join(&files.x), &f32_blob(&dataset.x))?;
    write_file(&dir.join(&files.x_aug), &f32_blob(&dataset.x_aug))?;
    write_file(&dir.join(&files.y), &f32_blob(&dataset.y))?;
    write_file(&dir.join(&files.y_aug), &f32_blob(&dataset.y_aug))?;
    let labels: Vec<u8> = dataset
        .labels
        .iter()
        .flat_map(|l| l.to_le_bytes())
        .collect();
    write_file(&dir.join(&files.labels), &labels)?;
    let split: Vec<u8> = dataset.split.iter().map(|s| s.to_byte()).collect();
    write_file(&dir.join(&files.split), &split)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION.into(),
        n: dataset.n(),
        d_img: dataset.d_img(),
        d_txt: dataset.d_txt(),
        files,
        provenance: dataset.provenance.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    Ok(path)
}

fn read_blob(path: &Path, expected: u64) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let actual = fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    if actual != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = read_blob(path, (rows * cols * 4) as u64)?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let m = Matrix::from_vec(rows, cols, values)?;
    if let Some(row) = (0..rows).find(|&r| m.row(r).iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteRow {
            path: path.to_path_buf(),
            row,
        });
    }
    Ok(m)
}

/// Accepts either a manifest file or the directory containing `manifest.json`.
pub fn load_dataset(manifest_path: &Path) -> Result<EmbeddingDataset> {
    let manifest_path = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_FILE)
    } else {
        manifest_path.to_path_buf()
    };
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let version: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    let found = version
        .get("format_version")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>");
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found: found.into(),
            expected: FORMAT_VERSION.into(),
        });
    }
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let x = read_f32_matrix(&dir.join(&m.files.x), m.n, m.d_img)?;
    let x_aug = read_f32_matrix(&dir.join(&m.files.x_aug), m.n, m.d_img)?;
    let y = read_f32_matrix(&dir.join(&m.files.y), m.n, m.d_txt)?;
    let y_aug = read_f32_matrix(&dir.join(&m.files.y_aug), m.n, m.d_txt)?;
    let labels = read_blob(&dir.join(&m.files.labels), (m.n * 4) as u64)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let split_path = dir.join(&m.files.split);
    let split = read_blob(&split_path, m.n as u64)?
        .into_iter()
        .enumerate()
        .map(|(row, b)| {
            Split::from_byte(b).ok_or_else(|| {
                Error::format(
                    split_path.display().to_string(),
                    format!("row {row} has split tag {b}"),
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = EmbeddingDataset {
        x,
        x_aug,
        y,
        y_aug,
        labels,
        split,
        provenance: m.provenance,
    };
    ds.validate()?;
    Ok(ds)
}

/// Parameters of the clustered synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_clusters: usize,
    pub n_pairs: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub noise_sigma: f64,
    pub aug_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_clusters: 4,
            n_pairs: 2000,
            d_img: 64,
            d_txt: 96,
            noise_sigma: 0.15,
            aug_sigma: 0.3,
            seed: 0,
        }
    }
}

fn unit_vector(d: usize, normal: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Clustered image/text pairs: pair `m` belongs to cluster `m mod n_clusters`
/// and is that cluster's unit anchor plus Gaussian noise in each modality.
/// Augmented views add further noise to the same rows. Values are rounded to
/// `f32` so that the dataset survives a save/load cycle unchanged.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<EmbeddingDataset> {
    if cfg.n_clusters < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 clusters, got {}",
            cfg.n_clusters
        )));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.aug_sigma >= 0.0) {
        return Err(Error::Config("noise levels must be non-negative".into()));
    }
    if cfg.d_img == 0 || cfg.d_txt == 0 || cfg.n_pairs == 0 {
        return Err(Error::Config(
            "synthetic dimensions must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let img_anchors: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| unit_vector(cfg.d_img, &std, &mut rng))
        .collect();
    let txt_anchors: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| unit_vector(cfg.d_txt, &std, &mut rng))
        .collect();

    let n = cfg.n_pairs;
    let mut x = Matrix::zeros(n, cfg.d_img);
    let mut x_aug = Matrix::zeros(n, cfg.d_img);
    let mut y = Matrix::zeros(n, cfg.d_txt);
    let mut y_aug = Matrix::zeros(n, cfg.d_txt);
    let mut labels = Vec::with_capacity(n);
    let round = |v: f64| v as f32 as f64;
    for m in 0..n {
        let g = m % cfg.n_clusters;
        labels.push(g as u32);
        for (base, anchor, aug) in [
            (&mut x, &img_anchors[g], &mut x_aug),
            (&mut y, &txt_anchors[g], &mut y_aug),
        ] {
            for c in 0..anchor.len() {
                let v = anchor[c] + cfg.noise_sigma * std.sample(&mut rng);
                let a = v + cfg.aug_sigma * std.sample(&mut rng);
                base.set(m, c, round(v));
                aug.set(m, c, round(a));
            }
        }
    }
    let split = split_dataset(n, DEFAULT_SPLIT, cfg.seed.wrapping_add(1))?;
    let mut provenance = BTreeMap::new();
    provenance.insert("generator".into(), "synthetic-clusters".into());
    provenance.insert(
        "config".into(),
        serde_json::to_string(cfg).map_err(|e| Error::format("synthetic config", e.to_string()))?,
    );
    Ok(EmbeddingDataset {
        x,
        x_aug,
        y,
        y_aug,
        labels,
        split,
        provenance,
    })
}

/// Unit anchors used by [`generate_synthetic`] for the given config, regenerated
/// from the seed. Exposed for diagnostics and tests.
pub fn synthetic_anchors(cfg: &SyntheticConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let img = (0..cfg.n_clusters)
        .map(|_| unit_vector(cfg.d_img, &std, &mut rng))
        .collect();
    let txt = (0..cfg.n_clusters)
        .map(|_| unit_vector(cfg.d_txt, &std, &mut rng))
        .collect();
    (img, txt)
}
