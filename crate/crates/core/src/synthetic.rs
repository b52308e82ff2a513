//! Randomly rotated, anisotropic two-class Gaussian blob datasets.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{apply_standardizer, fit_standardizer, Column, RawDataset};
use crate::error::Result;
use crate::meta::{stream_rng, Corpus, Dataset};

#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub min_dim: usize,
    pub max_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Range of the Mahalanobis distance between the two class means.
    pub separation: (f64, f64),
    /// Per-axis scales are `exp(u)` with `u` uniform in `±log_scale_range`.
    pub log_scale_range: f64,
    /// Largest fraction of rows given to the minority class is 0.5; the
    /// smallest is `0.5 − max_imbalance`.
    pub max_imbalance: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            min_dim: 4,
            max_dim: 12,
            n_train: 128,
            n_test: 128,
            separation: (3.0, 5.0),
            log_scale_range: 1.0,
            max_imbalance: 0.2,
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn random_rotation<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| normal(rng));
    g.qr().q()
}

/// One dataset, standardized with its train part's statistics.
pub fn blob_dataset<R: Rng + ?Sized>(name: &str, spec: &BlobSpec, rng: &mut R) -> Result<Dataset> {
    let d = rng.random_range(spec.min_dim..=spec.max_dim);
    let rot = random_rotation(d, rng);
    let scales: Vec<f64> = (0..d)
        .map(|_| rng.random_range(-spec.log_scale_range..=spec.log_scale_range).exp())
        .collect();
    // Covariance is rot·diag(s²)·rotᵀ; place the means `delta` apart in the
    // whitened metric along a random direction.
    let dir: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let delta = rng.random_range(spec.separation.0..=spec.separation.1);
    let white: Vec<f64> = dir.iter().map(|v| v / norm * delta / 2.0).collect();
    let offset: Vec<f64> = (0..d)
        .map(|i| (0..d).map(|k| rot[(i, k)] * scales[k] * white[k]).sum())
        .collect();
    let minority = 0.5 - rng.random_range(0.0..=spec.max_imbalance);
    let flip = rng.random_bool(0.5);

    let mut draw = |n: usize| {
        let n1 = ((n as f64 * minority).round() as usize).clamp(2, n - 2);
        let y: Vec<usize> = (0..n).map(|i| usize::from((i < n1) != flip)).collect();
        let mut cols = vec![Vec::with_capacity(n); d];
        for &c in &y {
            let g: Vec<f64> = (0..d).map(|k| scales[k] * normal(rng)).collect();
            let sign = if c == 1 { 1.0 } else { -1.0 };
            for (i, col) in cols.iter_mut().enumerate() {
                let v: f64 = (0..d).map(|k| rot[(i, k)] * g[k]).sum();
                col.push(Some(v + sign * offset[i]));
            }
        }
        let columns = cols
            .into_iter()
            .enumerate()
            .map(|(i, v)| Column::numeric(format!("x{i}"), v))
            .collect();
        RawDataset::new(columns, y)
    };
    let train = draw(spec.n_train)?;
    let test = draw(spec.n_test)?;
    let state = fit_standardizer(&train)?;
    Ok(Dataset {
        name: name.to_string(),
        train: apply_standardizer(&state, &train)?,
        test: apply_standardizer(&state, &test)?,
    })
}

const CORPUS_KEY: u64 = 0x9E37_79B9_7F4A_7C15;

/// `count` datasets named `{prefix}-{i}`, each from its own generator
/// stream, kept apart from the streams training draws from the same seed.
pub fn blob_datasets(prefix: &str, count: usize, seed: u64, stream_base: u64, spec: &BlobSpec) -> Result<Vec<Dataset>> {
    (0..count)
        .map(|i| blob_dataset(&format!("{prefix}-{i}"), spec, &mut stream_rng(seed ^ CORPUS_KEY, stream_base + i as u64)))
        .collect()
}

/// Meta-train, meta-val and meta-test blob collections.
pub struct BlobCorpus {
    pub corpus: Corpus,
    pub meta_test: Vec<Dataset>,
}

pub fn blob_corpus(n_train: usize, n_val: usize, n_test: usize, seed: u64, spec: &BlobSpec) -> Result<BlobCorpus> {
    let train = blob_datasets("train", n_train, seed, 0, spec)?;
    let val = blob_datasets("val", n_val, seed, 1 << 20, spec)?;
    let meta_test = blob_datasets("test", n_test, seed, 2 << 20, spec)?;
    Ok(BlobCorpus {
        corpus: Corpus::new(train, val)?,
        meta_test,
    })
}
