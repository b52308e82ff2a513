//! Fixed-width input representation: ReLU random features (an arc-cosine
//! kernel approximation) reduced by a PCA fit on the support set, then
//! clipped per component.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{relu, Matrix};

/// Untrained Gaussian projection `d_in × d_rf` with He variance `2 / d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct RfProjection {
    pub weight: Matrix<f64>,
}

impl RfProjection {
    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_rf(&self) -> usize {
        self.weight.cols()
    }
}

pub fn sample_rf<R: Rng + ?Sized>(d_in: usize, d_rf: usize, rng: &mut R) -> Result<RfProjection> {
    if d_in == 0 || d_rf == 0 {
        return Err(Error::Shape(format!(
            "random-feature projection needs positive widths, got {d_in}x{d_rf}"
        )));
    }
    let normal = Normal::new(0.0, (2.0 / d_in as f64).sqrt()).expect("positive std");
    let data = (0..d_in * d_rf).map(|_| normal.sample(rng)).collect();
    Ok(RfProjection {
        weight: Matrix::from_vec(d_in, d_rf, data)?,
    })
}

/// `max(0, X·W)`, no bias.
pub fn rf_features(x: &Matrix<f64>, rf: &RfProjection) -> Result<Matrix<f64>> {
    if x.cols() != rf.d_in() {
        return Err(Error::Shape(format!(
            "input has {} features, projection expects {}",
            x.cols(),
            rf.d_in()
        )));
    }
    Ok(x.matmul(&rf.weight)?.map(relu))
}

/// PCA of the support's random features.
///
/// `components` is `d_rf × n_pc`, columns ordered by decreasing singular
/// value. Columns past the support rank are zero, as are their `sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaState {
    pub mean: Vec<f64>,
    pub components: Matrix<f64>,
    pub sigma: Vec<f64>,
}

impl PcaState {
    pub fn n_pc(&self) -> usize {
        self.components.cols()
    }

    /// `(features − mean) · components`, unclipped.
    pub fn project(&self, features: &Matrix<f64>) -> Result<Matrix<f64>> {
        let mut centered = features.clone();
        let neg: Vec<f64> = self.mean.iter().map(|m| -m).collect();
        centered.add_row_vector(&neg);
        centered.matmul(&self.components)
    }
}

/// Singular values and right singular vectors (as rows) of `c`. Wide
/// matrices go through a thin QR of `cᵀ` first: with `cᵀ = QR` and
/// `Rᵀ = U S Wᵀ`, the right singular vectors of `c` are `Q W`.
fn right_singular_vectors(c: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = c.shape();
    if n >= d {
        let svd = c.svd(false, true);
        let v_t = svd.v_t.expect("right singular vectors requested");
        return (svd.singular_values.iter().copied().collect(), v_t);
    }
    let qr = c.transpose().qr();
    let (q, r) = (qr.q(), qr.r());
    let svd = r.transpose().svd(false, true);
    let w_t = svd.v_t.expect("right singular vectors requested");
    (svd.singular_values.iter().copied().collect(), w_t * q.transpose())
}

pub fn fit_pca(rf_support: &Matrix<f64>, n_pc: usize) -> Result<PcaState> {
    let (n, d) = rf_support.shape();
    if n < 2 {
        return Err(Error::TooFewRows(n));
    }
    let mean = rf_support.col_means();
    let mut centered = rf_support.clone();
    let neg: Vec<f64> = mean.iter().map(|m| -m).collect();
    centered.add_row_vector(&neg);

    let (singular_values, v_t) = right_singular_vectors(DMatrix::from(&centered));
    let mut order: Vec<usize> = (0..singular_values.len()).collect();
    order.sort_by(|&a, &b| singular_values[b].total_cmp(&singular_values[a]));
    let s_max = order.first().map_or(0.0, |&k| singular_values[k]);
    let tol = s_max * n.max(d) as f64 * f64::EPSILON;

    let mut components = Matrix::zeros(d, n_pc);
    for (j, &k) in order.iter().take(n_pc).enumerate() {
        if singular_values[k] <= tol {
            break;
        }
        let row = v_t.row(k);
        // Sign convention: the largest-magnitude entry is positive.
        let pivot = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1.abs() { (i, v) } else { best });
        let sign = if pivot.1 < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components.set(i, j, sign * row[i]);
        }
    }

    let projected = centered.matmul(&components)?;
    let sigma = projected
        .col_means()
        .iter()
        .enumerate()
        .map(|(j, &mu)| {
            let var = (0..n)
                .map(|i| (projected.get(i, j) - mu).powi(2))
                .sum::<f64>()
                / n as f64;
            var.sqrt()
        })
        .collect();
    Ok(PcaState {
        mean,
        components,
        sigma,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformState {
    pub rf: RfProjection,
    pub pca: PcaState,
    pub clip_sigma: f64,
}

impl TransformState {
    pub fn d_in(&self) -> usize {
        self.rf.d_in()
    }

    pub fn n_pc(&self) -> usize {
        self.pca.n_pc()
    }

    /// Sample a projection and fit the PCA on `support`.
    pub fn fit<R: Rng + ?Sized>(
        support: &Matrix<f64>,
        d_rf: usize,
        n_pc: usize,
        clip_sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if clip_sigma <= 0.0 {
            return Err(Error::Config("clip_sigma must be positive".into()));
        }
        let rf = sample_rf(support.cols(), d_rf, rng)?;
        let pca = fit_pca(&rf_features(support, &rf)?, n_pc)?;
        Ok(Self { rf, pca, clip_sigma })
    }

    pub fn clip_bounds(&self) -> Vec<f64> {
        self.pca.sigma.iter().map(|s| self.clip_sigma * s).collect()
    }
}

pub fn pc_transform(x: &Matrix<f64>, state: &TransformState) -> Result<Matrix<f64>> {
    let mut z = state.pca.project(&rf_features(x, &state.rf)?)?;
    let bounds = state.clip_bounds();
    for i in 0..z.rows() {
        for (v, &b) in z.row_mut(i).iter_mut().zip(&bounds) {
            *v = v.clamp(-b, b);
        }
    }
    Ok(z)
}

/// How a generated network maps standardized inputs to its `n_pc`-wide
/// first stage.
#[derive(Clone, Debug, PartialEq)]
pub enum InputMap {
    RfPca(TransformState),
    /// Ablation without random features or PCA: keep the first `n_pc`
    /// features, zero-padding narrower inputs.
    Pad { d_in: usize, n_pc: usize },
}

impl InputMap {
    pub fn d_in(&self) -> usize {
        match self {
            InputMap::RfPca(t) => t.d_in(),
            InputMap::Pad { d_in, .. } => *d_in,
        }
    }

    pub fn n_pc(&self) -> usize {
        match self {
            InputMap::RfPca(t) => t.n_pc(),
            InputMap::Pad { n_pc, .. } => *n_pc,
        }
    }

    pub fn apply(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        match self {
            InputMap::RfPca(t) => pc_transform(x, t),
            InputMap::Pad { d_in, n_pc } => {
                if x.cols() != *d_in {
                    return Err(Error::Shape(format!(
                        "input has {} features, expected {d_in}",
                        x.cols()
                    )));
                }
                let keep = (*d_in).min(*n_pc);
                Ok(Matrix::from_fn(x.rows(), *n_pc, |i, j| {
                    if j < keep {
                        x.get(i, j)
                    } else {
                        0.0
                    }
                }))
            }
        }
    }
}
