//! Central-difference verification of the end-to-end hypernetwork gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::TaskSample;
use crate::error::Result;
use crate::hypernet::{
    prepare_task, task_loss, task_loss_and_grads, HyperNetConfig, HyperNetParams, PreparedTask,
};
use crate::linalg::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct GradcheckSetup {
    pub d_in: usize,
    pub n_classes: usize,
    pub n_support: usize,
    pub n_query: usize,
    pub step: f64,
    pub seed: u64,
    pub cfg: HyperNetConfig,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        Self {
            d_in: 6,
            n_classes: 3,
            n_support: 12,
            n_query: 8,
            step: 1e-6,
            seed: 0,
            cfg: HyperNetConfig::tiny(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorError {
    pub name: String,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub loss: f64,
    pub max_rel_error: f64,
    pub tensors: Vec<TensorError>,
}

/// Random class-shifted Gaussian task, labels cycling so every class appears
/// in both halves.
pub fn synthetic_task(setup: &GradcheckSetup, rng: &mut ChaCha8Rng) -> TaskSample {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..setup.n_classes)
        .map(|_| (0..setup.d_in).map(|_| 1.5 * normal.sample(rng)).collect())
        .collect();
    let mut draw = |n: usize| {
        let y: Vec<usize> = (0..n).map(|i| i % setup.n_classes).collect();
        let x = Matrix::from_fn(n, setup.d_in, |i, j| centers[y[i]][j] + normal.sample(rng));
        (x, y)
    };
    let (support_x, support_y) = draw(setup.n_support);
    let (query_x, query_y) = draw(setup.n_query);
    TaskSample {
        support_x,
        support_y,
        query_x,
        query_y,
    }
}

/// Parameters and prepared task of a seeded gradcheck instance. Biases of
/// the hypernetwork and the nearest-neighbour scalars are set to small
/// nonzero values so every tensor carries a nontrivial gradient.
pub fn instance(setup: &GradcheckSetup) -> Result<(HyperNetParams<f64>, PreparedTask<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut params = HyperNetParams::<f64>::init(&setup.cfg, &mut rng);
    let jitter = Normal::new(0.0, 0.1).expect("positive std");
    for buf in params.buffers_mut() {
        for v in buf.iter_mut() {
            if *v == 0.0 {
                *v = jitter.sample(&mut rng);
            }
        }
    }
    let task = synthetic_task(setup, &mut rng);
    let prepared = prepare_task(&task, &setup.cfg, &mut rng)?;
    Ok((params, prepared))
}

const RELATIVE_FLOOR: f64 = 1e-3;

/// Analytic gradient at the requested precision against a 64-bit central
/// difference. Error per tensor is `‖g − ĝ‖∞ / max(‖g‖∞, ‖ĝ‖∞, floor)`, with
/// `floor` a fixed fraction of the largest gradient entry overall so tensors
/// whose exact gradient vanishes are not scored on rounding noise alone.
pub fn run(setup: &GradcheckSetup, precision: Precision) -> Result<GradcheckReport> {
    let (params, task) = instance(setup)?;
    let (loss, analytic) = match precision {
        Precision::F64 => task_loss_and_grads(&params, &setup.cfg, &task)?,
        Precision::F32 => {
            let (l, g) = task_loss_and_grads(&params.cast::<f32>(), &setup.cfg, &task.cast::<f32>())?;
            (l.as_f64(), g.cast::<f64>())
        }
    };
    let numeric = central_differences(&params, &task, &setup.cfg, setup.step)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _, _)| n).collect();
    let inf_norm = |b: &[f64]| b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let floor = RELATIVE_FLOOR * numeric.buffers().into_iter().map(inf_norm).fold(0.0, f64::max);
    let mut tensors = Vec::new();
    for ((name, a), b) in names.into_iter().zip(analytic.buffers()).zip(numeric.buffers()) {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = inf_norm(a).max(inf_norm(b)).max(floor);
        let rel_error = if scale > 0.0 { diff / scale } else { 0.0 };
        tensors.push(TensorError { name, rel_error });
    }
    let max_rel_error = tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        loss,
        max_rel_error,
        tensors,
    })
}

fn central_differences(
    params: &HyperNetParams<f64>,
    task: &PreparedTask<f64>,
    cfg: &HyperNetConfig,
    h: f64,
) -> Result<HyperNetParams<f64>> {
    let mut out = params.zeros_like();
    let mut probe = params.clone();
    let sizes: Vec<usize> = params.buffers().iter().map(|b| b.len()).collect();
    for (t, &len) in sizes.iter().enumerate() {
        for k in 0..len {
            let orig = probe.buffers_mut()[t][k];
            probe.buffers_mut()[t][k] = orig + h;
            let up = task_loss(&probe, cfg, task)?;
            probe.buffers_mut()[t][k] = orig - h;
            let down = task_loss(&probe, cfg, task)?;
            probe.buffers_mut()[t][k] = orig;
            out.buffers_mut()[t][k] = (up - down) / (2.0 * h);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_instance_passes_both_precisions() {
        let setup = GradcheckSetup::default();
        let r64 = run(&setup, Precision::F64).unwrap();
        let r32 = run(&setup, Precision::F32).unwrap();
        for (t, u) in r64.tensors.iter().zip(&r32.tensors) {
            eprintln!("{:>24} {:.3e} {:.3e}", t.name, t.rel_error, u.rel_error);
        }
        eprintln!("f64 {:.3e} f32 {:.3e}", r64.max_rel_error, r32.max_rel_error);
        assert!(r64.max_rel_error < 1e-5);
        assert!(r32.max_rel_error < 1e-4);
    }
}
