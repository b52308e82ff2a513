//! The generated classifier: residual ReLU layers of width `n_pc` followed
//! by a linear classification layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};

/// Affine layer `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T: Real = f64> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![T::zero(); fan_out],
        }
    }

    /// Weights `U(±1/√fan_in)`, zero bias.
    pub fn uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Matrix::from_fn(fan_in, fan_out, |_, _| T::of(rng.random_range(-bound..bound))),
            bias: vec![T::zero(); fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = x.matmul(&self.weight)?;
        y.add_row_vector(&self.bias);
        Ok(y)
    }

    /// Accumulates `∂/∂W`, `∂/∂b` into `grad` and returns `∂/∂x`.
    pub fn backward(&self, x: &Matrix<T>, dy: &Matrix<T>, grad: &mut Dense<T>) -> Result<Matrix<T>> {
        grad.weight.add_assign(&x.t_matmul(dy)?);
        for (g, s) in grad.bias.iter_mut().zip(dy.col_sums()) {
            *g += s;
        }
        dy.matmul_t(&self.weight)
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.fan_in(), self.fan_out())
    }

    pub fn all_finite(&self) -> bool {
        self.weight.all_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

/// Where the skip connection of a hidden layer joins.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResidualMode {
    /// `a' = ReLU(a·W + b) + a`
    #[default]
    PostActivation,
    /// `a' = ReLU(a·W + b + a)`
    PreActivation,
    /// `a' = ReLU(a·W + b)`
    None,
}

impl ResidualMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ResidualMode::PostActivation => "post",
            ResidualMode::PreActivation => "pre",
            ResidualMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "post" => Ok(Self::PostActivation),
            "pre" => Ok(Self::PreActivation),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown residual mode `{other}`"))),
        }
    }
}

/// Weights of the generated network: `hidden` layers are `n_pc × n_pc`,
/// `classifier` is `n_pc × n_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedLayers<T: Real = f64> {
    pub hidden: Vec<Dense<T>>,
    pub classifier: Dense<T>,
}

impl<T: Real> GeneratedLayers<T> {
    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn width(&self) -> usize {
        self.classifier.fan_in()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.fan_out()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.iter().map(Dense::zeros_like).collect(),
            classifier: self.classifier.zeros_like(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.hidden.iter().all(Dense::all_finite) && self.classifier.all_finite()
    }
}

/// `stages[0]` is the network input, `stages[1..L]` the hidden activations
/// after the residual join, `stages[L]` the logits. `pre[l]` is the
/// pre-ReLU value of hidden layer `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace<T: Real = f64> {
    pub stages: Vec<Matrix<T>>,
    pub pre: Vec<Matrix<T>>,
}

impl<T: Real> ActivationTrace<T> {
    pub fn logits(&self) -> &Matrix<T> {
        self.stages.last().expect("trace has at least the input stage")
    }

    /// Stages whose representations feed the nearest-neighbour biases.
    pub fn hidden_stages(&self) -> &[Matrix<T>] {
        &self.stages[..self.stages.len() - 1]
    }
}

/// One hidden layer. Returns `(pre_activation, output)`.
pub fn hidden_step<T: Real>(
    layer: &Dense<T>,
    a: &Matrix<T>,
    mode: ResidualMode,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let pre = layer.forward(a)?;
    let mut out = pre.clone();
    match mode {
        ResidualMode::PostActivation => {
            for (o, &x) in out.as_mut_slice().iter_mut().zip(a.as_slice()) {
                *o = o.max(T::zero()) + x;
            }
        }
        ResidualMode::PreActivation => {
            for (o, &x) in out.as_mut_slice().iter_mut().zip(a.as_slice()) {
                *o = (*o + x).max(T::zero());
            }
        }
        ResidualMode::None => {
            for o in out.as_mut_slice() {
                *o = o.max(T::zero());
            }
        }
    }
    Ok((pre, out))
}

/// Backward of [`hidden_step`]; accumulates into `grad` and returns `∂/∂a`.
pub fn hidden_step_backward<T: Real>(
    layer: &Dense<T>,
    a: &Matrix<T>,
    pre: &Matrix<T>,
    d_out: &Matrix<T>,
    mode: ResidualMode,
    grad: &mut Dense<T>,
) -> Result<Matrix<T>> {
    let mut d_pre = d_out.clone();
    let gate_on_sum = mode == ResidualMode::PreActivation;
    for ((d, &p), &x) in d_pre.as_mut_slice().iter_mut().zip(pre.as_slice()).zip(a.as_slice()) {
        let s = if gate_on_sum { p + x } else { p };
        if s <= T::zero() {
            *d = T::zero();
        }
    }
    let mut d_a = layer.backward(a, &d_pre, grad)?;
    match mode {
        ResidualMode::PostActivation => d_a.add_assign(d_out),
        ResidualMode::PreActivation => d_a.add_assign(&d_pre),
        ResidualMode::None => {}
    }
    Ok(d_a)
}

pub fn main_forward<T: Real>(
    layers: &GeneratedLayers<T>,
    z: &Matrix<T>,
    mode: ResidualMode,
) -> Result<ActivationTrace<T>> {
    if z.cols() != layers.width() {
        return Err(Error::Shape(format!(
            "main network expects width {}, got {}",
            layers.width(),
            z.cols()
        )));
    }
    let mut stages = vec![z.clone()];
    let mut pre = Vec::with_capacity(layers.hidden.len());
    for layer in &layers.hidden {
        let (p, out) = hidden_step(layer, stages.last().unwrap(), mode)?;
        pre.push(p);
        stages.push(out);
    }
    let logits = layers.classifier.forward(stages.last().unwrap())?;
    stages.push(logits);
    Ok(ActivationTrace { stages, pre })
}

/// Backward through the whole main network given `∂loss/∂logits`.
/// Accumulates into `grad` and returns `∂loss/∂input`.
pub fn main_backward<T: Real>(
    layers: &GeneratedLayers<T>,
    trace: &ActivationTrace<T>,
    d_logits: &Matrix<T>,
    mode: ResidualMode,
    grad: &mut GeneratedLayers<T>,
) -> Result<Matrix<T>> {
    let n_hidden = layers.hidden.len();
    let mut d = layers
        .classifier
        .backward(&trace.stages[n_hidden], d_logits, &mut grad.classifier)?;
    for l in (0..n_hidden).rev() {
        d = hidden_step_backward(
            &layers.hidden[l],
            &trace.stages[l],
            &trace.pre[l],
            &d,
            mode,
            &mut grad.hidden[l],
        )?;
    }
    Ok(d)
}

fn check_labels(n_rows: usize, n_classes: usize, y: &[usize]) -> Result<()> {
    if y.len() != n_rows {
        return Err(Error::Shape(format!("{} labels for {n_rows} rows", y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: n_classes,
        });
    }
    Ok(())
}

fn log_softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Mean negative log-likelihood of `y` under `softmax(logits)`.
pub fn cross_entropy<T: Real>(logits: &Matrix<T>, y: &[usize]) -> Result<T> {
    Ok(cross_entropy_with_grad(logits, y)?.0)
}

/// Loss and `∂loss/∂logits = (softmax − onehot) / n`.
pub fn cross_entropy_with_grad<T: Real>(logits: &Matrix<T>, y: &[usize]) -> Result<(T, Matrix<T>)> {
    let (n, c) = logits.shape();
    check_labels(n, c, y)?;
    let mut grad = Matrix::zeros(n, c);
    let mut loss = T::zero();
    let inv_n = T::one() / T::of(n.max(1) as f64);
    let mut logp = vec![T::zero(); c];
    for i in 0..n {
        log_softmax_row(logits.row(i), &mut logp);
        loss -= logp[y[i]];
        for (g, &lp) in grad.row_mut(i).iter_mut().zip(&logp) {
            *g = lp.exp() * inv_n;
        }
        grad.row_mut(i)[y[i]] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

pub fn softmax_proba<T: Real>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        log_softmax_row(logits.row(i), out.row_mut(i));
        for v in out.row_mut(i) {
            *v = v.exp();
        }
    }
    out
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layers_from(hidden: Vec<Dense>, classifier: Dense) -> GeneratedLayers {
        GeneratedLayers { hidden, classifier }
    }

    #[test]
    fn zero_weights_pass_through() {
        let layers = layers_from(vec![Dense::zeros(3, 3), Dense::zeros(3, 3)], Dense::zeros(3, 2));
        let z = Matrix::from_rows(&[vec![0.5, 0.0, 2.0], vec![1.0, 3.0, 0.25]]).unwrap();
        let trace = main_forward(&layers, &z, ResidualMode::PostActivation).unwrap();
        assert_eq!(trace.stages[1], z);
        assert_eq!(trace.stages[2], z);
        assert!(trace.logits().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(trace.logits().shape(), (2, 2));
    }

    #[test]
    fn single_unit_hand_evaluation() {
        let hidden = Dense {
            weight: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            bias: vec![0.0],
        };
        let layers = layers_from(vec![hidden], Dense::zeros(1, 1));
        let z = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let trace = main_forward(&layers, &z, ResidualMode::PostActivation).unwrap();
        assert_eq!(trace.stages[1].as_slice(), &[4.0]);
        assert!(main_forward(&layers, &Matrix::zeros(1, 2), ResidualMode::PostActivation).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Matrix::<f64>::zeros(1, 4);
        assert!((cross_entropy(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);

        let sure = Matrix::from_rows(&[vec![30.0, 0.0, 0.0]]).unwrap();
        assert!(cross_entropy(&sure, &[0]).unwrap() < 1e-9);

        let two = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.3, 0.9]]).unwrap();
        let a = cross_entropy(&Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap(), &[1]).unwrap();
        let b = cross_entropy(&Matrix::from_rows(&[vec![0.3, 0.9]]).unwrap(), &[0]).unwrap();
        assert!((cross_entropy(&two, &[1, 0]).unwrap() - (a + b) / 2.0f64).abs() < 1e-15);

        assert!(matches!(
            cross_entropy(&two, &[0, 2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn softmax_values() {
        let p = softmax_proba(&Matrix::<f64>::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert_eq!(p.row(0), &[0.5, 0.5]);
        let p = softmax_proba(&Matrix::from_rows(&[vec![1f64.ln(), 3f64.ln()]]).unwrap());
        assert!((p.get(0, 0) - 0.25).abs() < 1e-15 && (p.get(0, 1) - 0.75).abs() < 1e-15);
        let base = Matrix::<f64>::from_rows(&[vec![0.1, 2.0, -1.0]]).unwrap();
        let shifted = base.map(|v| v + 17.5);
        let (a, b) = (softmax_proba(&base), softmax_proba(&shifted));
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    fn buffers(l: &mut GeneratedLayers) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for d in l.hidden.iter_mut().chain(std::iter::once(&mut l.classifier)) {
            out.push(d.weight.as_mut_slice());
            out.push(d.bias.as_mut_slice());
        }
        out
    }

    fn loss_of(layers: &GeneratedLayers, z: &Matrix, y: &[usize], mode: ResidualMode) -> f64 {
        let trace = main_forward(layers, z, mode).unwrap();
        cross_entropy(trace.logits(), y).unwrap()
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mode in [ResidualMode::PostActivation, ResidualMode::PreActivation, ResidualMode::None] {
            let mut layers = layers_from(
                vec![Dense::uniform(3, 3, &mut rng), Dense::uniform(3, 3, &mut rng)],
                Dense::uniform(3, 2, &mut rng),
            );
            for l in &mut layers.hidden {
                l.bias = vec![0.1, -0.2, 0.3];
            }
            layers.classifier.bias = vec![0.05, -0.05];
            let z = Matrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
            let y = [0, 1, 1, 0];

            let trace = main_forward(&layers, &z, mode).unwrap();
            let (_, d_logits) = cross_entropy_with_grad(trace.logits(), &y).unwrap();
            let mut grad = layers.zeros_like();
            main_backward(&layers, &trace, &d_logits, mode, &mut grad).unwrap();

            let analytic: Vec<f64> = buffers(&mut grad).iter().flat_map(|b| b.to_vec()).collect();
            let h = 1e-6;
            let mut worst: f64 = 0.0;
            let mut flat = 0;
            let n_buffers = buffers(&mut layers.clone()).len();
            for b in 0..n_buffers {
                let len = buffers(&mut layers.clone())[b].len();
                for k in 0..len {
                    let mut plus = layers.clone();
                    buffers(&mut plus)[b][k] += h;
                    let mut minus = layers.clone();
                    buffers(&mut minus)[b][k] -= h;
                    let numeric =
                        (loss_of(&plus, &z, &y, mode) - loss_of(&minus, &z, &y, mode)) / (2.0 * h);
                    let a = analytic[flat];
                    let denom = numeric.abs().max(a.abs()).max(1e-8);
                    worst = worst.max((numeric - a).abs() / denom);
                    flat += 1;
                }
            }
            assert!(worst < 1e-5, "{mode:?}: relative error {worst}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
                let m = Matrix::from_vec(1, vals.len(), vals).unwrap();
                let p = softmax_proba(&m);
                prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }

            #[test]
            fn loss_ignores_row_order(
                vals in proptest::collection::vec(-5.0f64..5.0, 12),
                labels in proptest::collection::vec(0usize..3, 4),
            ) {
                let m = Matrix::from_vec(4, 3, vals).unwrap();
                let rev: Vec<usize> = (0..4).rev().collect();
                let yr: Vec<usize> = rev.iter().map(|&i| labels[i]).collect();
                let a = cross_entropy(&m, &labels).unwrap();
                let b = cross_entropy(&m.select_rows(&rev), &yr).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }

            #[test]
            fn zero_hidden_layers_are_exact_identity(
                vals in proptest::collection::vec(0.0f64..10.0, 8),
            ) {
                let z = Matrix::from_vec(2, 4, vals).unwrap();
                let layers = GeneratedLayers { hidden: vec![Dense::zeros(4, 4); 2], classifier: Dense::zeros(4, 3) };
                for mode in [ResidualMode::PostActivation, ResidualMode::PreActivation] {
                    let trace = main_forward(&layers, &z, mode).unwrap();
                    prop_assert_eq!(&trace.stages[2], &z);
                }
            }
        }
    }
}
