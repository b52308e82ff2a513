//! Using a trained hypernetwork on a new dataset: soft-voting ensembles of
//! generated networks, optional fine-tuning of each generated network, and
//! feature bagging for very wide inputs.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::data::{stratified_indices, DesignMatrix};
use crate::error::{Error, Result};
use crate::hypernet::{generate_network, nearest_anchors, GeneratedNetwork, HyperNetConfig, HyperNetParams};
use crate::linalg::{quantize_f32, relu, Matrix};
use crate::mainnet::{cross_entropy_with_grad, main_backward, main_forward, softmax_proba, GeneratedLayers};
use crate::meta::stream_rng;
use crate::optim::{AdamW, AdamWConfig, Plateau};
use crate::transform::{InputMap, TransformState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Optimization {
    #[default]
    None,
    /// Fine-tune the first member only.
    Optimize,
    /// Fine-tune every member.
    EnsembleOptimize,
}

impl Optimization {
    pub fn as_str(self) -> &'static str {
        match self {
            Optimization::None => "none",
            Optimization::Optimize => "optimize",
            Optimization::EnsembleOptimize => "ensemble_optimize",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Optimization::None),
            "optimize" => Ok(Optimization::Optimize),
            "ensemble_optimize" => Ok(Optimization::EnsembleOptimize),
            other => Err(Error::Config(format!("unknown optimization mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub n_ensemble: usize,
    pub batch_size: usize,
    pub nn_bias: bool,
    pub optimization: Optimization,
    pub optimize_steps: usize,
    pub ft_learning_rate: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Columns kept per member; 0 keeps all.
    pub feature_bag_width: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_ensemble: 1,
            batch_size: 2048,
            nn_bias: true,
            optimization: Optimization::None,
            optimize_steps: 128,
            ft_learning_rate: 1e-4,
            plateau_factor: 0.1,
            plateau_patience: 10,
            feature_bag_width: 0,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ensemble == 0 {
            return Err(Error::Config("n_ensemble must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.optimization != Optimization::None && self.optimize_steps == 0 {
            return Err(Error::Config("optimize_steps must be positive when fine-tuning".into()));
        }
        if !(self.ft_learning_rate > 0.0) {
            return Err(Error::Config("ft_learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One generated network, optionally restricted to a column subset.
#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub features: Option<Vec<usize>>,
    pub net: GeneratedNetwork,
    /// Fine-tuning hit a non-finite loss and the member was restored.
    pub fine_tune_reverted: bool,
}

impl Member {
    fn view(&self, x: &Matrix<f64>) -> Matrix<f64> {
        match &self.features {
            Some(cols) => x.select_cols(cols),
            None => x.clone(),
        }
    }

    /// Probabilities over all `n_classes` dataset classes.
    pub fn predict_proba(&self, x: &Matrix<f64>, n_classes: usize) -> Result<Matrix<f64>> {
        let local = softmax_proba(&self.net.predict_logits(&self.view(x))?);
        let mut out = Matrix::zeros(x.rows(), n_classes);
        for i in 0..x.rows() {
            for (k, &c) in self.net.class_map.iter().enumerate() {
                out.set(i, c, local.get(i, k));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedModel {
    pub d_in: usize,
    pub n_classes: usize,
    pub members: Vec<Member>,
}

impl FittedModel {
    pub fn warnings(&self) -> Vec<String> {
        self.members
            .iter()
            .enumerate()
            .filter(|(_, m)| m.fine_tune_reverted)
            .map(|(i, _)| format!("member {i}: fine-tuning diverged, kept the generated weights"))
            .collect()
    }
}

pub fn fit(
    train: &DesignMatrix,
    params: &HyperNetParams<f64>,
    hcfg: &HyperNetConfig,
    cfg: &InferenceConfig,
) -> Result<FittedModel> {
    cfg.validate()?;
    if train.n_rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let n_classes = train.n_classes();
    if n_classes > hcfg.max_classes {
        return Err(Error::TooManyClasses {
            found: n_classes,
            max: hcfg.max_classes,
        });
    }
    let build = |m: usize| fit_member(train, params, hcfg, cfg, m);
    #[cfg(feature = "parallel")]
    let members = {
        use rayon::prelude::*;
        (0..cfg.n_ensemble).into_par_iter().map(build).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let members = (0..cfg.n_ensemble).map(build).collect::<Result<Vec<_>>>()?;
    Ok(FittedModel {
        d_in: train.d_in(),
        n_classes,
        members,
    })
}

fn fit_member(
    train: &DesignMatrix,
    params: &HyperNetParams<f64>,
    hcfg: &HyperNetConfig,
    cfg: &InferenceConfig,
    m: usize,
) -> Result<Member> {
    let mut rng = stream_rng(cfg.seed, m as u64);
    let features = (cfg.feature_bag_width > 0 && cfg.feature_bag_width < train.d_in())
        .then(|| feature_bag(train, cfg.feature_bag_width, &mut rng))
        .transpose()?;
    let data = match &features {
        Some(cols) => train.select_cols(cols),
        None => train.clone(),
    };
    let rows = stratified_indices(&data.y, cfg.batch_size.min(hcfg.max_support), 2, &mut rng)?;
    let mut net = generate_network(&data.select_rows(&rows), params, hcfg, &mut rng)?;
    net.use_nn_bias = cfg.nn_bias;
    quantize_network(&mut net);
    let tune = match cfg.optimization {
        Optimization::None => false,
        Optimization::Optimize => m == 0,
        Optimization::EnsembleOptimize => true,
    };
    let mut reverted = false;
    if tune {
        let report = fine_tune(&net, &data, cfg, &mut rng)?;
        reverted = report.reverted;
        net = report.net;
    }
    Ok(Member {
        features,
        net,
        fine_tune_reverted: reverted,
    })
}

/// Soft vote: mean of member probabilities, summed in sorted order so the
/// result does not depend on member order.
pub fn predict_proba(model: &FittedModel, x: &Matrix<f64>) -> Result<Matrix<f64>> {
    if x.cols() != model.d_in {
        return Err(Error::Shape(format!(
            "model expects {} features, got {}",
            model.d_in,
            x.cols()
        )));
    }
    let per_member = model
        .members
        .iter()
        .map(|m| m.predict_proba(x, model.n_classes))
        .collect::<Result<Vec<_>>>()?;
    let k = per_member.len() as f64;
    let mut cell = Vec::with_capacity(per_member.len());
    Ok(Matrix::from_fn(x.rows(), model.n_classes, |i, c| {
        cell.clear();
        cell.extend(per_member.iter().map(|p| p.get(i, c)));
        cell.sort_by(f64::total_cmp);
        cell.iter().sum::<f64>() / k
    }))
}

pub fn predict(model: &FittedModel, x: &Matrix<f64>) -> Result<Vec<usize>> {
    let p = predict_proba(model, x)?;
    Ok((0..p.rows()).map(|i| crate::mainnet::argmax(p.row(i))).collect())
}

/// Column subset of size `width`, drawn without replacement with probability
/// proportional to each column's standard deviation. Constant columns are
/// never drawn; if too few columns vary the draw is uniform.
pub fn feature_bag<R: Rng + ?Sized>(train: &DesignMatrix, width: usize, rng: &mut R) -> Result<Vec<usize>> {
    let d = train.d_in();
    if width == 0 || width > d {
        return Err(Error::Config(format!("feature bag width {width} not in 1..={d}")));
    }
    let mut weights = train.column_stds();
    let varying = weights.iter().filter(|&&w| w > 0.0).count();
    let mut chosen = if width > varying {
        index::sample(rng, d, width).into_vec()
    } else {
        let mut chosen = Vec::with_capacity(width);
        for _ in 0..width {
            let total: f64 = weights.iter().sum();
            let mut r = rng.random::<f64>() * total;
            let mut pick = None;
            for (j, &w) in weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(j);
                if r < w {
                    break;
                }
                r -= w;
            }
            let j = pick.expect("a positive weight remains");
            weights[j] = 0.0;
            chosen.push(j);
        }
        chosen
    };
    chosen.sort_unstable();
    Ok(chosen)
}

/// Macro-averaged recall over the classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} labels against {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut hits = std::collections::BTreeMap::<usize, (usize, usize)>::new();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        let e = hits.entry(t).or_default();
        e.1 += 1;
        if t == p {
            e.0 += 1;
        }
    }
    let sum: f64 = hits.values().map(|&(h, n)| h as f64 / n as f64).sum();
    Ok(sum / hits.len() as f64)
}

/// Round every stored value of a generated network to `f32` precision, so
/// saving and reloading changes nothing.
pub fn quantize_network(net: &mut GeneratedNetwork) {
    if let InputMap::RfPca(t) = &mut net.input_map {
        quantize_f32(t.rf.weight.as_mut_slice());
        quantize_f32(&mut t.pca.mean);
        quantize_f32(t.pca.components.as_mut_slice());
        quantize_f32(&mut t.pca.sigma);
        t.clip_sigma = t.clip_sigma as f32 as f64;
    }
    for d in net.layers.hidden.iter_mut().chain(std::iter::once(&mut net.layers.classifier)) {
        quantize_f32(d.weight.as_mut_slice());
        quantize_f32(&mut d.bias);
    }
    for st in &mut net.anchor_stages {
        quantize_f32(st.anchors.as_mut_slice());
    }
    quantize_f32(&mut net.nn_bias);
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct FineTuneReport {
    pub net: GeneratedNetwork,
    /// Full-data loss before and after; equal when no steps ran.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub batch_losses: Vec<f64>,
    pub final_lr: f64,
    pub reverted: bool,
}

/// Gradient of the loss with respect to the tunable tensors of a generated
/// network: the random-feature matrix, PCA mean and components (when the
/// input map has them) and every main-network layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TunableGrads {
    pub transform: Option<(Matrix<f64>, Vec<f64>, Matrix<f64>)>,
    pub layers: GeneratedLayers<f64>,
}

impl TunableGrads {
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some((w, mean, comp)) = &self.transform {
            out.extend([w.as_slice(), mean.as_slice(), comp.as_slice()]);
        }
        for d in self.layers.hidden.iter().chain(std::iter::once(&self.layers.classifier)) {
            out.push(d.weight.as_slice());
            out.push(&d.bias);
        }
        out
    }
}

/// Mutable views of the tunable tensors, same order as
/// [`TunableGrads::buffers`].
pub fn tunable_buffers_mut(net: &mut GeneratedNetwork) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    if let InputMap::RfPca(t) = &mut net.input_map {
        out.push(t.rf.weight.as_mut_slice());
        out.push(&mut t.pca.mean);
        out.push(t.pca.components.as_mut_slice());
    }
    for d in net.layers.hidden.iter_mut().chain(std::iter::once(&mut net.layers.classifier)) {
        out.push(d.weight.as_mut_slice());
        out.push(&mut d.bias);
    }
    out
}

struct TransformTrace {
    pre_rf: Matrix<f64>,
    centered: Matrix<f64>,
    projected: Matrix<f64>,
}

fn transform_forward(t: &TransformState, x: &Matrix<f64>) -> Result<(Matrix<f64>, TransformTrace)> {
    let pre_rf = x.matmul(&t.rf.weight)?;
    let mut centered = pre_rf.map(relu);
    let neg: Vec<f64> = t.pca.mean.iter().map(|m| -m).collect();
    centered.add_row_vector(&neg);
    let projected = centered.matmul(&t.pca.components)?;
    let bounds = t.clip_bounds();
    let mut z = projected.clone();
    for i in 0..z.rows() {
        for (v, &b) in z.row_mut(i).iter_mut().zip(&bounds) {
            *v = v.clamp(-b, b);
        }
    }
    Ok((
        z,
        TransformTrace {
            pre_rf,
            centered,
            projected,
        },
    ))
}

/// Cross-entropy of `net` on `(x, y)` with `y` in the network's local class
/// indices, and its gradient with respect to every tunable tensor. The
/// nearest-neighbour terms enter the loss but are frozen.
pub fn tunable_loss_and_grads(net: &GeneratedNetwork, x: &Matrix<f64>, y: &[usize]) -> Result<(f64, TunableGrads)> {
    let (z, tt) = match &net.input_map {
        InputMap::RfPca(t) => {
            let (z, tt) = transform_forward(t, x)?;
            (z, Some(tt))
        }
        pad => (pad.apply(x)?, None),
    };
    let trace = main_forward(&net.layers, &z, net.residual)?;
    let mut logits = trace.logits().clone();
    if net.use_nn_bias {
        for st in &net.anchor_stages {
            let nearest = nearest_anchors(&trace.hidden_stages()[st.stage], &st.anchors)?;
            for (i, a) in nearest.into_iter().enumerate() {
                let c = net.anchor_labels[a];
                logits.set(i, c, logits.get(i, c) + net.nn_bias[st.stage]);
            }
        }
    }
    let (loss, d_logits) = cross_entropy_with_grad(&logits, y)?;
    let mut layers = net.layers.zeros_like();
    let d_z = main_backward(&net.layers, &trace, &d_logits, net.residual, &mut layers)?;
    let transform = match (&net.input_map, tt) {
        (InputMap::RfPca(t), Some(tt)) => {
            let bounds = t.clip_bounds();
            let mut d_proj = d_z;
            for i in 0..d_proj.rows() {
                for (j, g) in d_proj.row_mut(i).iter_mut().enumerate() {
                    if tt.projected.get(i, j).abs() >= bounds[j] {
                        *g = 0.0;
                    }
                }
            }
            let d_comp = tt.centered.t_matmul(&d_proj)?;
            let mut d_feat = d_proj.matmul_t(&t.pca.components)?;
            let d_mean: Vec<f64> = d_feat.col_sums().into_iter().map(|v| -v).collect();
            for (g, &h) in d_feat.as_mut_slice().iter_mut().zip(tt.pre_rf.as_slice()) {
                if h <= 0.0 {
                    *g = 0.0;
                }
            }
            let d_w = x.t_matmul(&d_feat)?;
            Some((d_w, d_mean, d_comp))
        }
        _ => None,
    };
    Ok((loss, TunableGrads { transform, layers }))
}

/// Loss only; see [`tunable_loss_and_grads`].
pub fn tunable_loss(net: &GeneratedNetwork, x: &Matrix<f64>, y: &[usize]) -> Result<f64> {
    Ok(tunable_loss_and_grads(net, x, y)?.0)
}

/// Rows of `data` whose class the network knows, relabeled to its local
/// class indices.
fn local_rows(net: &GeneratedNetwork, data: &DesignMatrix) -> (Matrix<f64>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (i, c) in data.y.iter().enumerate() {
        if let Ok(k) = net.class_map.binary_search(c) {
            rows.push(i);
            y.push(k);
        }
    }
    (data.x.select_rows(&rows), y)
}

/// AdamW on shuffled batches of `data`, dropping the learning rate on
/// plateaus. A non-finite loss restores the original network.
pub fn fine_tune<R: Rng + ?Sized>(
    net: &GeneratedNetwork,
    data: &DesignMatrix,
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<FineTuneReport> {
    let (x, y) = local_rows(net, data);
    let initial_loss = tunable_loss(net, &x, &y)?;
    let mut tuned = net.clone();
    let sizes: Vec<usize> = tunable_buffers_mut(&mut tuned).iter().map(|b| b.len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.ft_learning_rate,
            ..AdamWConfig::default()
        },
        &sizes,
    );
    let mut plateau = Plateau::new(cfg.plateau_factor, cfg.plateau_patience);
    let batch = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut cursor = order.len();
    let mut batch_losses = Vec::with_capacity(cfg.optimize_steps);
    let reverted = |lr| FineTuneReport {
        net: net.clone(),
        initial_loss,
        final_loss: initial_loss,
        batch_losses: Vec::new(),
        final_lr: lr,
        reverted: true,
    };
    if !initial_loss.is_finite() {
        return Ok(reverted(cfg.ft_learning_rate));
    }
    for _ in 0..cfg.optimize_steps {
        if cursor >= order.len() {
            order.shuffle(rng);
            cursor = 0;
        }
        let end = (cursor + batch).min(order.len());
        let rows = &order[cursor..end];
        cursor = end;
        let bx = x.select_rows(rows);
        let by: Vec<usize> = rows.iter().map(|&i| y[i]).collect();
        let (loss, grads) = tunable_loss_and_grads(&tuned, &bx, &by)?;
        if !loss.is_finite() {
            return Ok(reverted(opt.cfg.lr));
        }
        batch_losses.push(loss);
        opt.update(tunable_buffers_mut(&mut tuned), grads.buffers());
        opt.cfg.lr = plateau.observe(loss, opt.cfg.lr);
    }
    if cfg.optimize_steps > 0 {
        quantize_network(&mut tuned);
    }
    let final_loss = tunable_loss(&tuned, &x, &y)?;
    if !final_loss.is_finite() {
        return Ok(reverted(opt.cfg.lr));
    }
    Ok(FineTuneReport {
        net: tuned,
        initial_loss,
        final_loss,
        batch_losses,
        final_lr: opt.cfg.lr,
        reverted: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{blob_dataset, BlobSpec};
    use proptest::prelude::*;

    fn params(cfg: &HyperNetConfig) -> HyperNetParams<f64> {
        let mut p = HyperNetParams::init(cfg, &mut stream_rng(11, 0));
        p.quantize_f32();
        p
    }

    fn blobs(seed: u64) -> (DesignMatrix, DesignMatrix) {
        let d = blob_dataset("b", &BlobSpec::default(), &mut stream_rng(seed, 0)).unwrap();
        (d.train, d.test)
    }

    fn confusion_oracle(t: &[usize], p: &[usize]) -> f64 {
        let k = t.iter().chain(p).max().unwrap() + 1;
        let mut m = vec![vec![0usize; k]; k];
        for (&a, &b) in t.iter().zip(p) {
            m[a][b] += 1;
        }
        let recalls: Vec<f64> = (0..k)
            .filter(|&c| m[c].iter().sum::<usize>() > 0)
            .map(|c| m[c][c] as f64 / m[c].iter().sum::<usize>() as f64)
            .collect();
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert_eq!(balanced_accuracy(&[0, 0, 0, 1], &[0, 0, 0, 0]).unwrap(), 0.5);
        assert_eq!(balanced_accuracy(&[2, 0, 1], &[2, 0, 1]).unwrap(), 1.0);
        assert!(balanced_accuracy(&[], &[]).is_err());
        assert!(balanced_accuracy(&[0], &[0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn balanced_accuracy_matches_confusion_matrix(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)
        ) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let got = balanced_accuracy(&t, &p).unwrap();
            prop_assert!((got - confusion_oracle(&t, &p)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&got));
        }
    }

    fn columns_with_stds(stds: &[f64], n: usize) -> DesignMatrix {
        // Alternating ±s gives population std exactly s.
        let x = Matrix::from_fn(n, stds.len(), |i, j| if i % 2 == 0 { stds[j] } else { -stds[j] });
        DesignMatrix::new(x, (0..n).map(|i| i % 2).collect()).unwrap()
    }

    #[test]
    fn feature_bag_skips_constant_columns() {
        let data = columns_with_stds(&[0.0, 1.0, 1.0], 10);
        for s in 0..20 {
            assert_eq!(feature_bag(&data, 2, &mut stream_rng(s, 0)).unwrap(), vec![1, 2]);
        }
    }

    #[test]
    fn feature_bag_draws_proportionally_to_std() {
        let data = columns_with_stds(&[1.0, 3.0], 10);
        let mut rng = stream_rng(5, 0);
        let n = 20_000;
        let hits = (0..n)
            .filter(|_| feature_bag(&data, 1, &mut rng).unwrap() == vec![1])
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.02, "{freq}");
    }

    #[test]
    fn feature_bag_full_width_keeps_everything() {
        let data = columns_with_stds(&[0.5, 0.0, 2.0, 1.0], 8);
        let got = feature_bag(&data, 4, &mut stream_rng(0, 0)).unwrap();
        assert_eq!(got, vec![0, 1, 2, 3]);
        assert!(feature_bag(&data, 5, &mut stream_rng(0, 0)).is_err());
    }

    #[test]
    fn balanced_accuracy_worked_examples() {
        // Recalls 1/2, 2/2 and 0/1.
        assert_eq!(balanced_accuracy(&[0, 0, 1, 1, 2], &[0, 1, 1, 1, 0]).unwrap(), 0.5);
        let truth: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        assert_eq!(balanced_accuracy(&truth, &[0; 100]).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn balanced_accuracy_ignores_class_names(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
            shift in 1usize..4,
        ) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let rename = |c: &usize| (c + shift) % 4;
            let t2: Vec<_> = t.iter().map(rename).collect();
            let p2: Vec<_> = p.iter().map(rename).collect();
            prop_assert!((balanced_accuracy(&t, &p).unwrap() - balanced_accuracy(&t2, &p2).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_bag_falls_back_to_uniform() {
        let data = columns_with_stds(&[0.0, 0.0, 1.0], 10);
        let mut seen = [0usize; 3];
        for s in 0..300 {
            let got = feature_bag(&data, 2, &mut stream_rng(s, 0)).unwrap();
            assert_eq!(got.len(), 2);
            assert!(got[0] < got[1]);
            for j in got {
                seen[j] += 1;
            }
        }
        // Each column is kept with probability 2/3.
        for n in seen {
            assert!((n as f64 / 300.0 - 2.0 / 3.0).abs() < 0.1, "{seen:?}");
        }
    }

    #[test]
    fn opposite_confident_members_average_to_one_half() {
        let cfg = HyperNetConfig::tiny();
        let (train, test) = blobs(6);
        let mut model = fit(&train, &params(&cfg), &cfg, &InferenceConfig::default()).unwrap();
        let mut first = model.members[0].clone();
        first.net.use_nn_bias = false;
        let w = &first.net.layers.classifier.weight;
        first.net.layers.classifier.weight = Matrix::zeros(w.rows(), w.cols());
        let mut second = first.clone();
        first.net.layers.classifier.bias = vec![30.0, -30.0];
        second.net.layers.classifier.bias = vec![-30.0, 30.0];
        let one = first.predict_proba(&test.x, 2).unwrap();
        assert!((one.get(0, 0) - 1.0).abs() < 1e-12);
        model.members = vec![first, second];
        let p = predict_proba(&model, &test.x).unwrap();
        for v in p.as_slice() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn predictions_are_the_argmax_of_probabilities() {
        let cfg = HyperNetConfig::tiny();
        let (train, test) = blobs(7);
        let model = fit(&train, &params(&cfg), &cfg, &InferenceConfig::default()).unwrap();
        let p = predict_proba(&model, &test.x).unwrap();
        let labels = predict(&model, &test.x).unwrap();
        let logits = model.members[0].net.predict_logits(&test.x).unwrap();
        for (i, &c) in labels.iter().enumerate() {
            assert!(p.row(i).iter().all(|&v| v <= p.get(i, c)));
            assert_eq!(crate::mainnet::argmax(logits.row(i)), c);
        }
    }

    #[test]
    fn soft_vote_is_the_member_mean() {
        let cfg = HyperNetConfig::tiny();
        let (train, test) = blobs(1);
        let icfg = InferenceConfig {
            n_ensemble: 3,
            batch_size: 40,
            ..InferenceConfig::default()
        };
        let model = fit(&train, &params(&cfg), &cfg, &icfg).unwrap();
        let p = predict_proba(&model, &test.x).unwrap();
        let each: Vec<Matrix<f64>> = model
            .members
            .iter()
            .map(|m| m.predict_proba(&test.x, model.n_classes).unwrap())
            .collect();
        for i in 0..test.x.rows() {
            let row: f64 = p.row(i).iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
            for c in 0..model.n_classes {
                let mean = each.iter().map(|m| m.get(i, c)).sum::<f64>() / 3.0;
                assert!((p.get(i, c) - mean).abs() < 1e-15);
            }
        }
        let mut reversed = model.clone();
        reversed.members.reverse();
        assert_eq!(predict_proba(&reversed, &test.x).unwrap(), p);
    }

    #[test]
    fn duplicated_members_change_nothing() {
        let cfg = HyperNetConfig::tiny();
        let (train, test) = blobs(2);
        let model = fit(&train, &params(&cfg), &cfg, &InferenceConfig::default()).unwrap();
        let mut doubled = model.clone();
        doubled.members.push(model.members[0].clone());
        let a = predict_proba(&model, &test.x).unwrap();
        let b = predict_proba(&doubled, &test.x).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn fitting_is_deterministic_per_seed() {
        let cfg = HyperNetConfig::tiny();
        let (train, _) = blobs(3);
        let p = params(&cfg);
        let icfg = InferenceConfig {
            n_ensemble: 2,
            batch_size: 30,
            ..InferenceConfig::default()
        };
        let a = fit(&train, &p, &cfg, &icfg).unwrap();
        assert_eq!(a, fit(&train, &p, &cfg, &icfg).unwrap());
        let other = fit(&train, &p, &cfg, &InferenceConfig { seed: 1, ..icfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn optimize_tunes_only_the_first_member() {
        let cfg = HyperNetConfig::tiny();
        let (train, _) = blobs(4);
        let p = params(&cfg);
        let base = InferenceConfig {
            n_ensemble: 3,
            batch_size: 64,
            optimize_steps: 5,
            ..InferenceConfig::default()
        };
        let plain = fit(&train, &p, &cfg, &base).unwrap();
        let one = fit(&train, &p, &cfg, &InferenceConfig { optimization: Optimization::Optimize, ..base }).unwrap();
        let all = fit(
            &train,
            &p,
            &cfg,
            &InferenceConfig {
                optimization: Optimization::EnsembleOptimize,
                ..base
            },
        )
        .unwrap();
        assert_ne!(one.members[0], plain.members[0]);
        assert_eq!(one.members[1..], plain.members[1..]);
        assert_eq!(all.members[0], one.members[0]);
        assert!(all.members[1..].iter().zip(&plain.members[1..]).all(|(a, b)| a != b));
    }

    #[test]
    fn zero_steps_are_rejected_when_fine_tuning() {
        let cfg = InferenceConfig {
            optimization: Optimization::Optimize,
            optimize_steps: 0,
            ..InferenceConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(InferenceConfig { optimize_steps: 0, ..InferenceConfig::default() }.validate().is_ok());
    }

    fn one_network(seed: u64) -> (GeneratedNetwork, DesignMatrix) {
        let cfg = HyperNetConfig::tiny();
        let (train, _) = blobs(seed);
        let mut net = generate_network(&train, &params(&cfg), &cfg, &mut stream_rng(seed, 1)).unwrap();
        quantize_network(&mut net);
        (net, train)
    }

    #[test]
    fn fine_tune_gradients_match_finite_differences() {
        let (net, data) = one_network(5);
        let (x, y) = local_rows(&net, &data);
        let (_, grads) = tunable_loss_and_grads(&net, &x, &y).unwrap();
        let analytic: Vec<Vec<f64>> = grads.buffers().iter().map(|b| b.to_vec()).collect();
        let h = 1e-6;
        let mut probe = net.clone();
        let sizes: Vec<usize> = tunable_buffers_mut(&mut probe).iter().map(|b| b.len()).collect();
        let mut worst: f64 = 0.0;
        let scale = analytic.iter().flatten().fold(0.0f64, |a, &g| a.max(g.abs()));
        for (t, &n) in sizes.iter().enumerate() {
            for i in (0..n).step_by((n / 7).max(1)) {
                let orig = tunable_buffers_mut(&mut probe)[t][i];
                tunable_buffers_mut(&mut probe)[t][i] = orig + h;
                let up = tunable_loss(&probe, &x, &y).unwrap();
                tunable_buffers_mut(&mut probe)[t][i] = orig - h;
                let down = tunable_loss(&probe, &x, &y).unwrap();
                tunable_buffers_mut(&mut probe)[t][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = (numeric - analytic[t][i]).abs() / numeric.abs().max(1e-3 * scale);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn fine_tuning_lowers_training_loss() {
        let (net, data) = one_network(6);
        let cfg = InferenceConfig {
            optimize_steps: 30,
            batch_size: 64,
            ft_learning_rate: 1e-3,
            ..InferenceConfig::default()
        };
        let r = fine_tune(&net, &data, &cfg, &mut stream_rng(0, 0)).unwrap();
        assert!(!r.reverted);
        assert_eq!(r.batch_losses.len(), 30);
        assert!(r.final_loss < r.initial_loss, "{} -> {}", r.initial_loss, r.final_loss);
        // Frozen parts stay put.
        assert_eq!(r.net.nn_bias, net.nn_bias);
        assert_eq!(r.net.anchor_stages, net.anchor_stages);
        if let (InputMap::RfPca(a), InputMap::RfPca(b)) = (&r.net.input_map, &net.input_map) {
            assert_eq!(a.pca.sigma, b.pca.sigma);
        }
    }

    #[test]
    fn non_finite_loss_restores_the_network() {
        let (mut net, data) = one_network(7);
        net.layers.classifier.weight.as_mut_slice()[0] = f64::NAN;
        let cfg = InferenceConfig {
            optimize_steps: 3,
            ..InferenceConfig::default()
        };
        let r = fine_tune(&net, &data, &cfg, &mut stream_rng(0, 0)).unwrap();
        assert!(r.reverted);
        assert!(r.net.layers.classifier.weight.as_slice()[0].is_nan());
        assert_eq!(r.net.layers.hidden, net.layers.hidden);
    }

    #[test]
    fn learning_rate_drops_on_a_flat_loss() {
        let (net, data) = one_network(8);
        // A vanishing learning rate keeps the loss flat, so the plateau rule
        // fires after every `patience` steps.
        let cfg = InferenceConfig {
            optimize_steps: 25,
            ft_learning_rate: 1e-300,
            batch_size: 4096,
            ..InferenceConfig::default()
        };
        let r = fine_tune(&net, &data, &cfg, &mut stream_rng(0, 0)).unwrap();
        assert!((r.final_lr / 1e-302 - 1.0).abs() < 1e-9, "{}", r.final_lr);
    }
}
