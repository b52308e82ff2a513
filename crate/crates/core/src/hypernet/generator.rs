//! Layer-by-layer weight generation and its reverse-mode gradient.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use super::params::Slot;
use super::{HyperNetConfig, HyperNetParams};
use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix, Real};
use crate::mainnet::{
    cross_entropy_with_grad, hidden_step, hidden_step_backward, main_backward, main_forward, Dense,
    GeneratedLayers,
};
use crate::transform::{InputMap, TransformState};

/// `[repr_i ‖ onehot(y_i) ‖ mean(pca) ‖ mean(pca | class y_i)]` per row.
///
/// `y` holds task-local class indices; the one-hot part is zero-padded to
/// `max_classes`. With `concat_pca` off the two mean segments are zeros.
pub fn build_module_input<T: Real>(
    reprs: &Matrix<T>,
    y: &[usize],
    pca_proj: &Matrix<T>,
    max_classes: usize,
    concat_pca: bool,
) -> Result<Matrix<T>> {
    let (n, p) = reprs.shape();
    if pca_proj.rows() != n || y.len() != n {
        return Err(Error::Shape(format!(
            "module input rows disagree: reprs {n}, labels {}, pca {}",
            y.len(),
            pca_proj.rows()
        )));
    }
    if pca_proj.cols() != p {
        return Err(Error::Shape(format!(
            "PCA projection width {} differs from representation width {p}",
            pca_proj.cols()
        )));
    }
    if let Some(&c) = y.iter().find(|&&c| c >= max_classes) {
        return Err(Error::TooManyClasses {
            found: c + 1,
            max: max_classes,
        });
    }
    let width = 3 * p + max_classes;
    let mut out = Matrix::zeros(n, width);
    let (global, class_means) = if concat_pca {
        (pca_proj.sorted_col_means(), class_means(pca_proj, y))
    } else {
        (vec![T::zero(); p], BTreeMap::new())
    };
    for i in 0..n {
        let row = out.row_mut(i);
        row[..p].copy_from_slice(reprs.row(i));
        row[p + y[i]] = T::one();
        let base = p + max_classes;
        row[base..base + p].copy_from_slice(&global);
        if let Some(cm) = class_means.get(&y[i]) {
            row[base + p..base + 2 * p].copy_from_slice(cm);
        }
    }
    Ok(out)
}

/// Sorted-order mean of the rows of `m` belonging to each class of `y`.
fn class_means<T: Real>(m: &Matrix<T>, y: &[usize]) -> BTreeMap<usize, Vec<T>> {
    let mut rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in y.iter().enumerate() {
        rows.entry(c).or_default().push(i);
    }
    rows.into_iter()
        .map(|(c, idx)| (c, m.select_rows(&idx).sorted_col_means()))
        .collect()
}

/// Cached activations of one module MLP, for the backward pass.
pub(crate) struct ModuleCache<T: Real> {
    /// `(layer input, pre-activation)` per dense layer.
    steps: Vec<(Matrix<T>, Matrix<T>)>,
}

fn module_slots(cfg: &HyperNetConfig, l: usize) -> Vec<(Slot, bool)> {
    let mut slots = vec![(Slot::InputProj(l), true)];
    let classifier = l + 1 == cfg.n_layers;
    for k in 0..cfg.trunk_depth {
        let s = if classifier && !cfg.classifier_shares_trunk {
            Slot::ClassifierTrunk(k)
        } else {
            Slot::Trunk(k)
        };
        slots.push((s, true));
    }
    slots.push((Slot::Head(l), false));
    slots
}

pub(crate) fn module_forward<T: Real>(
    params: &HyperNetParams<T>,
    cfg: &HyperNetConfig,
    l: usize,
    input: &Matrix<T>,
) -> Result<(Matrix<T>, ModuleCache<T>)> {
    let mut x = input.clone();
    let mut steps = Vec::new();
    for (slot, relu) in module_slots(cfg, l) {
        let pre = params.slot(slot).forward(&x)?;
        let out = if relu { pre.map(|v| v.max(T::zero())) } else { pre.clone() };
        steps.push((x, pre));
        x = out;
    }
    Ok((x, ModuleCache { steps }))
}

pub(crate) fn module_backward<T: Real>(
    params: &HyperNetParams<T>,
    cfg: &HyperNetConfig,
    l: usize,
    cache: &ModuleCache<T>,
    d_out: &Matrix<T>,
    grads: &mut HyperNetParams<T>,
) -> Result<Matrix<T>> {
    let mut d = d_out.clone();
    for ((slot, relu), (x, pre)) in module_slots(cfg, l).into_iter().zip(&cache.steps).rev() {
        if relu {
            for (g, &p) in d.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if p <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        d = params.slot(slot).backward(x, &d, grads.slot_mut(slot))?;
    }
    Ok(d)
}

fn mean_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    Matrix::from_vec(1, m.cols(), m.sorted_col_means()).expect("row vector")
}

fn reshape_layer<T: Real>(flat: &[T], p: usize) -> Dense<T> {
    Dense {
        weight: Matrix::from_vec(p, p, flat[..p * p].to_vec()).expect("p*p weights"),
        bias: flat[p * p..].to_vec(),
    }
}

/// Weights of hidden layer `l` (0-based) from its module input: per-row
/// embeddings, mean pooled, then mapped to a flat `W ‖ b` by the emitter.
pub fn generate_layer<T: Real>(
    params: &HyperNetParams<T>,
    cfg: &HyperNetConfig,
    l: usize,
    module_input: &Matrix<T>,
) -> Result<Dense<T>> {
    if l + 1 >= cfg.n_layers {
        return Err(Error::Config(format!(
            "layer {l} is not a hidden layer of a {}-layer network",
            cfg.n_layers
        )));
    }
    let (embeddings, _) = module_forward(params, cfg, l, module_input)?;
    let flat = params.emitters[l].forward(&mean_rows(&embeddings))?;
    Ok(reshape_layer(flat.as_slice(), cfg.n_pc))
}

/// Classification layer: column `c` of the weight is the mean head output of
/// class `c` plus (optionally) the class mean of `prev_reprs`; the bias is the
/// mean of the head's last output.
pub fn generate_classifier<T: Real>(
    params: &HyperNetParams<T>,
    cfg: &HyperNetConfig,
    module_input: &Matrix<T>,
    prev_reprs: &Matrix<T>,
    y: &[usize],
    n_classes: usize,
) -> Result<Dense<T>> {
    let (u, _) = module_forward(params, cfg, cfg.n_layers - 1, module_input)?;
    pool_classifier(&u, prev_reprs, y, n_classes, cfg.classifier_residual)
}

fn class_counts(y: &[usize], n_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; n_classes];
    for &c in y {
        if c >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: c,
                classes: n_classes,
            });
        }
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::EmptyClass(c));
    }
    Ok(counts)
}

fn pool_classifier<T: Real>(
    u: &Matrix<T>,
    prev_reprs: &Matrix<T>,
    y: &[usize],
    n_classes: usize,
    residual: bool,
) -> Result<Dense<T>> {
    let p = prev_reprs.cols();
    if u.cols() != p + 1 || u.rows() != y.len() || prev_reprs.rows() != y.len() {
        return Err(Error::Shape("classifier head output does not match its support".into()));
    }
    class_counts(y, n_classes)?;
    let head_means = class_means(u, y);
    let repr_means = class_means(prev_reprs, y);
    let mut out = Dense::zeros(p, n_classes);
    for c in 0..n_classes {
        let (hm, rm) = (&head_means[&c], &repr_means[&c]);
        for j in 0..p {
            let w = if residual { hm[j] + rm[j] } else { hm[j] };
            out.weight.set(j, c, w);
        }
        out.bias[c] = hm[p];
    }
    Ok(out)
}

/// Everything the forward pass over the support computed, kept for the
/// backward pass.
pub(crate) struct SupportPass<T: Real> {
    /// Support representations at stages `0..L` (PCA output, hidden outputs).
    pub reprs: Vec<Matrix<T>>,
    pre: Vec<Matrix<T>>,
    modules: Vec<ModuleCache<T>>,
    pooled: Vec<Matrix<T>>,
    counts: Vec<usize>,
}

/// Runs all hypernetwork modules over the support, emitting the main network.
/// With `random_hidden` set the hidden layers are taken from it and the
/// classifier is zero (the nearest-neighbour-only ablation).
pub(crate) fn support_pass<T: Real>(
    params: &HyperNetParams<T>,
    cfg: &HyperNetConfig,
    z_support: &Matrix<T>,
    y: &[usize],
    n_classes: usize,
    random_hidden: Option<&[Dense<T>]>,
) -> Result<(GeneratedLayers<T>, SupportPass<T>)> {
    let counts = class_counts(y, n_classes)?;
    let mut reprs = vec![z_support.clone()];
    let mut pre = Vec::new();
    let mut modules = Vec::new();
    let mut pooled = Vec::new();
    let mut hidden = Vec::new();

    for l in 0..cfg.n_layers - 1 {
        let layer = match random_hidden {
            Some(r) => r[l].clone(),
            None => {
                let input = build_module_input(&reprs[l], y, z_support, cfg.max_classes, cfg.concat_pca)?;
                let (emb, cache) = module_forward(params, cfg, l, &input)?;
                let g = mean_rows(&emb);
                let flat = params.emitters[l].forward(&g)?;
                modules.push(cache);
                pooled.push(g);
                reshape_layer(flat.as_slice(), cfg.n_pc)
            }
        };
        let (p, out) = hidden_step(&layer, &reprs[l], cfg.residual)?;
        pre.push(p);
        reprs.push(out);
        hidden.push(layer);
    }

    let classifier = if random_hidden.is_some() {
        Dense::zeros(cfg.n_pc, n_classes)
    } else {
        let last = &reprs[cfg.n_layers - 1];
        let input = build_module_input(last, y, z_support, cfg.max_classes, cfg.concat_pca)?;
        let (u, cache) = module_forward(params, cfg, cfg.n_layers - 1, &input)?;
        modules.push(cache);
        pool_classifier(&u, last, y, n_classes, cfg.classifier_residual)?
    };

    Ok((
        GeneratedLayers { hidden, classifier },
        SupportPass {
            reprs,
            pre,
            modules,
            pooled,
            counts,
        },
    ))
}

fn add_leading_cols<T: Real>(dst: &mut Matrix<T>, src: &Matrix<T>) {
    let p = dst.cols();
    for i in 0..dst.rows() {
        for (d, &s) in dst.row_mut(i).iter_mut().zip(&src.row(i)[..p]) {
            *d += s;
        }
    }
}

impl<T: Real> SupportPass<T> {
    /// Pushes `∂loss/∂(generated layers)` back into the hypernetwork.
    pub(crate) fn backward(
        &self,
        params: &HyperNetParams<T>,
        cfg: &HyperNetConfig,
        layers: &GeneratedLayers<T>,
        y: &[usize],
        mut d_layers: GeneratedLayers<T>,
        grads: &mut HyperNetParams<T>,
    ) -> Result<()> {
        let n = y.len();
        let p = cfg.n_pc;
        let last = cfg.n_layers - 1;

        // Per-class pooling.
        let d_w = &d_layers.classifier.weight;
        let d_b = &d_layers.classifier.bias;
        let mut d_u = Matrix::zeros(n, p + 1);
        let mut d_r = Matrix::zeros(n, p);
        for (i, &c) in y.iter().enumerate() {
            let k = T::of(self.counts[c] as f64);
            for j in 0..p {
                let g = d_w.get(j, c) / k;
                d_u.set(i, j, g);
                if cfg.classifier_residual {
                    d_r.set(i, j, g);
                }
            }
            d_u.set(i, p, d_b[c] / k);
        }
        let d_input = module_backward(params, cfg, last, &self.modules[last], &d_u, grads)?;
        add_leading_cols(&mut d_r, &d_input);

        let inv_n = T::one() / T::of(n as f64);
        for l in (0..last).rev() {
            let mut d_prev = hidden_step_backward(
                &layers.hidden[l],
                &self.reprs[l],
                &self.pre[l],
                &d_r,
                cfg.residual,
                &mut d_layers.hidden[l],
            )?;
            let dh = &d_layers.hidden[l];
            let mut flat = dh.weight.as_slice().to_vec();
            flat.extend_from_slice(&dh.bias);
            let d_flat = Matrix::from_vec(1, flat.len(), flat)?;
            let d_g = params.emitters[l].backward(&self.pooled[l], &d_flat, &mut grads.emitters[l])?;
            let d_emb = Matrix::from_fn(n, d_g.cols(), |_, j| d_g.get(0, j) * inv_n);
            let d_input = module_backward(params, cfg, l, &self.modules[l], &d_emb, grads)?;
            add_leading_cols(&mut d_prev, &d_input);
            d_r = d_prev;
        }
        Ok(())
    }
}

/// Index of the nearest anchor for every query row; ties go to the lowest index.
pub fn nearest_anchors<T: Real>(queries: &Matrix<T>, anchors: &Matrix<T>) -> Result<Vec<usize>> {
    if anchors.rows() == 0 {
        return Err(Error::NoAnchors);
    }
    if anchors.cols() != queries.cols() {
        return Err(Error::Shape(format!(
            "anchors have width {}, queries {}",
            anchors.cols(),
            queries.cols()
        )));
    }
    Ok((0..queries.rows())
        .map(|i| {
            let q = queries.row(i);
            let mut best = (0, T::infinity());
            for a in 0..anchors.rows() {
                let d = squared_distance(q, anchors.row(a));
                if d < best.1 {
                    best = (a, d);
                }
            }
            best.0
        })
        .collect())
}

/// Randomness consumed by one generation pass, drawn in a fixed order:
/// input map, random hidden layers (ablation only), anchor subsample.
pub(crate) struct GenerationDraws {
    pub input_map: InputMap,
    pub random_hidden: Option<Vec<Dense<f64>>>,
    pub anchor_rows: Vec<usize>,
}

pub(crate) fn draw_generation<R: Rng + ?Sized>(
    support_x: &Matrix<f64>,
    cfg: &HyperNetConfig,
    rng: &mut R,
) -> Result<GenerationDraws> {
    let input_map = if cfg.use_rf_pca {
        InputMap::RfPca(TransformState::fit(
            support_x,
            cfg.d_rf,
            cfg.n_pc,
            cfg.clip_sigma,
            rng,
        )?)
    } else {
        InputMap::Pad {
            d_in: support_x.cols(),
            n_pc: cfg.n_pc,
        }
    };
    let random_hidden = cfg.random_main_weights.then(|| {
        (0..cfg.n_layers - 1)
            .map(|_| Dense::uniform(cfg.n_pc, cfg.n_pc, rng))
            .collect()
    });
    let n = support_x.rows();
    let anchor_rows = if n > cfg.nn_anchor_cap {
        let mut rows = index::sample(rng, n, cfg.nn_anchor_cap).into_vec();
        rows.sort_unstable();
        rows
    } else {
        (0..n).collect()
    };
    Ok(GenerationDraws {
        input_map,
        random_hidden,
        anchor_rows,
    })
}

/// Support and query already mapped through a generation pass's input map:
/// everything that does not depend on the hypernetwork parameters.
#[derive(Clone, Debug)]
pub struct PreparedTask<T: Real = f64> {
    pub z_support: Matrix<T>,
    pub y_support: Vec<usize>,
    pub z_query: Matrix<T>,
    pub y_query: Vec<usize>,
    pub n_classes: usize,
    pub anchor_rows: Vec<usize>,
    pub random_hidden: Option<Vec<Dense<T>>>,
}

impl PreparedTask<f64> {
    pub fn cast<U: Real>(&self) -> PreparedTask<U> {
        PreparedTask {
            z_support: self.z_support.cast(),
            y_support: self.y_support.clone(),
            z_query: self.z_query.cast(),
            y_query: self.y_query.clone(),
            n_classes: self.n_classes,
            anchor_rows: self.anchor_rows.clone(),
            random_hidden: self
                .random_hidden
                .as_ref()
                .map(|v| v.iter().map(Dense::cast).collect()),
        }
    }
}

/// Query logits (main network plus nearest-neighbour biases) for a prepared
/// task, along with the intermediate values the gradient needs.
struct TaskForward<T: Real> {
    layers: GeneratedLayers<T>,
    pass: SupportPass<T>,
    trace: crate::mainnet::ActivationTrace<T>,
    logits: Matrix<T>,
    /// `(stage, class picked for every query row)`.
    picks: Vec<(usize, Vec<usize>)>,
}

fn task_forward<T: Real>(
    params: &HyperNetParams<T>,
    cfg: &HyperNetConfig,
    task: &PreparedTask<T>,
) -> Result<TaskForward<T>> {
    let (layers, pass) = support_pass(
        params,
        cfg,
        &task.z_support,
        &task.y_support,
        task.n_classes,
        task.random_hidden.as_deref(),
    )?;
    let trace = main_forward(&layers, &task.z_query, cfg.residual)?;
    let mut logits = trace.logits().clone();
    let anchor_labels: Vec<usize> = task.anchor_rows.iter().map(|&i| task.y_support[i]).collect();
    let mut picks = Vec::new();
    for (s, enabled) in cfg.nn_stage_mask().into_iter().enumerate() {
        if !enabled {
            continue;
        }
        let anchors = pass.reprs[s].select_rows(&task.anchor_rows);
        let nearest = nearest_anchors(&trace.stages[s], &anchors)?;
        let labels: Vec<usize> = nearest.iter().map(|&a| anchor_labels[a]).collect();
        for (i, &c) in labels.iter().enumerate() {
            let v = logits.get(i, c) + params.nn_bias[s];
            logits.set(i, c, v);
        }
        picks.push((s, labels));
    }
    Ok(TaskForward {
        layers,
        pass,
        trace,
        logits,
        picks,
    })
}

/// Query cross-entropy of a prepared task.
pub fn task_loss<T: Real>(
    params: &HyperNetParams<T>,
    cfg: &HyperNetConfig,
    task: &PreparedTask<T>,
) -> Result<T> {
    let fwd = task_forward(params, cfg, task)?;
    Ok(cross_entropy_with_grad(&fwd.logits, &task.y_query)?.0)
}

/// Query cross-entropy and its gradient with respect to every parameter.
/// The nearest-anchor choices are held fixed; the biases receive gradient
/// through their additive term only.
pub fn task_loss_and_grads<T: Real>(
    params: &HyperNetParams<T>,
    cfg: &HyperNetConfig,
    task: &PreparedTask<T>,
) -> Result<(T, HyperNetParams<T>)> {
    let fwd = task_forward(params, cfg, task)?;
    let (loss, d_logits) = cross_entropy_with_grad(&fwd.logits, &task.y_query)?;
    let mut grads = params.zeros_like();
    if !loss.is_finite() {
        return Ok((loss, grads));
    }
    for (s, labels) in &fwd.picks {
        grads.nn_bias[*s] = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| d_logits.get(i, c))
            .sum();
    }
    if task.random_hidden.is_some() {
        return Ok((loss, grads));
    }
    let mut d_layers = fwd.layers.zeros_like();
    main_backward(&fwd.layers, &fwd.trace, &d_logits, cfg.residual, &mut d_layers)?;
    fwd.pass
        .backward(params, cfg, &fwd.layers, &task.y_support, d_layers, &mut grads)?;
    Ok((loss, grads))
}
