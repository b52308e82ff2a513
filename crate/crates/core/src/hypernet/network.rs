use rand::Rng;

use super::generator::{draw_generation, nearest_anchors, support_pass, GenerationDraws, PreparedTask};
use super::{HyperNetConfig, HyperNetParams};
use crate::data::{DesignMatrix, TaskSample};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mainnet::{main_forward, ActivationTrace, Dense, GeneratedLayers, ResidualMode};
use crate::transform::InputMap;

/// Support representations kept for the nearest-neighbour biases of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorStage {
    /// 0 is the input-map output, `l` the output of hidden layer `l`.
    pub stage: usize,
    pub anchors: Matrix<f64>,
}

/// A classifier emitted by the hypernetwork; self-contained for prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedNetwork {
    pub input_map: InputMap,
    pub layers: GeneratedLayers<f64>,
    pub residual: ResidualMode,
    pub anchor_stages: Vec<AnchorStage>,
    /// Task-local class of every anchor row, shared by all stages.
    pub anchor_labels: Vec<usize>,
    /// Bias per stage, indexed by `AnchorStage::stage`.
    pub nn_bias: Vec<f64>,
    pub use_nn_bias: bool,
    /// Dataset class for each output column.
    pub class_map: Vec<usize>,
}

/// Task-local relabeling: sorted distinct classes of `y`, and `y` mapped
/// onto `0..k`.
pub fn local_classes(y: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut classes = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let local = y
        .iter()
        .map(|c| classes.binary_search(c).expect("class present"))
        .collect();
    (classes, local)
}

fn check_class_count(n: usize, cfg: &HyperNetConfig) -> Result<()> {
    if n > cfg.max_classes {
        return Err(Error::TooManyClasses {
            found: n,
            max: cfg.max_classes,
        });
    }
    Ok(())
}

/// One forward pass of the hypernetwork over `support`.
pub fn generate_network<R: Rng + ?Sized>(
    support: &DesignMatrix,
    params: &HyperNetParams<f64>,
    cfg: &HyperNetConfig,
    rng: &mut R,
) -> Result<GeneratedNetwork> {
    let draws = draw_generation(&support.x, cfg, rng)?;
    generate_with(support, params, cfg, draws)
}

/// [`generate_network`] with a caller-supplied input map and full-support
/// anchors; no randomness is consumed.
pub fn generate_network_with_map(
    support: &DesignMatrix,
    params: &HyperNetParams<f64>,
    cfg: &HyperNetConfig,
    input_map: InputMap,
) -> Result<GeneratedNetwork> {
    if cfg.random_main_weights {
        return Err(Error::Config("random main weights need a generator".into()));
    }
    let draws = GenerationDraws {
        input_map,
        random_hidden: None,
        anchor_rows: (0..support.n_rows()).collect(),
    };
    generate_with(support, params, cfg, draws)
}

fn generate_with(
    support: &DesignMatrix,
    params: &HyperNetParams<f64>,
    cfg: &HyperNetConfig,
    draws: GenerationDraws,
) -> Result<GeneratedNetwork> {
    if support.n_rows() > cfg.max_support {
        return Err(Error::Config(format!(
            "support has {} rows, the limit is {}",
            support.n_rows(),
            cfg.max_support
        )));
    }
    let (class_map, y) = local_classes(&support.y);
    check_class_count(class_map.len(), cfg)?;
    let z = draws.input_map.apply(&support.x)?;
    let (layers, pass) = support_pass(
        params,
        cfg,
        &z,
        &y,
        class_map.len(),
        draws.random_hidden.as_deref(),
    )?;
    let anchor_stages = cfg
        .nn_stage_mask()
        .into_iter()
        .enumerate()
        .filter(|&(_, on)| on)
        .map(|(s, _)| AnchorStage {
            stage: s,
            anchors: pass.reprs[s].select_rows(&draws.anchor_rows),
        })
        .collect();
    Ok(GeneratedNetwork {
        input_map: draws.input_map,
        layers,
        residual: cfg.residual,
        anchor_stages,
        anchor_labels: draws.anchor_rows.iter().map(|&i| y[i]).collect(),
        nn_bias: params.nn_bias.clone(),
        use_nn_bias: true,
        class_map,
    })
}

/// Sample-independent preparation of a meta-training task: relabel, draw
/// the generation randomness and map both sides through the input map.
pub fn prepare_task<R: Rng + ?Sized>(
    task: &TaskSample,
    cfg: &HyperNetConfig,
    rng: &mut R,
) -> Result<PreparedTask<f64>> {
    let (classes, y_support) = local_classes(&task.support_y);
    check_class_count(classes.len(), cfg)?;
    let y_query = task
        .query_y
        .iter()
        .map(|c| {
            classes.binary_search(c).map_err(|_| {
                Error::Schema(format!("query class {c} does not occur in the support"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let draws = draw_generation(&task.support_x, cfg, rng)?;
    Ok(PreparedTask {
        z_support: draws.input_map.apply(&task.support_x)?,
        y_support,
        z_query: draws.input_map.apply(&task.query_x)?,
        y_query,
        n_classes: classes.len(),
        anchor_rows: draws.anchor_rows,
        random_hidden: draws.random_hidden,
    })
}

impl GeneratedNetwork {
    pub fn n_classes(&self) -> usize {
        self.class_map.len()
    }

    pub fn d_in(&self) -> usize {
        self.input_map.d_in()
    }

    /// Copy with the nearest-neighbour biases switched off.
    pub fn without_nn_bias(&self) -> Self {
        Self {
            use_nn_bias: false,
            ..self.clone()
        }
    }

    /// Main-network trace of `x` (standardized rows).
    pub fn trace(&self, x: &Matrix<f64>) -> Result<ActivationTrace<f64>> {
        main_forward(&self.layers, &self.input_map.apply(x)?, self.residual)
    }

    /// Logits, one column per entry of `class_map`.
    pub fn predict_logits(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        let trace = self.trace(x)?;
        let mut logits = trace.logits().clone();
        if self.use_nn_bias {
            logits.add_assign(&nn_bias_logits(&trace, self)?);
        }
        Ok(logits)
    }

    /// Replace the hidden layers and classifier (used by fine-tuning).
    pub fn with_layers(&self, hidden: Vec<Dense<f64>>, classifier: Dense<f64>) -> Self {
        Self {
            layers: GeneratedLayers { hidden, classifier },
            ..self.clone()
        }
    }
}

/// Additive logit terms from the nearest support anchor at every stage.
pub fn nn_bias_logits(trace: &ActivationTrace<f64>, net: &GeneratedNetwork) -> Result<Matrix<f64>> {
    let n = trace.stages[0].rows();
    let mut out = Matrix::zeros(n, net.n_classes());
    for st in &net.anchor_stages {
        let query = trace
            .hidden_stages()
            .get(st.stage)
            .ok_or_else(|| Error::Shape(format!("trace has no stage {}", st.stage)))?;
        let nearest = nearest_anchors(query, &st.anchors)?;
        let beta = net.nn_bias[st.stage];
        for (i, a) in nearest.into_iter().enumerate() {
            let c = net.anchor_labels[a];
            out.set(i, c, out.get(i, c) + beta);
        }
    }
    Ok(out)
}
