//! Meta-training: task sampling over a corpus of datasets, accumulated
//! end-to-end gradients, AdamW updates and meta-validation model selection.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_task, stratified_indices, DesignMatrix, TaskSpec};
use crate::error::{Error, Result};
use crate::hypernet::{generate_network, prepare_task, task_loss_and_grads, HyperNetConfig, HyperNetParams};
use crate::inference::balanced_accuracy;
use crate::mainnet::{argmax, softmax_proba};
use crate::optim::{AdamW, AdamWConfig};

/// A dataset already standardized and split into train and test parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: DesignMatrix,
    pub test: DesignMatrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    MetaTrain,
    MetaVal,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::MetaTrain => "meta-train",
            Role::MetaVal => "meta-val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "meta-train" => Ok(Role::MetaTrain),
            "meta-val" => Ok(Role::MetaVal),
            other => Err(Error::Corpus(format!("unknown role tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub meta_train: Vec<Dataset>,
    pub meta_val: Vec<Dataset>,
}

impl Corpus {
    pub fn new(meta_train: Vec<Dataset>, meta_val: Vec<Dataset>) -> Result<Self> {
        let mut names = BTreeSet::new();
        for d in meta_train.iter().chain(&meta_val) {
            if !names.insert(d.name.as_str()) {
                return Err(Error::Corpus(format!("dataset name {:?} appears twice", d.name)));
            }
        }
        Ok(Self { meta_train, meta_val })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaTrainConfig {
    /// Number of tasks processed.
    pub total_steps: usize,
    /// Tasks averaged into one optimizer step.
    pub accum_tasks: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Meta-validation period in optimizer steps.
    pub val_every: usize,
    /// Fixed-seed supports drawn per meta-val dataset.
    pub val_tasks_per_dataset: usize,
    pub seed: u64,
    pub max_support: usize,
    pub max_query: usize,
    pub hypernet: HyperNetConfig,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            accum_tasks: 25,
            learning_rate: 3e-4,
            weight_decay: 1e-2,
            val_every: 100,
            val_tasks_per_dataset: 1,
            seed: 0,
            max_support: 2048,
            max_query: 2048,
            hypernet: HyperNetConfig::default(),
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hypernet.validate()?;
        if self.accum_tasks == 0 {
            return Err(Error::Config("accum_tasks must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.val_every == 0 || self.val_tasks_per_dataset == 0 {
            return Err(Error::Config("val_every and val_tasks_per_dataset must be positive".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            max_support: self.max_support.min(self.hypernet.max_support),
            max_query: self.max_query,
            ..TaskSpec::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: HyperNetParams<f64>,
    /// Optimizer steps taken when the snapshot was made.
    pub step: usize,
    pub meta_val_score: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub dataset: String,
    pub loss: f64,
    pub meta_val: Option<f64>,
}

impl std::fmt::Display for LogRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step={} dataset={} loss={:.6}", self.step, self.dataset, self.loss)?;
        match self.meta_val {
            Some(v) => write!(f, " meta_val={v:.6}"),
            None => write!(f, " meta_val=-"),
        }
    }
}

const INIT_STREAM: u64 = u64::MAX;
const VAL_STREAM_BASE: u64 = 1 << 62;

/// Independent generator for task `t` of a run, so a run can resume from
/// its task counter alone.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn initial_params(cfg: &MetaTrainConfig) -> HyperNetParams<f64> {
    let mut p = HyperNetParams::init(&cfg.hypernet, &mut stream_rng(cfg.seed, INIT_STREAM));
    p.quantize_f32();
    p
}

/// Loss and parameter gradient of one sampled task.
pub fn loss_and_grads<R: Rng + ?Sized>(
    params: &HyperNetParams<f64>,
    dataset: &Dataset,
    cfg: &MetaTrainConfig,
    rng: &mut R,
) -> Result<(f64, HyperNetParams<f64>)> {
    let task = sample_task(&dataset.train, &dataset.test, &cfg.task_spec(), rng)?;
    let prepared = prepare_task(&task, &cfg.hypernet, rng)?;
    let (loss, grads) = task_loss_and_grads(params, &cfg.hypernet, &prepared)?;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::NonFiniteLoss {
            task: dataset.name.clone(),
        });
    }
    Ok((loss, grads))
}

/// Mean over datasets of the balanced accuracy of `predict` on each full test
/// part. `predict(dataset, k)` is called for `k in 0..tasks_per_dataset`.
pub fn mean_balanced_accuracy<F>(datasets: &[Dataset], tasks_per_dataset: usize, mut predict: F) -> Result<f64>
where
    F: FnMut(usize, &Dataset, usize) -> Result<Vec<usize>>,
{
    if datasets.is_empty() {
        return Err(Error::Corpus("no meta-validation datasets".into()));
    }
    let mut total = 0.0;
    for (d, ds) in datasets.iter().enumerate() {
        let mut acc = 0.0;
        for k in 0..tasks_per_dataset {
            acc += balanced_accuracy(&ds.test.y, &predict(d, ds, k)?)?;
        }
        total += acc / tasks_per_dataset as f64;
    }
    Ok(total / datasets.len() as f64)
}

/// Single-pass predictions of `params` on `dataset`'s test part from a
/// support drawn with `rng`.
pub fn single_pass_predictions<R: Rng + ?Sized>(
    params: &HyperNetParams<f64>,
    dataset: &Dataset,
    cfg: &HyperNetConfig,
    max_support: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let rows = stratified_indices(&dataset.train.y, max_support.min(cfg.max_support), 2, rng)?;
    let support = dataset.train.select_rows(&rows);
    let net = generate_network(&support, params, cfg, rng)?;
    let proba = softmax_proba(&net.predict_logits(&dataset.test.x)?);
    Ok((0..proba.rows())
        .map(|i| net.class_map[argmax(proba.row(i))])
        .collect())
}

/// Mean balanced accuracy over meta-val datasets; supports are drawn from
/// generator streams fixed by `seed`, so scores are comparable across
/// checkpoints.
pub fn meta_validate(
    params: &HyperNetParams<f64>,
    datasets: &[Dataset],
    cfg: &MetaTrainConfig,
    tasks_per_dataset: usize,
) -> Result<f64> {
    mean_balanced_accuracy(datasets, tasks_per_dataset, |d, ds, k| {
        let stream = VAL_STREAM_BASE + (d * tasks_per_dataset + k) as u64;
        single_pass_predictions(params, ds, &cfg.hypernet, cfg.max_support, &mut stream_rng(cfg.seed, stream))
    })
}

/// Complete state of a run; cloning it and resuming gives the same result
/// as never pausing.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub params: HyperNetParams<f64>,
    pub optimizer: AdamW,
    /// Tasks processed so far.
    pub tasks_done: usize,
    pub accum: HyperNetParams<f64>,
    pub accum_count: usize,
    pub best: Option<Checkpoint>,
    pub last_val: Option<(usize, f64)>,
}

pub struct MetaTrainer<'a> {
    corpus: &'a Corpus,
    cfg: MetaTrainConfig,
    state: TrainerState,
}

impl<'a> MetaTrainer<'a> {
    pub fn new(corpus: &'a Corpus, cfg: MetaTrainConfig) -> Result<Self> {
        let params = initial_params(&cfg);
        Self::with_params(corpus, cfg, params)
    }

    /// Start from given parameters instead of a fresh initialization.
    pub fn with_params(corpus: &'a Corpus, cfg: MetaTrainConfig, params: HyperNetParams<f64>) -> Result<Self> {
        cfg.validate()?;
        if corpus.meta_train.is_empty() {
            return Err(Error::Corpus("no meta-train datasets".into()));
        }
        let sizes: Vec<usize> = params.buffers().iter().map(|b| b.len()).collect();
        let state = TrainerState {
            optimizer: AdamW::new(cfg.adamw(), &sizes),
            accum: params.zeros_like(),
            params,
            tasks_done: 0,
            accum_count: 0,
            best: None,
            last_val: None,
        };
        Ok(Self { corpus, cfg, state })
    }

    pub fn resume(corpus: &'a Corpus, cfg: MetaTrainConfig, state: TrainerState) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { corpus, cfg, state })
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }

    pub fn optimizer_steps(&self) -> usize {
        self.state.optimizer.step as usize
    }

    fn validate_now(&mut self, log: &mut dyn FnMut(&LogRecord)) -> Result<f64> {
        let step = self.optimizer_steps();
        if let Some((s, v)) = self.state.last_val {
            if s == step {
                return Ok(v);
            }
        }
        let score = if self.corpus.meta_val.is_empty() {
            f64::NAN
        } else {
            meta_validate(
                &self.state.params,
                &self.corpus.meta_val,
                &self.cfg,
                self.cfg.val_tasks_per_dataset,
            )?
        };
        self.state.last_val = Some((step, score));
        let better = match &self.state.best {
            None => true,
            Some(b) => score > b.meta_val_score,
        };
        if better {
            self.state.best = Some(Checkpoint {
                params: self.state.params.clone(),
                step,
                meta_val_score: score,
            });
        }
        log(&LogRecord {
            step,
            dataset: "meta-val".into(),
            loss: f64::NAN,
            meta_val: Some(score),
        });
        Ok(score)
    }

    fn task_grads(&self, t: usize) -> Result<(String, f64, HyperNetParams<f64>)> {
        let mut rng = stream_rng(self.cfg.seed, t as u64);
        let ds = &self.corpus.meta_train[rng.random_range(0..self.corpus.meta_train.len())];
        let (loss, g) = loss_and_grads(&self.state.params, ds, &self.cfg, &mut rng)
            .map_err(|e| match e {
                Error::NonFiniteLoss { task } => Error::NonFiniteLoss {
                    task: format!("{task} (task {t})"),
                },
                other => other,
            })?;
        Ok((ds.name.clone(), loss, g))
    }

    fn apply_accumulated(&mut self) {
        let k = self.state.accum_count as f64;
        self.state.accum.scale(1.0 / k);
        let s = &mut self.state;
        s.optimizer.update(s.params.buffers_mut(), s.accum.buffers());
        s.params.quantize_f32();
        s.accum = s.params.zeros_like();
        s.accum_count = 0;
    }

    /// Process up to `n` more tasks (stopping at `total_steps`).
    pub fn advance(&mut self, n: usize, log: &mut dyn FnMut(&LogRecord)) -> Result<()> {
        if self.state.tasks_done == 0 && self.state.last_val.is_none() {
            self.validate_now(log)?;
        }
        let end = (self.state.tasks_done + n).min(self.cfg.total_steps);
        while self.state.tasks_done < end {
            let room = self.cfg.accum_tasks - self.state.accum_count;
            let chunk: Vec<usize> = (self.state.tasks_done..end.min(self.state.tasks_done + room)).collect();
            for (t, res) in chunk.iter().zip(self.chunk_grads(&chunk)) {
                let (name, loss, g) = res?;
                self.state.accum.add_scaled(&g, 1.0);
                self.state.accum_count += 1;
                self.state.tasks_done += 1;
                log(&LogRecord {
                    step: *t,
                    dataset: name,
                    loss,
                    meta_val: None,
                });
            }
            let finished = self.state.tasks_done == self.cfg.total_steps;
            if self.state.accum_count == self.cfg.accum_tasks || (finished && self.state.accum_count > 0) {
                self.apply_accumulated();
                if self.optimizer_steps().is_multiple_of(self.cfg.val_every) {
                    self.validate_now(log)?;
                }
            }
        }
        if self.state.tasks_done == self.cfg.total_steps {
            self.validate_now(log)?;
        }
        Ok(())
    }

    #[cfg(feature = "parallel")]
    fn chunk_grads(&self, chunk: &[usize]) -> Vec<Result<(String, f64, HyperNetParams<f64>)>> {
        use rayon::prelude::*;
        chunk.par_iter().map(|&t| self.task_grads(t)).collect()
    }

    #[cfg(not(feature = "parallel"))]
    fn chunk_grads(&self, chunk: &[usize]) -> Vec<Result<(String, f64, HyperNetParams<f64>)>> {
        chunk.iter().map(|&t| self.task_grads(t)).collect()
    }

    pub fn finished(&self) -> bool {
        self.state.tasks_done >= self.cfg.total_steps
    }

    /// Best checkpoint by meta-validation score; with no meta-val data the
    /// latest parameters.
    pub fn best(&self) -> Checkpoint {
        match &self.state.best {
            Some(b) if !self.corpus.meta_val.is_empty() => b.clone(),
            _ => Checkpoint {
                params: self.state.params.clone(),
                step: self.optimizer_steps(),
                meta_val_score: f64::NAN,
            },
        }
    }
}

/// Run meta-training to completion and return the best checkpoint.
pub fn meta_train(corpus: &Corpus, cfg: &MetaTrainConfig, log: &mut dyn FnMut(&LogRecord)) -> Result<Checkpoint> {
    let mut trainer = MetaTrainer::new(corpus, cfg.clone())?;
    trainer.advance(cfg.total_steps, log)?;
    Ok(trainer.best())
}
