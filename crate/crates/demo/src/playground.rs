//! State behind the browser page, kept free of JavaScript types so it can be
//! tested natively.

use hyperfast::data::{apply_standardizer, fit_standardizer, Column, RawDataset, StandardizerState};
use hyperfast::hypernet::{HyperNetConfig, HyperNetParams};
use hyperfast::inference::{self, FittedModel, InferenceConfig};
use hyperfast::meta::{initial_params, Corpus, MetaTrainConfig, MetaTrainer, TrainerState};
use hyperfast::persist::{self, ModelFile};
use hyperfast::synthetic::{blob_corpus, BlobSpec};
use hyperfast::transform::InputMap;
use hyperfast::{Error, Result};

/// Canvas coordinates run over `[-EXTENT, EXTENT]` on both axes.
pub const EXTENT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    pub tasks_done: usize,
    pub total_tasks: usize,
    pub best_meta_val: f64,
    pub latest_meta_val: f64,
}

pub struct Playground {
    cfg: MetaTrainConfig,
    corpus: Corpus,
    trainer: Option<TrainerState>,
    /// Parameters used for fitting: the best checkpoint so far, or loaded
    /// from a file.
    params: HyperNetParams<f64>,
    hypernet: HyperNetConfig,
    points: Vec<Point>,
    fitted: Option<(FittedModel, StandardizerState)>,
}

fn browser_config(seed: u64, total_tasks: usize) -> MetaTrainConfig {
    MetaTrainConfig {
        total_steps: total_tasks,
        accum_tasks: 25,
        val_every: 4,
        seed,
        max_support: 256,
        max_query: 256,
        hypernet: HyperNetConfig {
            n_pc: 16,
            d_rf: 256,
            h_hn: 32,
            max_classes: 4,
            ..HyperNetConfig::default()
        },
        ..MetaTrainConfig::default()
    }
}

fn browser_corpus(seed: u64) -> Result<Corpus> {
    let spec = BlobSpec {
        min_dim: 2,
        max_dim: 6,
        n_train: 96,
        n_test: 96,
        ..BlobSpec::default()
    };
    Ok(blob_corpus(24, 6, 0, seed, &spec)?.corpus)
}

impl Playground {
    pub fn new(seed: u64, total_tasks: usize) -> Result<Self> {
        let cfg = browser_config(seed, total_tasks);
        cfg.validate()?;
        let corpus = browser_corpus(seed)?;
        let params = initial_params(&cfg);
        Ok(Self {
            hypernet: cfg.hypernet.clone(),
            trainer: Some(MetaTrainer::with_params(&corpus, cfg.clone(), params.clone())?.into_state()),
            cfg,
            corpus,
            params,
            points: Vec::new(),
            fitted: None,
        })
    }

    pub fn hypernet(&self) -> &HyperNetConfig {
        &self.hypernet
    }

    /// Meta-train on up to `tasks` more synthetic tasks; fitting then uses
    /// the best checkpoint by meta-validation.
    pub fn train(&mut self, tasks: usize) -> Result<Progress> {
        let state = self
            .trainer
            .take()
            .ok_or_else(|| Error::Config("loaded parameters cannot be trained further here".into()))?;
        let mut trainer = MetaTrainer::resume(&self.corpus, self.cfg.clone(), state)?;
        let result = trainer.advance(tasks, &mut |_| {});
        let best = trainer.best();
        let state = trainer.into_state();
        let latest = state.last_val.map_or(f64::NAN, |(_, v)| v);
        let tasks_done = state.tasks_done;
        self.trainer = Some(state);
        result?;
        self.params = best.params;
        Ok(Progress {
            tasks_done,
            total_tasks: self.cfg.total_steps,
            best_meta_val: best.meta_val_score,
            latest_meta_val: latest,
        })
    }

    /// Replace the parameters with a saved parameters or checkpoint file.
    pub fn load_params(&mut self, bytes: &[u8]) -> Result<()> {
        let (params, hypernet) = persist::decode_params(&ModelFile::from_bytes(bytes)?)?;
        self.params = params;
        self.hypernet = hypernet;
        self.trainer = None;
        self.fitted = None;
        Ok(())
    }

    pub fn add_point(&mut self, point: Point) -> Result<()> {
        if point.class >= self.hypernet.max_classes {
            return Err(Error::TooManyClasses {
                found: point.class + 1,
                max: self.hypernet.max_classes,
            });
        }
        self.points.push(point);
        Ok(())
    }

    pub fn clear_points(&mut self) {
        self.points.clear();
        self.fitted = None;
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    fn raw(points: &[Point], with_labels: bool) -> Result<RawDataset> {
        let col = |name: &str, f: fn(&Point) -> f64| Column::numeric(name, points.iter().map(|p| Some(f(p))).collect());
        let y = if with_labels { points.iter().map(|p| p.class).collect() } else { Vec::new() };
        RawDataset::new(vec![col("x", |p| p.x), col("y", |p| p.y)], y)
    }

    /// Generate a classifier for the current points.
    pub fn fit(&mut self, icfg: &InferenceConfig) -> Result<Vec<String>> {
        let raw = Self::raw(&self.points, true)?;
        let state = fit_standardizer(&raw)?;
        let data = apply_standardizer(&state, &raw)?;
        let model = inference::fit(&data, &self.params, &self.hypernet, icfg)?;
        let warnings = model.warnings();
        self.fitted = Some((model, state));
        Ok(warnings)
    }

    fn fitted(&self) -> Result<&(FittedModel, StandardizerState)> {
        self.fitted.as_ref().ok_or_else(|| Error::Config("no classifier fitted yet".into()))
    }

    /// Class probabilities on a `res × res` grid, row-major from the top-left
    /// corner, `n_classes` values per cell.
    pub fn surface(&self, res: usize) -> Result<(usize, Vec<f64>)> {
        let (model, state) = self.fitted()?;
        let step = 2.0 * EXTENT / res.max(1) as f64;
        let grid: Vec<Point> = (0..res * res)
            .map(|i| Point {
                x: -EXTENT + step * ((i % res) as f64 + 0.5),
                y: EXTENT - step * ((i / res) as f64 + 0.5),
                class: 0,
            })
            .collect();
        let x = apply_standardizer(state, &Self::raw(&grid, false)?)?;
        let p = inference::predict_proba(model, &x.x)?;
        Ok((model.n_classes, p.as_slice().to_vec()))
    }

    /// Balanced accuracy of the fitted classifier on its own points.
    pub fn support_accuracy(&self) -> Result<f64> {
        let (model, state) = self.fitted()?;
        let x = apply_standardizer(state, &Self::raw(&self.points, false)?)?;
        let labels: Vec<usize> = self.points.iter().map(|p| p.class).collect();
        inference::balanced_accuracy(&labels, &inference::predict(model, &x.x)?)
    }

    /// Singular values kept by the first member's PCA, largest first.
    pub fn spectrum(&self) -> Result<Vec<f64>> {
        let (model, _) = self.fitted()?;
        match &model.members[0].net.input_map {
            InputMap::RfPca(t) => Ok(t.pca.sigma.clone()),
            InputMap::Pad { .. } => Ok(Vec::new()),
        }
    }
}
