//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --release -p hyperfast-validation --test acceptance -- 1 6 7`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::time::{Duration, Instant};

use common::{confusion_balanced_accuracy, covariance, jacobi_eigen, max_principal_angle_sin};
use hyperfast::data::{DesignMatrix, StandardizerState};
use hyperfast::gradcheck::{self, GradcheckSetup, Precision};
use hyperfast::hypernet::{
    build_module_input, generate_classifier, generate_network_with_map, HyperNetConfig, HyperNetParams,
};
use hyperfast::inference::{
    balanced_accuracy, fine_tune, fit, predict, predict_proba, InferenceConfig, Optimization,
};
use hyperfast::mainnet::{softmax_proba, Dense};
use hyperfast::meta::{initial_params, stream_rng, Dataset, MetaTrainConfig, MetaTrainer};
use hyperfast::persist::{decode_fitted, encode_fitted, FittedBundle, ModelFile};
use hyperfast::synthetic::{blob_corpus, BlobSpec};
use hyperfast::transform::{fit_pca, pc_transform, InputMap, TransformState};
use hyperfast::{Matrix, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const META_TRAIN: usize = 40;
const META_VAL: usize = 8;
const META_TEST: usize = 8;

// Thresholds.
const GRAD_TOL_F32: f64 = 1e-4;
const GRAD_TOL_F64: f64 = 1e-5;
const GRAD_TIME: Duration = Duration::from_secs(60);
const MIN_META_TEST: f64 = 0.90;
const MIN_GAIN_OVER_INIT: f64 = 0.05;
const MIN_SEEDS: usize = 4;
const TRAIN_TIME: Duration = Duration::from_secs(30 * 60);
const ENSEMBLE_SLACK: f64 = 0.01;
const FINE_TUNE_STEPS: usize = 128;
const FINE_TUNE_SLACK: f64 = 0.02;
const INVARIANCE_TOL: f64 = 1e-6;
const PCA_ANGLE_TOL: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// One meta-training run on one seed's corpus.
struct Run {
    seed: u64,
    hypernet: HyperNetConfig,
    initial: HyperNetParams<f64>,
    trained: HyperNetParams<f64>,
    meta_test: Vec<Dataset>,
    meta_val_start: f64,
    meta_val_best: f64,
    elapsed: Duration,
}

fn desk_config(seed: u64, hypernet: HyperNetConfig) -> MetaTrainConfig {
    MetaTrainConfig {
        total_steps: 2000,
        accum_tasks: 25,
        learning_rate: 3e-4,
        seed,
        hypernet,
        ..MetaTrainConfig::default()
    }
}

fn train(seed: u64, hypernet: HyperNetConfig) -> Result<Run> {
    let blobs = blob_corpus(META_TRAIN, META_VAL, META_TEST, seed, &BlobSpec::default())?;
    let cfg = desk_config(seed, hypernet.clone());
    let start = Instant::now();
    let mut trainer = MetaTrainer::new(&blobs.corpus, cfg.clone())?;
    let mut meta_val_start = None;
    trainer.advance(cfg.total_steps, &mut |r| {
        if r.step == 0 && meta_val_start.is_none() {
            meta_val_start = r.meta_val;
        }
    })?;
    let best = trainer.best();
    Ok(Run {
        seed,
        hypernet,
        initial: initial_params(&cfg),
        trained: best.params,
        meta_test: blobs.meta_test,
        meta_val_start: meta_val_start.unwrap_or(f64::NAN),
        meta_val_best: best.meta_val_score,
        elapsed: start.elapsed(),
    })
}

fn single_pass(seed: u64) -> InferenceConfig {
    InferenceConfig {
        seed,
        ..InferenceConfig::default()
    }
}

/// Mean test balanced accuracy over the datasets, fitting each on its
/// train part.
fn meta_test_score(
    params: &HyperNetParams<f64>,
    hypernet: &HyperNetConfig,
    datasets: &[Dataset],
    icfg: &InferenceConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for ds in datasets {
        let model = fit(&ds.train, params, hypernet, icfg)?;
        total += balanced_accuracy(&ds.test.y, &predict(&model, &ds.test.x)?)?;
    }
    Ok(total / datasets.len() as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Runs {
    full: Vec<Run>,
    no_rf_pca: Option<Vec<Run>>,
    random_main: Option<Vec<Run>>,
}

impl Runs {
    fn full(&mut self) -> Result<&[Run]> {
        if self.full.is_empty() {
            self.full = SEEDS.iter().map(|&s| train(s, HyperNetConfig::default())).collect::<Result<_>>()?;
        }
        Ok(&self.full)
    }

    fn ablations(&mut self) -> Result<(&[Run], &[Run])> {
        if self.no_rf_pca.is_none() {
            let cfg = HyperNetConfig {
                use_rf_pca: false,
                ..HyperNetConfig::default()
            };
            self.no_rf_pca = Some(SEEDS.iter().map(|&s| train(s, cfg.clone())).collect::<Result<_>>()?);
        }
        if self.random_main.is_none() {
            let cfg = HyperNetConfig {
                random_main_weights: true,
                ..HyperNetConfig::default()
            };
            self.random_main = Some(SEEDS.iter().map(|&s| train(s, cfg.clone())).collect::<Result<_>>()?);
        }
        Ok((self.no_rf_pca.as_deref().unwrap(), self.random_main.as_deref().unwrap()))
    }
}

fn gradient_fidelity() -> Result<Outcome> {
    let setup = GradcheckSetup::default();
    let start = Instant::now();
    let f32_report = gradcheck::run(&setup, Precision::F32)?;
    let f64_report = gradcheck::run(&setup, Precision::F64)?;
    let elapsed = start.elapsed();
    let pass = f32_report.max_rel_error < GRAD_TOL_F32 && f64_report.max_rel_error < GRAD_TOL_F64 && elapsed < GRAD_TIME;
    Ok(Outcome::new(
        pass,
        format!(
            "max rel error f32 {:.2e} (< {GRAD_TOL_F32:.0e}), f64 {:.2e} (< {GRAD_TOL_F64:.0e}), {:.1}s",
            f32_report.max_rel_error,
            f64_report.max_rel_error,
            elapsed.as_secs_f64()
        ),
    ))
}

fn meta_learning(runs: &mut Runs) -> Result<Outcome> {
    let mut passing = 0;
    let mut parts = Vec::new();
    let mut slowest = Duration::ZERO;
    for run in runs.full()? {
        let icfg = single_pass(run.seed);
        let before = meta_test_score(&run.initial, &run.hypernet, &run.meta_test, &icfg)?;
        let after = meta_test_score(&run.trained, &run.hypernet, &run.meta_test, &icfg)?;
        if after >= MIN_META_TEST && after - before >= MIN_GAIN_OVER_INIT {
            passing += 1;
        }
        slowest = slowest.max(run.elapsed);
        parts.push(format!("seed {} {before:.4}->{after:.4}", run.seed));
    }
    let pass = passing >= MIN_SEEDS && slowest < TRAIN_TIME;
    Ok(Outcome::new(
        pass,
        format!(
            "{passing}/5 seeds reach >= {MIN_META_TEST} and +{MIN_GAIN_OVER_INIT} over step 0 [{}], slowest run {:.0}s",
            parts.join(", "),
            slowest.as_secs_f64()
        ),
    ))
}

/// Meta-validation score of the selected checkpoint is strictly above the
/// step-0 score on every seed.
fn meta_val_improves(runs: &mut Runs) -> Result<Outcome> {
    let runs = runs.full()?;
    let improved = runs.iter().filter(|r| r.meta_val_best > r.meta_val_start).count();
    let parts: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} {:.4}->{:.4}", r.seed, r.meta_val_start, r.meta_val_best))
        .collect();
    Ok(Outcome::new(
        improved == runs.len(),
        format!("{improved}/{} seeds above step 0 [{}]", runs.len(), parts.join(", ")),
    ))
}

/// A trained model scores at least as well on its own support as on the
/// held-out query, per seed over the meta-test datasets.
fn in_sample_support(runs: &mut Runs) -> Result<Outcome> {
    let mut ok = 0;
    let mut parts = Vec::new();
    let runs = runs.full()?;
    for run in runs {
        let icfg = single_pass(run.seed);
        let (mut on_support, mut on_query) = (0.0, 0.0);
        for ds in &run.meta_test {
            let model = fit(&ds.train, &run.trained, &run.hypernet, &icfg)?;
            on_support += balanced_accuracy(&ds.train.y, &predict(&model, &ds.train.x)?)?;
            on_query += balanced_accuracy(&ds.test.y, &predict(&model, &ds.test.x)?)?;
        }
        let n = run.meta_test.len() as f64;
        let (s, q) = (on_support / n, on_query / n);
        if s >= q {
            ok += 1;
        }
        parts.push(format!("seed {} {s:.4}/{q:.4}", run.seed));
    }
    Ok(Outcome::new(
        ok == runs.len(),
        format!("support >= query on {ok}/{} seeds [{}]", runs.len(), parts.join(", ")),
    ))
}

fn ablation_direction(runs: &mut Runs) -> Result<Outcome> {
    runs.full()?;
    let full: Vec<f64> = runs
        .full
        .iter()
        .map(|r| meta_test_score(&r.trained, &r.hypernet, &r.meta_test, &single_pass(r.seed)))
        .collect::<Result<_>>()?;
    let (no_rf, random) = runs.ablations()?;
    let score = |rs: &[Run]| -> Result<Vec<f64>> {
        rs.iter()
            .map(|r| meta_test_score(&r.trained, &r.hypernet, &r.meta_test, &single_pass(r.seed)))
            .collect()
    };
    let no_rf = score(no_rf)?;
    let random = score(random)?;
    let beats = |other: &[f64]| full.iter().zip(other).filter(|(a, b)| a >= b).count();
    let (a, b) = (beats(&no_rf), beats(&random));
    Ok(Outcome::new(
        a >= MIN_SEEDS && b >= MIN_SEEDS,
        format!(
            "full >= no-RF-PCA on {a}/5, full >= random-main on {b}/5 [full {}; no-RF-PCA {}; random-main {}]",
            fmt_list(&full),
            fmt_list(&no_rf),
            fmt_list(&random)
        ),
    ))
}

fn ensemble_trend(runs: &mut Runs) -> Result<Outcome> {
    let mut one = Vec::new();
    let mut eight = Vec::new();
    for r in runs.full()? {
        one.push(meta_test_score(&r.trained, &r.hypernet, &r.meta_test, &single_pass(r.seed))?);
        let icfg = InferenceConfig {
            n_ensemble: 8,
            ..single_pass(r.seed)
        };
        eight.push(meta_test_score(&r.trained, &r.hypernet, &r.meta_test, &icfg)?);
    }
    let (m1, m8) = (mean(&one), mean(&eight));
    Ok(Outcome::new(
        m8 >= m1 - ENSEMBLE_SLACK,
        format!("mean accuracy n_ensemble=8 {m8:.4} vs n_ensemble=1 {m1:.4} (slack {ENSEMBLE_SLACK})"),
    ))
}

fn fine_tuning(runs: &mut Runs) -> Result<Outcome> {
    let mut loss_ok = true;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut single = Vec::new();
    let mut tuned = Vec::new();
    for r in runs.full()? {
        let base = single_pass(r.seed);
        let icfg = InferenceConfig {
            optimization: Optimization::Optimize,
            optimize_steps: FINE_TUNE_STEPS,
            ..base
        };
        for ds in &r.meta_test {
            let model = fit(&ds.train, &r.trained, &r.hypernet, &base)?;
            let net = &model.members[0].net;
            let report = fine_tune(net, &ds.train, &icfg, &mut stream_rng(r.seed, 1 << 40))?;
            loss_ok &= !report.reverted && report.final_loss <= report.initial_loss;
            worst_gap = worst_gap.max(report.final_loss - report.initial_loss);
        }
        single.push(meta_test_score(&r.trained, &r.hypernet, &r.meta_test, &base)?);
        tuned.push(meta_test_score(&r.trained, &r.hypernet, &r.meta_test, &icfg)?);
    }
    let (ms, mt) = (mean(&single), mean(&tuned));
    Ok(Outcome::new(
        loss_ok && mt >= ms - FINE_TUNE_SLACK,
        format!(
            "loss never rises over {FINE_TUNE_STEPS} steps: {loss_ok} (largest change {worst_gap:+.2e}); \
             mean accuracy optimize {mt:.4} vs single pass {ms:.4} (slack {FINE_TUNE_SLACK})"
        ),
    ))
}

fn invariances(params: &HyperNetParams<f64>) -> Result<Outcome> {
    let cfg = HyperNetConfig::default();
    let mut rng = stream_rng(42, 0);
    let mut failures = Vec::new();

    // Support-row order with a fixed input map and full-support anchors.
    let x = gaussian(60, 7, &mut rng);
    let y: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let support = DesignMatrix::new(x, y)?;
    let map = InputMap::RfPca(TransformState::fit(&support.x, cfg.d_rf, cfg.n_pc, cfg.clip_sigma, &mut rng)?);
    let mut order: Vec<usize> = (0..60).collect();
    order.shuffle(&mut rng);
    let a = generate_network_with_map(&support, params, &cfg, map.clone())?;
    let b = generate_network_with_map(&support.select_rows(&order), params, &cfg, map)?;
    let query = gaussian(15, 7, &mut rng);
    let (la, lb) = (a.predict_logits(&query)?, b.predict_logits(&query)?);
    let mut gap = max_abs_diff(la.as_slice(), lb.as_slice());
    for (da, db) in a.layers.hidden.iter().chain([&a.layers.classifier]).zip(b.layers.hidden.iter().chain([&b.layers.classifier])) {
        gap = gap.max(max_abs_diff(da.weight.as_slice(), db.weight.as_slice()));
        gap = gap.max(max_abs_diff(&da.bias, &db.bias));
    }
    if gap > INVARIANCE_TOL {
        failures.push(format!("support permutation {gap:.2e}"));
    }

    // Relabeling the pooling groups permutes classifier columns and logits.
    let prev = gaussian(12, cfg.n_pc, &mut rng);
    let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
    let input = build_module_input(&prev, &labels, &prev, cfg.max_classes, cfg.concat_pca)?;
    let base = generate_classifier(params, &cfg, &input, &prev, &labels, 4)?;
    let perm = [2, 0, 3, 1];
    let relabeled: Vec<usize> = labels.iter().map(|&c| perm[c]).collect();
    let moved = generate_classifier(params, &cfg, &input, &prev, &relabeled, 4)?;
    let (l0, l1) = (base.forward(&prev)?, moved.forward(&prev)?);
    let mut gap: f64 = 0.0;
    for c in 0..4 {
        gap = gap.max((moved.bias[perm[c]] - base.bias[c]).abs());
        for j in 0..cfg.n_pc {
            gap = gap.max((moved.weight.get(j, perm[c]) - base.weight.get(j, c)).abs());
        }
        for i in 0..12 {
            gap = gap.max((l1.get(i, perm[c]) - l0.get(i, c)).abs());
        }
    }
    if gap > INVARIANCE_TOL {
        failures.push(format!("class relabeling {gap:.2e}"));
    }

    // Joint permutation of input columns and projection rows.
    let state = match &a.input_map {
        InputMap::RfPca(t) => t.clone(),
        InputMap::Pad { .. } => unreachable!("full model uses RF-PCA"),
    };
    let mut cols: Vec<usize> = (0..7).collect();
    cols.shuffle(&mut rng);
    let mut permuted = state.clone();
    permuted.rf.weight = state.rf.weight.select_rows(&cols);
    let gap = max_abs_diff(
        pc_transform(&query, &state)?.as_slice(),
        pc_transform(&query.select_cols(&cols), &permuted)?.as_slice(),
    );
    if gap > INVARIANCE_TOL {
        failures.push(format!("RF co-permutation {gap:.2e}"));
    }

    // Probabilities.
    let p = softmax_proba(&la);
    let gap = (0..p.rows())
        .map(|i| (p.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    if gap > INVARIANCE_TOL {
        failures.push(format!("softmax row sums {gap:.2e}"));
    }

    // One support row per class: a constant head makes each column that
    // row's representation plus the head's output.
    let mut fixed = params.clone();
    let last = cfg.n_layers - 1;
    let head_bias: Vec<f64> = (0..=cfg.n_pc).map(|k| 0.1 * k as f64 - 1.0).collect();
    fixed.heads[last] = Dense {
        weight: Matrix::zeros(cfg.h_hn, cfg.n_pc + 1),
        bias: head_bias.clone(),
    };
    let rows = gaussian(3, cfg.n_pc, &mut rng);
    let one_each = [1, 2, 0];
    let input = build_module_input(&rows, &one_each, &rows, cfg.max_classes, cfg.concat_pca)?;
    let w = generate_classifier(&fixed, &cfg, &input, &rows, &one_each, 3)?;
    let mut gap: f64 = 0.0;
    for (i, &c) in one_each.iter().enumerate() {
        for j in 0..cfg.n_pc {
            gap = gap.max((w.weight.get(j, c) - (head_bias[j] + rows.get(i, j))).abs());
        }
        gap = gap.max((w.bias[c] - head_bias[cfg.n_pc]).abs());
    }
    if gap > INVARIANCE_TOL {
        failures.push(format!("singleton pooling {gap:.2e}"));
    }

    Ok(Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            "support permutation, class relabeling, RF co-permutation, softmax sums, singleton pooling all within 1e-6".into()
        } else {
            failures.join("; ")
        },
    ))
}

fn oracle_equivalence() -> Result<Outcome> {
    let mut rng = stream_rng(7, 0);
    let mut worst_angle: f64 = 0.0;
    for _ in 0..20 {
        let x = gaussian(10, 8, &mut rng);
        let k = 4;
        let pca = fit_pca(&x, k)?;
        let rows: Vec<Vec<f64>> = (0..10).map(|i| x.row(i).to_vec()).collect();
        let (_, vecs) = jacobi_eigen(&covariance(&rows));
        let brute: Vec<Vec<f64>> = vecs.iter().map(|r| r[..k].to_vec()).collect();
        let ours: Vec<Vec<f64>> = (0..8).map(|r| (0..k).map(|j| pca.components.get(r, j)).collect()).collect();
        worst_angle = worst_angle.max(max_principal_angle_sin(&ours, &brute).asin());
    }
    let mut ba_gap: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.random_range(4..20);
        let k = rng.random_range(2..5);
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        ba_gap = ba_gap.max((balanced_accuracy(&t, &p)? - confusion_balanced_accuracy(&t, &p)).abs());
    }
    Ok(Outcome::new(
        worst_angle < PCA_ANGLE_TOL && ba_gap < 1e-12,
        format!("largest principal angle {worst_angle:.2e} rad over 20 PCA fits, balanced accuracy gap {ba_gap:.1e}"),
    ))
}

fn persistence(run: &Run) -> Result<Outcome> {
    let ds = &run.meta_test[0];
    let icfg = InferenceConfig {
        n_ensemble: 4,
        ..single_pass(run.seed)
    };
    let model = fit(&ds.train, &run.trained, &run.hypernet, &icfg)?;
    let names: Vec<String> = (0..ds.train.d_in()).map(|j| format!("x{j}")).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let bundle = FittedBundle {
        model,
        standardizer: StandardizerState::identity(&name_refs),
        label_column: "class".into(),
        labels: vec!["a".into(), "b".into()],
    };
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.hf");
    encode_fitted(&bundle).save(&path)?;
    let loaded = decode_fitted(&ModelFile::load(&path)?)?;
    let bits = |m: &Matrix<f64>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same = bits(&predict_proba(&loaded.model, &ds.test.x)?) == bits(&predict_proba(&bundle.model, &ds.test.x)?)
        && predict(&loaded.model, &ds.test.x)? == predict(&bundle.model, &ds.test.x)?;

    let mut bytes = std::fs::read(&path)?;
    let n = bytes.len();
    bytes[n - 1] ^= 0xff;
    std::fs::write(&path, &bytes)?;
    let refused = ModelFile::load(&path).is_err();
    Ok(Outcome::new(
        same && refused,
        format!("reloaded predictions bit-identical: {same}; corrupted checksum refused: {refused}"),
    ))
}

fn search_space(run: &Run) -> Result<Outcome> {
    let ds = &run.meta_test[0];
    let start = Instant::now();
    let mut done = 0;
    let mut failures = Vec::new();
    for n_ensemble in [1, 4, 8, 16, 32] {
        for optimization in [Optimization::None, Optimization::Optimize, Optimization::EnsembleOptimize] {
            for nn_bias in [true, false] {
                let icfg = InferenceConfig {
                    n_ensemble,
                    optimization,
                    nn_bias,
                    ..single_pass(run.seed)
                };
                let outcome = fit(&ds.train, &run.trained, &run.hypernet, &icfg)
                    .and_then(|m| predict_proba(&m, &ds.test.x));
                match outcome {
                    Ok(p) if p.as_slice().iter().all(|v| v.is_finite()) => done += 1,
                    Ok(_) => failures.push(format!("{n_ensemble}/{}/{nn_bias}: non-finite", optimization.as_str())),
                    Err(e) => failures.push(format!("{n_ensemble}/{}/{nn_bias}: {e}", optimization.as_str())),
                }
            }
        }
    }
    Ok(Outcome::new(
        failures.is_empty(),
        format!(
            "{done}/30 combinations completed in {:.1}s{}",
            start.elapsed().as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!(" [{}]", failures.join("; ")) }
        ),
    ))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut runs = Runs {
        full: Vec::new(),
        no_rf_pca: None,
        random_main: None,
    };
    let criteria: [(usize, &str); 9] = [
        (1, "gradient fidelity"),
        (2, "synthetic meta-learning"),
        (3, "ablation direction"),
        (4, "ensemble trend"),
        (5, "fine-tuning"),
        (6, "invariance suites"),
        (7, "oracle equivalence"),
        (8, "persistence"),
        (9, "search-space conformance"),
    ];
    let mut failed = 0;
    for (n, name) in criteria {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = match n {
            1 => gradient_fidelity(),
            2 => meta_learning(&mut runs),
            3 => ablation_direction(&mut runs),
            4 => ensemble_trend(&mut runs),
            5 => fine_tuning(&mut runs),
            6 => runs.full().and_then(|r| invariances(&r[0].trained)),
            7 => oracle_equivalence(),
            8 => runs.full().and_then(|r| persistence(&r[0])),
            _ => runs.full().and_then(|r| search_space(&r[0])),
        };
        let outcome = outcome.unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        if !outcome.pass {
            failed += 1;
        }
        println!(
            "{} criterion {n} ({name}): {} [{:.0}s]",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    // Supporting checks on the trained runs, reported after the criteria.
    if wanted(2) {
        let checks: [(&str, fn(&mut Runs) -> Result<Outcome>); 2] = [
            ("meta-val improves on step 0", meta_val_improves),
            ("in-sample support accuracy", in_sample_support),
        ];
        for (name, check) in checks {
            let outcome = check(&mut runs).unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
            if !outcome.pass {
                failed += 1;
            }
            println!("{} check ({name}): {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) or check(s) failed");
        std::process::exit(1);
    }
}
