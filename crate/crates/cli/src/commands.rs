use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use hyperfast::data::LabelVocab;
use hyperfast::gradcheck::{self, GradcheckSetup, Precision};
use hyperfast::inference::{self, balanced_accuracy, InferenceConfig, Optimization};
use hyperfast::meta::{meta_train as run_meta_train, Corpus, Dataset, LogRecord, Role};
use hyperfast::persist::{self, FittedBundle, ModelFile};
use hyperfast::Error;

use crate::config::TrainFile;
use crate::tabular::{self, ROW_ID};
use crate::{EvalArgs, FitArgs, GradcheckArgs, MetaTrainArgs, OptimizationArg, PrecisionArg, PredictArgs, Toggle};

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn context(what: impl std::fmt::Display) -> impl FnOnce(Error) -> Failure {
    move |e| Failure {
        code: 1,
        message: format!("{what}: {e}"),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// meta-train
// ---------------------------------------------------------------------------

fn load_dataset(dir: &Path, label: Option<&str>, categorical: &[String]) -> hyperfast::Result<(Role, Dataset)> {
    let role_text = fs::read_to_string(dir.join("role"))
        .map_err(|e| Error::Corpus(format!("cannot read role file: {e}")))?;
    let role = Role::parse(&role_text)?;
    let train = tabular::read_csv(&dir.join("train.csv"))?;
    let test = tabular::read_csv(&dir.join("test.csv"))?;
    let label = tabular::label_column(&train, label)?;
    let vocab = LabelVocab::from_names(train.column(&label)?.into_iter().chain(test.column(&label)?))?;
    let fitted = tabular::load_training(&train, Some(&label), categorical)?;
    // Re-encode with the joint vocabulary so both parts share class indices.
    let mut train_part = fitted.data;
    train_part.y = tabular::encode_labels(&train, &label, &vocab)?;
    let test_part = tabular::apply_fitted(&test, &fitted.standardizer, Some((&label, &vocab)))?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((
        role,
        Dataset {
            name,
            train: train_part,
            test: test_part,
        },
    ))
}

pub fn load_corpus(dir: &Path, label: Option<&str>, categorical: &[String]) -> Result<Corpus, Failure> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Failure::usage(format!("corpus directory {}: {e}", dir.display())))?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    let mut meta_train = Vec::new();
    let mut meta_val = Vec::new();
    for path in entries {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let (role, ds) = load_dataset(&path, label, categorical).map_err(context(format!("dataset `{name}`")))?;
        match role {
            Role::MetaTrain => meta_train.push(ds),
            Role::MetaVal => meta_val.push(ds),
        }
    }
    if meta_train.is_empty() {
        return Err(Failure::usage("corpus has no meta-train dataset"));
    }
    if meta_val.is_empty() {
        return Err(Failure::usage("corpus has no meta-val dataset"));
    }
    Ok(Corpus::new(meta_train, meta_val)?)
}

pub fn meta_train(args: &MetaTrainArgs) -> CmdResult {
    let file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
            TrainFile::parse(&text).map_err(|e| Failure::usage(e.to_string()))?
        }
        None => TrainFile::default(),
    };
    let (mut cfg, label, categorical) = file.into_config().map_err(|e| Failure::usage(e.to_string()))?;
    if let Some(steps) = args.steps {
        cfg.total_steps = steps;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let corpus = load_corpus(&args.corpus, label.as_deref(), &categorical)?;
    let mut log_file = match &args.log {
        Some(p) => Some(std::io::BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    let mut write_err = None;
    let ckpt = run_meta_train(&corpus, &cfg, &mut |r: &LogRecord| {
        if r.meta_val.is_some() {
            eprintln!("{r}");
        }
        if let Some(f) = log_file.as_mut() {
            if let Err(e) = writeln!(f, "{r}") {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    persist::encode_checkpoint(&ckpt, &cfg.hypernet).save(&args.out)?;
    println!("meta_val={:.6} step={}", ckpt.meta_val_score, ckpt.step);
    Ok(())
}

// ---------------------------------------------------------------------------
// fit / predict
// ---------------------------------------------------------------------------

pub fn fit(args: &FitArgs) -> CmdResult {
    let file = ModelFile::load(&args.model).map_err(context(args.model.display()))?;
    let (params, hcfg) = persist::decode_params(&file).map_err(context(args.model.display()))?;
    let table = tabular::read_csv(&args.train)?;
    let train = tabular::load_training(&table, args.label.as_deref(), &args.categorical)?;
    let icfg = InferenceConfig {
        n_ensemble: args.n_ensemble,
        batch_size: args.batch_size,
        nn_bias: args.nn_bias == Toggle::On,
        optimization: match args.optimization {
            OptimizationArg::None => Optimization::None,
            OptimizationArg::Optimize => Optimization::Optimize,
            OptimizationArg::EnsembleOptimize => Optimization::EnsembleOptimize,
        },
        optimize_steps: args.optimize_steps,
        ft_learning_rate: args.ft_learning_rate,
        plateau_factor: args.plateau_factor,
        plateau_patience: args.plateau_patience,
        feature_bag_width: args.feature_bag_width,
        seed: args.seed,
    };
    let model = inference::fit(&train.data, &params, &hcfg, &icfg)?;
    for w in model.warnings() {
        eprintln!("warning: {w}");
    }
    let bundle = FittedBundle {
        model,
        standardizer: train.standardizer,
        label_column: train.label_column,
        labels: train.labels.names().to_vec(),
    };
    persist::encode_fitted(&bundle).save(&args.out)?;
    Ok(())
}

pub fn predict(args: &PredictArgs) -> CmdResult {
    let file = ModelFile::load(&args.model).map_err(context(args.model.display()))?;
    let bundle = persist::decode_fitted(&file).map_err(context(args.model.display()))?;
    let table = tabular::read_csv(&args.data)?;
    let ids = tabular::row_ids(&table);
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header = vec![ROW_ID.to_string(), "predicted_class_label".to_string()];
    header.extend(bundle.labels.iter().cloned());
    out.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
    if !table.rows.is_empty() {
        let x = tabular::apply_fitted(&table, &bundle.standardizer, None).map_err(context(args.data.display()))?;
        let proba = inference::predict_proba(&bundle.model, &x.x)?;
        for (i, id) in ids.iter().enumerate() {
            let row = proba.row(i);
            let best = hyperfast::mainnet::argmax(row);
            let mut record = vec![id.clone(), bundle.labels[best].clone()];
            record.extend(row.iter().map(|p| p.to_string()));
            out.write_record(&record).map_err(|e| Error::Csv(e.to_string()))?;
        }
    }
    let bytes = out.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    match &args.out {
        Some(path) => write_atomic(path, &bytes)?,
        None => std::io::stdout().write_all(&bytes)?,
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn eval(args: &EvalArgs) -> CmdResult {
    let preds = tabular::read_csv(&args.predictions)?;
    let truth = tabular::read_csv(&args.truth)?;
    let label = tabular::label_column(&truth, args.label.as_deref())?;
    let predicted = preds.column("predicted_class_label")?;
    let pred_ids = tabular::row_ids(&preds);
    let truth_ids = tabular::row_ids(&truth);
    let mut by_id = BTreeMap::new();
    for (id, p) in pred_ids.iter().zip(&predicted) {
        if by_id.insert(id.as_str(), p.trim()).is_some() {
            return Err(Error::Schema(format!("duplicate row_id `{id}` in predictions")).into());
        }
    }
    if pred_ids.len() != truth_ids.len() {
        return Err(Error::Schema(format!(
            "{} predictions for {} truth rows",
            pred_ids.len(),
            truth_ids.len()
        ))
        .into());
    }
    let truth_labels = truth.column(&label)?;
    let mut names: Vec<String> = Vec::new();
    let mut index = |s: &str| match names.iter().position(|n| n == s) {
        Some(k) => k,
        None => {
            names.push(s.to_string());
            names.len() - 1
        }
    };
    let mut y_true = Vec::with_capacity(truth_ids.len());
    let mut y_pred = Vec::with_capacity(truth_ids.len());
    for (id, t) in truth_ids.iter().zip(truth_labels) {
        let p = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Schema(format!("row_id `{id}` has no prediction")))?;
        y_true.push(index(t.trim()));
        y_pred.push(index(p));
    }
    println!("{:.6}", balanced_accuracy(&y_true, &y_pred)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub fn gradcheck(args: &GradcheckArgs) -> CmdResult {
    let setup = GradcheckSetup {
        seed: args.seed,
        ..GradcheckSetup::default()
    };
    let precision = match args.precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    };
    let report = gradcheck::run(&setup, precision)?;
    if args.verbose {
        for t in &report.tensors {
            println!("{:<28} {:.3e}", t.name, t.rel_error);
        }
    }
    println!("max_rel_error={:.6e}", report.max_rel_error);
    if report.max_rel_error >= args.threshold {
        return Err(Failure {
            code: 1,
            message: format!(
                "max relative error {:.3e} is not below the threshold {:.3e}",
                report.max_rel_error, args.threshold
            ),
        });
    }
    Ok(())
}
