//! TOML configuration for `meta-train`. Every key is optional; missing keys
//! keep the library defaults.
//!
//! ```toml
//! label = "class"
//! total_steps = 2000
//! accum_tasks = 25
//! learning_rate = 3e-4
//!
//! [hypernet]
//! n_pc = 32
//! d_rf = 512
//! residual = "post"
//! ```

use hyperfast::hypernet::HyperNetConfig;
use hyperfast::mainnet::ResidualMode;
use hyperfast::meta::MetaTrainConfig;
use hyperfast::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub label: Option<String>,
    pub categorical: Vec<String>,
    pub total_steps: Option<usize>,
    pub accum_tasks: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub val_every: Option<usize>,
    pub val_tasks_per_dataset: Option<usize>,
    pub seed: Option<u64>,
    pub max_support: Option<usize>,
    pub max_query: Option<usize>,
    pub hypernet: HypernetSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypernetSection {
    pub n_pc: Option<usize>,
    pub d_rf: Option<usize>,
    pub h_hn: Option<usize>,
    pub n_layers: Option<usize>,
    pub trunk_depth: Option<usize>,
    pub max_classes: Option<usize>,
    pub max_support: Option<usize>,
    pub nn_anchor_cap: Option<usize>,
    pub clip_sigma: Option<f64>,
    pub residual: Option<String>,
    pub classifier_residual: Option<bool>,
    pub concat_pca: Option<bool>,
    pub classifier_shares_trunk: Option<bool>,
    pub use_rf_pca: Option<bool>,
    pub random_main_weights: Option<bool>,
    pub nn_bias_pca: Option<bool>,
    pub nn_bias_hidden: Option<bool>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl HypernetSection {
    fn apply(self, cfg: &mut HyperNetConfig) -> Result<()> {
        set(&mut cfg.n_pc, self.n_pc);
        set(&mut cfg.d_rf, self.d_rf);
        set(&mut cfg.h_hn, self.h_hn);
        set(&mut cfg.n_layers, self.n_layers);
        set(&mut cfg.trunk_depth, self.trunk_depth);
        set(&mut cfg.max_classes, self.max_classes);
        set(&mut cfg.max_support, self.max_support);
        set(&mut cfg.nn_anchor_cap, self.nn_anchor_cap);
        set(&mut cfg.clip_sigma, self.clip_sigma);
        if let Some(r) = self.residual {
            cfg.residual = ResidualMode::parse(&r)?;
        }
        set(&mut cfg.classifier_residual, self.classifier_residual);
        set(&mut cfg.concat_pca, self.concat_pca);
        set(&mut cfg.classifier_shares_trunk, self.classifier_shares_trunk);
        set(&mut cfg.use_rf_pca, self.use_rf_pca);
        set(&mut cfg.random_main_weights, self.random_main_weights);
        set(&mut cfg.nn_bias_pca, self.nn_bias_pca);
        set(&mut cfg.nn_bias_hidden, self.nn_bias_hidden);
        Ok(())
    }
}

impl TrainFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Split into the training configuration and the CSV options.
    pub fn into_config(self) -> Result<(MetaTrainConfig, Option<String>, Vec<String>)> {
        let mut cfg = MetaTrainConfig::default();
        set(&mut cfg.total_steps, self.total_steps);
        set(&mut cfg.accum_tasks, self.accum_tasks);
        set(&mut cfg.learning_rate, self.learning_rate);
        set(&mut cfg.weight_decay, self.weight_decay);
        set(&mut cfg.val_every, self.val_every);
        set(&mut cfg.val_tasks_per_dataset, self.val_tasks_per_dataset);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.max_support, self.max_support);
        set(&mut cfg.max_query, self.max_query);
        self.hypernet.apply(&mut cfg.hypernet)?;
        cfg.validate()?;
        Ok((cfg, self.label, self.categorical))
    }
}
