use crate::error::{Error, Result};
use crate::mainnet::ResidualMode;

/// Shape of the hypernetwork and of the networks it emits, plus the
/// architectural switches used for ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperNetConfig {
    /// Principal components kept; also the main network's hidden width.
    pub n_pc: usize,
    /// Random-feature width.
    pub d_rf: usize,
    /// Hidden width of the hypernetwork modules and shared trunk.
    pub h_hn: usize,
    /// Main network depth, classification layer included.
    pub n_layers: usize,
    /// Feed-forward layers in the shared trunk.
    pub trunk_depth: usize,
    /// Zero-padded width of the one-hot label input.
    pub max_classes: usize,
    pub max_support: usize,
    pub nn_anchor_cap: usize,
    pub clip_sigma: f64,
    pub residual: ResidualMode,
    /// Add per-class means of the previous stage to the classifier rows.
    pub classifier_residual: bool,
    /// Concatenate global and per-class PCA means to every module input.
    pub concat_pca: bool,
    /// Route the classifier module through the shared trunk; otherwise it
    /// gets a private trunk of the same shape.
    pub classifier_shares_trunk: bool,
    /// `false` replaces random features + PCA by truncation/zero padding.
    pub use_rf_pca: bool,
    /// Replace generated weights by random hidden layers and a zero
    /// classifier so predictions come from the nearest-neighbour biases only.
    pub random_main_weights: bool,
    pub nn_bias_pca: bool,
    pub nn_bias_hidden: bool,
}

impl Default for HyperNetConfig {
    fn default() -> Self {
        Self {
            n_pc: 32,
            d_rf: 512,
            h_hn: 64,
            n_layers: 3,
            trunk_depth: 2,
            max_classes: 16,
            max_support: 2048,
            nn_anchor_cap: 2048,
            clip_sigma: 4.0,
            residual: ResidualMode::PostActivation,
            classifier_residual: true,
            concat_pca: true,
            classifier_shares_trunk: true,
            use_rf_pca: true,
            random_main_weights: false,
            nn_bias_pca: true,
            nn_bias_hidden: true,
        }
    }
}

impl HyperNetConfig {
    /// Full-size settings (2^15 random features, 784 components, 1024-wide
    /// trunk, 100 classes).
    pub fn paper_scale() -> Self {
        Self {
            n_pc: 784,
            d_rf: 32768,
            h_hn: 1024,
            max_classes: 100,
            ..Self::default()
        }
    }

    /// Tiny instance used for gradient checking.
    pub fn tiny() -> Self {
        Self {
            n_pc: 4,
            d_rf: 16,
            h_hn: 8,
            max_classes: 3,
            ..Self::default()
        }
    }

    pub fn module_input_width(&self) -> usize {
        3 * self.n_pc + self.max_classes
    }

    /// Stages with nearest-neighbour biases: the PCA output and the output
    /// of every hidden layer.
    pub fn nn_stage_mask(&self) -> Vec<bool> {
        (0..self.n_layers)
            .map(|s| if s == 0 { self.nn_bias_pca } else { self.nn_bias_hidden })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_pc == 0 || self.d_rf == 0 || self.h_hn == 0 {
            return bad("n_pc, d_rf and h_hn must be positive");
        }
        if self.n_layers < 2 {
            return bad("the main network needs at least 2 layers");
        }
        if self.trunk_depth == 0 {
            return bad("trunk_depth must be at least 1");
        }
        if self.max_classes < 2 {
            return bad("max_classes must be at least 2");
        }
        if self.max_support < 2 || self.nn_anchor_cap == 0 {
            return bad("max_support must be >= 2 and nn_anchor_cap positive");
        }
        if self.clip_sigma <= 0.0 {
            return bad("clip_sigma must be positive");
        }
        Ok(())
    }
}
