//! WebAssembly bindings for the browser playground in `www/`.

pub mod playground;

use hyperfast::inference::{InferenceConfig, Optimization};
use wasm_bindgen::prelude::*;

use playground::{Playground, Point};

fn js_err(e: hyperfast::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    inner: Playground,
}

#[wasm_bindgen]
impl Demo {
    /// Fresh hypernetwork and synthetic meta-training corpus for `seed`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, total_tasks: usize) -> Result<Demo, JsError> {
        Ok(Demo {
            inner: Playground::new(u64::from(seed), total_tasks).map_err(js_err)?,
        })
    }

    /// Train on up to `tasks` more tasks. Returns
    /// `[tasks_done, total_tasks, best_meta_val, latest_meta_val]`.
    pub fn train(&mut self, tasks: usize) -> Result<Vec<f64>, JsError> {
        let p = self.inner.train(tasks).map_err(js_err)?;
        Ok(vec![
            p.tasks_done as f64,
            p.total_tasks as f64,
            p.best_meta_val,
            p.latest_meta_val,
        ])
    }

    /// Use parameters saved by `hyperfast meta-train`.
    pub fn load_params(&mut self, bytes: &[u8]) -> Result<(), JsError> {
        self.inner.load_params(bytes).map_err(js_err)
    }

    pub fn max_classes(&self) -> usize {
        self.inner.hypernet().max_classes
    }

    pub fn add_point(&mut self, x: f64, y: f64, class: usize) -> Result<(), JsError> {
        self.inner.add_point(Point { x, y, class }).map_err(js_err)
    }

    pub fn clear_points(&mut self) {
        self.inner.clear_points();
    }

    /// Points as `[x0, y0, class0, x1, ...]`.
    pub fn points(&self) -> Vec<f64> {
        self.inner
            .points()
            .iter()
            .flat_map(|p| [p.x, p.y, p.class as f64])
            .collect()
    }

    /// Generate a classifier for the points. Returns warnings, one per line.
    pub fn fit(
        &mut self,
        n_ensemble: usize,
        nn_bias: bool,
        optimization: &str,
        optimize_steps: usize,
        seed: u32,
    ) -> Result<String, JsError> {
        let icfg = InferenceConfig {
            n_ensemble,
            nn_bias,
            optimization: Optimization::parse(optimization).map_err(js_err)?,
            optimize_steps,
            seed: u64::from(seed),
            ..InferenceConfig::default()
        };
        Ok(self.inner.fit(&icfg).map_err(js_err)?.join("\n"))
    }

    /// Grid probabilities, `n_classes` values per cell, preceded by
    /// `n_classes` itself.
    pub fn surface(&self, res: usize) -> Result<Vec<f64>, JsError> {
        let (k, mut p) = self.inner.surface(res).map_err(js_err)?;
        p.insert(0, k as f64);
        Ok(p)
    }

    pub fn support_accuracy(&self) -> Result<f64, JsError> {
        self.inner.support_accuracy().map_err(js_err)
    }

    pub fn spectrum(&self) -> Result<Vec<f64>, JsError> {
        self.inner.spectrum().map_err(js_err)
    }
}
