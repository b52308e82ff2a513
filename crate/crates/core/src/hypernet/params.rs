use rand::Rng;

use super::HyperNetConfig;
use crate::linalg::Real;
use crate::mainnet::Dense;

/// Trainable parameters of the hypernetwork.
///
/// Module `l` (one per main-network layer) is
/// `input_proj[l] → ReLU → trunk → head[l]`; hidden-layer modules add
/// `emitters[l]` after mean pooling. The trunk is stored once and used by
/// every module.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperNetParams<T: Real = f64> {
    pub input_proj: Vec<Dense<T>>,
    pub trunk: Vec<Dense<T>>,
    /// Private trunk of the classifier module; empty when it shares `trunk`.
    pub classifier_trunk: Vec<Dense<T>>,
    pub heads: Vec<Dense<T>>,
    pub emitters: Vec<Dense<T>>,
    /// One scalar per nearest-neighbour stage.
    pub nn_bias: Vec<T>,
}

/// Which dense layer inside [`HyperNetParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Slot {
    InputProj(usize),
    Trunk(usize),
    ClassifierTrunk(usize),
    Head(usize),
}

impl<T: Real> HyperNetParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &HyperNetConfig, rng: &mut R) -> Self {
        let (l_count, h, p) = (cfg.n_layers, cfg.h_hn, cfg.n_pc);
        let input_proj = (0..l_count)
            .map(|_| Dense::uniform(cfg.module_input_width(), h, rng))
            .collect();
        let trunk = (0..cfg.trunk_depth).map(|_| Dense::uniform(h, h, rng)).collect();
        let classifier_trunk = if cfg.classifier_shares_trunk {
            Vec::new()
        } else {
            (0..cfg.trunk_depth).map(|_| Dense::uniform(h, h, rng)).collect()
        };
        let heads = (0..l_count)
            .map(|l| {
                let out = if l + 1 == l_count { p + 1 } else { h };
                Dense::uniform(h, out, rng)
            })
            .collect();
        let emitters = (0..l_count - 1)
            .map(|_| Dense::uniform(h, p * p + p, rng))
            .collect();
        Self {
            input_proj,
            trunk,
            classifier_trunk,
            heads,
            emitters,
            nn_bias: vec![T::zero(); l_count],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            input_proj: self.input_proj.iter().map(Dense::zeros_like).collect(),
            trunk: self.trunk.iter().map(Dense::zeros_like).collect(),
            classifier_trunk: self.classifier_trunk.iter().map(Dense::zeros_like).collect(),
            heads: self.heads.iter().map(Dense::zeros_like).collect(),
            emitters: self.emitters.iter().map(Dense::zeros_like).collect(),
            nn_bias: vec![T::zero(); self.nn_bias.len()],
        }
    }

    pub fn cast<U: Real>(&self) -> HyperNetParams<U> {
        let c = |v: &Vec<Dense<T>>| v.iter().map(Dense::cast).collect();
        HyperNetParams {
            input_proj: c(&self.input_proj),
            trunk: c(&self.trunk),
            classifier_trunk: c(&self.classifier_trunk),
            heads: c(&self.heads),
            emitters: c(&self.emitters),
            nn_bias: self.nn_bias.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub(crate) fn slot(&self, s: Slot) -> &Dense<T> {
        match s {
            Slot::InputProj(i) => &self.input_proj[i],
            Slot::Trunk(i) => &self.trunk[i],
            Slot::ClassifierTrunk(i) => &self.classifier_trunk[i],
            Slot::Head(i) => &self.heads[i],
        }
    }

    pub(crate) fn slot_mut(&mut self, s: Slot) -> &mut Dense<T> {
        match s {
            Slot::InputProj(i) => &mut self.input_proj[i],
            Slot::Trunk(i) => &mut self.trunk[i],
            Slot::ClassifierTrunk(i) => &mut self.classifier_trunk[i],
            Slot::Head(i) => &mut self.heads[i],
        }
    }

    /// Named tensors with their shapes, in a fixed canonical order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (group, list) in self.dense_groups() {
            for (i, d) in list.iter().enumerate() {
                out.push((
                    format!("{group}.{i}.weight"),
                    vec![d.fan_in(), d.fan_out()],
                    d.weight.as_slice(),
                ));
                out.push((format!("{group}.{i}.bias"), vec![d.fan_out()], d.bias.as_slice()));
            }
        }
        out.push(("nn_bias".to_string(), vec![self.nn_bias.len()], self.nn_bias.as_slice()));
        out
    }

    fn dense_groups(&self) -> [(&'static str, &Vec<Dense<T>>); 5] {
        [
            ("input_proj", &self.input_proj),
            ("trunk", &self.trunk),
            ("classifier_trunk", &self.classifier_trunk),
            ("head", &self.heads),
            ("emitter", &self.emitters),
        ]
    }

    /// Mutable views over every parameter buffer, same order as
    /// [`Self::named_tensors`].
    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for list in [
            &mut self.input_proj,
            &mut self.trunk,
            &mut self.classifier_trunk,
            &mut self.heads,
            &mut self.emitters,
        ] {
            for d in list.iter_mut() {
                out.push(d.weight.as_mut_slice());
                out.push(d.bias.as_mut_slice());
            }
        }
        out.push(self.nn_bias.as_mut_slice());
        out
    }

    pub fn buffers(&self) -> Vec<&[T]> {
        self.named_tensors().into_iter().map(|(_, _, b)| b).collect()
    }

    pub fn num_params(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        let src = other.buffers();
        for (dst, src) in self.buffers_mut().into_iter().zip(src) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for buf in self.buffers_mut() {
            for v in buf {
                *v *= factor;
            }
        }
    }
}

impl HyperNetParams<f64> {
    /// Round every parameter to `f32` precision.
    pub fn quantize_f32(&mut self) {
        for buf in self.buffers_mut() {
            crate::linalg::quantize_f32(buf);
        }
    }
}
