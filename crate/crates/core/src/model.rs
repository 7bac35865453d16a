//! The complete scorer: prompt network plus quality network, one training
//! step, and inference.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::burstgen::CHANNELS;
use crate::error::{Error, Result};
use crate::nn::{Binder, MapFn};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Real, Tensor, Var};
use crate::objectives::{self, LossConfig, LossValues};
use crate::qanet::{self, QaActivations, QaConfig, QaParams};
use crate::tpgnet::{self, PromptActivations, TpgConfig, TpgParams};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub tpg: TpgConfig,
    pub qa: QaConfig,
}

impl ModelConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let (tp, sp) = (self.tpg.patch, self.qa.stem_patch);
        if tp == 0 || sp == 0 || !sp.is_multiple_of(tp) {
            return Err(Error::Config(alloc::format!(
                "stem patch {sp} must be a positive multiple of the prompt patch {tp}"
            )));
        }
        // four scales: the stem grid must survive three halvings
        let unit = sp * 8;
        if !height.is_multiple_of(unit) || !width.is_multiple_of(unit) {
            return Err(Error::Config(alloc::format!(
                "frame size {height}×{width} must be divisible by {unit}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<P> {
    pub tpg: TpgParams<P>,
    pub qa: QaParams<P>,
}

impl<P> Model<P> {
    /// Canonical parameter order: prompt network, then quality network.
    pub fn map<'p, Q>(&'p self, f: &mut MapFn<'_, 'p, P, Q>) -> Model<Q> {
        Model {
            tpg: self.tpg.map("tpg", f),
            qa: self.qa.map("qa", f),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut P)) {
        self.tpg.visit_mut(f);
        self.qa.visit_mut(f);
    }
}

impl<T: Real> Model<Tensor<T>> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tpg = TpgParams::init(&mut rng, &cfg.tpg, CHANNELS);
        let qa = QaParams::init(
            &mut rng,
            &cfg.qa,
            CHANNELS,
            cfg.tpg.channels,
            cfg.qa.stem_patch / cfg.tpg.patch,
        );
        Model { tpg, qa }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.visit_mut(&mut |t| out.push(t));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Binds every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> (Model<Var>, Vec<Var>) {
        let mut binder = Binder::new(g);
        let bound = self.map(&mut |_, t| binder.bind(t));
        (bound, binder.finish())
    }

    pub fn cast<U: Real>(&self) -> Model<Tensor<U>> {
        self.map(&mut |_, t| t.cast::<U>())
    }

    /// Replaces every parameter, in canonical order.
    pub fn load_tensors(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(Error::Format(alloc::format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (i, (slot, v)) in slots.iter_mut().zip(values).enumerate() {
            if slot.shape() != v.shape() {
                return Err(Error::Format(alloc::format!(
                    "parameter {i}: shape {:?}, expected {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
            **slot = v;
        }
        Ok(())
    }
}

/// One training example: a whole sequence.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub frames: &'a Tensor<f32>,
    pub ref_index: usize,
    /// Teacher residual features; `None` skips distillation.
    pub teacher: Option<&'a Tensor<f32>>,
    pub scores: &'a [f64],
    pub groups: &'a [Vec<usize>],
}

pub struct ForwardPass {
    pub prompt: PromptActivations,
    pub qa: QaActivations,
    pub l_dist: Option<Var>,
    pub l_mrg: Var,
    pub l_fnl: Var,
    pub n_pairs: usize,
}

/// Fails with [`Error::Diverged`] naming the first non-finite tensor.
fn guard<T: Real>(g: &Graph<T>, named: &[(&str, Var)]) -> Result<()> {
    match named.iter().find(|(_, v)| !g.value(*v).is_finite()) {
        Some((name, _)) => Err(Error::Diverged(String::from(*name))),
        None => Ok(()),
    }
}

/// Forward pass with every intermediate checked for finiteness in
/// evaluation order.
pub fn forward<T: Real>(g: &mut Graph<T>, model: &Model<Var>, ex: &Example<'_>, loss: &LossConfig) -> Result<ForwardPass> {
    let frames = g.input(ex.frames.cast::<T>());
    guard(g, &[("frames", frames)])?;
    let prompt = tpgnet::forward_prompt(g, &model.tpg, frames, ex.ref_index)?;
    guard(
        g,
        &[
            ("fea1", prompt.fea1),
            ("fea2", prompt.fea2),
            ("fea3", prompt.fea3),
            ("prompt", prompt.prompt),
        ],
    )?;
    let l_dist = match ex.teacher {
        Some(t) => {
            let d = tpgnet::sequence_distillation(g, &model.tpg, &prompt, &t.cast::<T>(), ex.ref_index)?;
            guard(g, &[("l_dist", d)])?;
            Some(d)
        }
        None => None,
    };
    let features = qanet::extract_features(g, &model.qa, frames, Some(prompt.prompt))?;
    guard(
        g,
        &[("F1", features[0]), ("F2", features[1]), ("F3", features[2]), ("F4", features[3])],
    )?;
    let weights = qanet::attention_weights(g, &model.qa, prompt.prompt)?;
    let (projected, fused) = qanet::fuse(g, &model.qa, &features, weights)?;
    guard(g, &[("fused", fused)])?;
    let scores = qanet::predict_scores(g, &model.qa, fused)?;
    guard(g, &[("scores", scores)])?;
    let qa = QaActivations {
        features,
        weights,
        projected,
        fused,
        scores,
    };
    let (l_mrg, n_pairs) = objectives::margin_loss(g, qa.scores, ex.scores, ex.groups)?;
    let l_fnl = objectives::total_loss_var(g, l_dist, l_mrg, loss)?;
    guard(g, &[("l_fnl", l_fnl)])?;
    Ok(ForwardPass {
        prompt,
        qa,
        l_dist,
        l_mrg,
        l_fnl,
        n_pairs,
    })
}

/// Loss values and gradients (canonical order) for one example. A loss that
/// depends on no parameter yields all-zero gradients.
pub fn loss_and_grads<T: Real>(
    model: &Model<Tensor<T>>,
    ex: &Example<'_>,
    loss: &LossConfig,
) -> Result<(LossValues, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let (bound, vars) = model.bind(&mut g);
    let pass = forward(&mut g, &bound, ex, loss)?;
    let values = LossValues {
        l_dist: pass.l_dist.map_or(0.0, |d| g.value(d).item().as_f64()),
        l_mrg: g.value(pass.l_mrg).item().as_f64(),
        l_fnl: g.value(pass.l_fnl).item().as_f64(),
        n_pairs: pass.n_pairs,
        n_groups: ex.groups.len(),
    };
    match g.backward(pass.l_fnl) {
        Ok(()) | Err(Error::Detached) => {}
        Err(e) => return Err(e),
    }
    let grads: Vec<Tensor<T>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    for ((name, _), gr) in model.named().iter().zip(&grads) {
        if !gr.is_finite() {
            return Err(Error::Diverged(alloc::format!("gradient of {name}")));
        }
    }
    Ok((values, grads))
}

/// Predicted per-frame scores.
pub fn predict<T: Real>(model: &Model<Tensor<T>>, frames: &Tensor<f32>, ref_index: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = model.map(&mut |_, t| g.input(t.clone()));
    let x = g.input(frames.cast::<T>());
    let prompt = tpgnet::forward_prompt(&mut g, &bound.tpg, x, ref_index)?;
    let qa = qanet::forward_qa(&mut g, &bound.qa, x, prompt.prompt)?;
    let scores = g.value(qa.scores).to_f64_vec();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Diverged("scores".into()));
    }
    Ok(scores)
}

/// Parameters plus optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer<T> {
    pub model: Model<Tensor<T>>,
    pub adam: AdamState<T>,
    pub adam_cfg: AdamConfig,
    pub loss_cfg: LossConfig,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<Tensor<T>>, adam_cfg: AdamConfig, loss_cfg: LossConfig) -> Self {
        let adam = AdamState::new(&model.tensors());
        Self {
            model,
            adam,
            adam_cfg,
            loss_cfg,
        }
    }

    pub fn step(&mut self, ex: &Example<'_>) -> Result<LossValues> {
        Ok(self.step_batch(core::slice::from_ref(ex))?[0])
    }

    /// One Adam update on the mean gradient over `batch`.
    pub fn step_batch(&mut self, batch: &[Example<'_>]) -> Result<Vec<LossValues>> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut values = Vec::with_capacity(batch.len());
        let mut total: Option<Vec<Tensor<T>>> = None;
        for ex in batch {
            let (v, grads) = loss_and_grads(&self.model, ex, &self.loss_cfg)?;
            values.push(v);
            total = Some(match total {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x = *x + *y;
                        }
                    }
                    acc
                }
            });
        }
        let mut grads = total.expect("nonempty batch");
        if batch.len() > 1 {
            let inv = T::of_f64(1.0 / batch.len() as f64);
            for g in &mut grads {
                for x in g.data_mut() {
                    *x = *x * inv;
                }
            }
        }
        let mut params = self.model.tensors_mut();
        adam_step(&mut params, &grads, &mut self.adam, &self.adam_cfg)?;
        Ok(values)
    }
}
