//! Task-driven prompt generation and the heterogeneous distillation loss.
//!
//! The prompt of frame `i` is `P_i = Fea3_i − Fea3_ref`, where `Fea3` comes
//! from a shallow patch embedding, two residual blocks, and an alignment head
//! that sees each frame's features concatenated with the reference's.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, MapFn};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Lower and upper clamp on probabilities before the logs of the binary KL.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpgConfig {
    pub channels: usize,
    /// Side of the non-overlapping patches of the shallow layer; the prompt
    /// lives at `H/patch × W/patch`.
    pub patch: usize,
    pub teacher_channels: usize,
}

impl Default for TpgConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            patch: 2,
            teacher_channels: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<P> {
    pub conv1: Conv<P>,
    pub conv2: Conv<P>,
}

impl<P> ResBlock<P> {
    pub fn map<'p, Q>(&'p self, prefix: &str, f: &mut MapFn<'_, 'p, P, Q>) -> ResBlock<Q> {
        ResBlock {
            conv1: self.conv1.map(&format!("{prefix}.conv1"), f),
            conv2: self.conv2.map(&format!("{prefix}.conv2"), f),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut P)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

impl ResBlock<Var> {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpgParams<P> {
    pub shallow: Conv<P>,
    pub fe: [ResBlock<P>; 2],
    pub fa1: Conv<P>,
    pub fa2: Conv<P>,
    /// TSNet: 1×1 projection of teacher maps into the student space.
    pub tsnet: Conv<P>,
}

impl<P> TpgParams<P> {
    pub fn map<'p, Q>(&'p self, prefix: &str, f: &mut MapFn<'_, 'p, P, Q>) -> TpgParams<Q> {
        TpgParams {
            shallow: self.shallow.map(&format!("{prefix}.shallow"), f),
            fe: [
                self.fe[0].map(&format!("{prefix}.fe0"), f),
                self.fe[1].map(&format!("{prefix}.fe1"), f),
            ],
            fa1: self.fa1.map(&format!("{prefix}.fa1"), f),
            fa2: self.fa2.map(&format!("{prefix}.fa2"), f),
            tsnet: self.tsnet.map(&format!("{prefix}.tsnet"), f),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut P)) {
        self.shallow.visit_mut(f);
        for b in &mut self.fe {
            b.visit_mut(f);
        }
        self.fa1.visit_mut(f);
        self.fa2.visit_mut(f);
        self.tsnet.visit_mut(f);
    }
}

impl<T: Real> TpgParams<Tensor<T>> {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &TpgConfig, in_channels: usize) -> Self {
        let c = cfg.channels;
        TpgParams {
            shallow: Conv::patch(rng, in_channels, c, cfg.patch),
            fe: [
                ResBlock {
                    conv1: Conv::same3(rng, c, c),
                    conv2: Conv::same3(rng, c, c),
                },
                ResBlock {
                    conv1: Conv::same3(rng, c, c),
                    conv2: Conv::same3(rng, c, c),
                },
            ],
            fa1: Conv::same3(rng, 2 * c, c),
            fa2: Conv::same3(rng, c, c),
            tsnet: Conv::init(rng, cfg.teacher_channels, c, 1, 1, 0),
        }
    }
}

/// 1×1 convolution that copies channel `k` to channel `k`.
pub fn identity_projection<T: Real>(channels: usize) -> Conv<Tensor<T>> {
    Conv {
        weight: Tensor::from_fn(&[channels, channels, 1, 1], |i| {
            if i / channels == i % channels {
                T::one()
            } else {
                T::zero()
            }
        }),
        bias: Tensor::zeros(&[channels]),
        stride: 1,
        padding: 0,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PromptActivations {
    pub fea1: Var,
    pub fea2: Var,
    pub fea2_ref: Var,
    pub fea3: Var,
    pub fea3_ref: Var,
    pub prompt: Var,
}

/// Broadcasts frame `ref_index` of a `T×…` tensor to all `T` positions.
fn broadcast_ref<T: Real>(g: &mut Graph<T>, x: Var, ref_index: usize) -> Result<Var> {
    let t = g.shape(x)[0];
    if ref_index >= t {
        return Err(Error::dim("forward_prompt", "ref_index", format!("{ref_index} >= {t} frames")));
    }
    g.select(x, 0, &vec![ref_index; t])
}

pub fn forward_prompt<T: Real>(
    g: &mut Graph<T>,
    params: &TpgParams<Var>,
    frames: Var,
    ref_index: usize,
) -> Result<PromptActivations> {
    let fea1 = params.shallow.forward(g, frames)?;
    let fea1 = g.relu(fea1);
    let mut fea2 = fea1;
    for block in &params.fe {
        fea2 = block.forward(g, fea2)?;
    }
    let fea2_ref = broadcast_ref(g, fea2, ref_index)?;
    let cat = g.concat(&[fea2, fea2_ref], 1)?;
    let h = params.fa1.forward(g, cat)?;
    let h = g.relu(h);
    let fea3 = params.fa2.forward(g, h)?;
    let fea3_ref = broadcast_ref(g, fea3, ref_index)?;
    let prompt = g.sub(fea3, fea3_ref)?;
    Ok(PromptActivations {
        fea1,
        fea2,
        fea2_ref,
        fea3,
        fea3_ref,
        prompt,
    })
}

/// `(Fea_ref ⊙ Fea_i, Fea_ref − Fea_i)` for every frame `i`.
pub fn distillation_maps<T: Real>(g: &mut Graph<T>, features: Var, ref_index: usize) -> Result<(Var, Var)> {
    let r = broadcast_ref(g, features, ref_index)?;
    Ok((g.mul(r, features)?, g.sub(r, features)?))
}

/// Nearest-neighbour resize of an `N×C×H×W` tensor to `out_h×out_w`.
pub fn resize_nearest<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dim("resize_nearest", "rank", format!("expected N×C×H×W, got {s:?}")));
    }
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(nc * out_h * out_w);
    for plane in x.data().chunks(h * w).take(nc) {
        for y in 0..out_h {
            let sy = y * h / out_h;
            for xx in 0..out_w {
                out.push(plane[sy * w + xx * w / out_w]);
            }
        }
    }
    Tensor::new(vec![s[0], s[1], out_h, out_w], out)
}

/// Resizes teacher maps to the student grid, then projects them with TSNet.
pub fn tsnet_project<T: Real>(
    g: &mut Graph<T>,
    tsnet: &Conv<Var>,
    teacher_map: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let resized = resize_nearest(teacher_map, out_h, out_w)?;
    let x = g.input(resized);
    tsnet.forward(g, x)
}

/// Per-frame distribution over spatial positions of the channel-mean map,
/// clamped for the logs of the binary KL. `T×C×H×W → T×(H·W)`.
pub fn spatial_distribution<T: Real>(g: &mut Graph<T>, map: Var) -> Result<Var> {
    let s = g.shape(map).to_vec();
    if s.len() != 4 {
        return Err(Error::dim("spatial_distribution", "rank", format!("expected T×C×H×W, got {s:?}")));
    }
    let m = g.mean(map, &[1])?;
    let flat = g.reshape(m, &[s[0], s[2] * s[3]])?;
    let d = g.softmax(flat, 1)?;
    Ok(g.clamp(d, PROB_CLAMP, 1.0 - PROB_CLAMP))
}

/// Elementwise binary KL `KL(Bern(dt) ‖ Bern(ds))`, averaged over elements.
pub fn binary_kl<T: Real>(g: &mut Graph<T>, ds: Var, dt: Var) -> Result<Var> {
    let ln_ds = g.ln(ds)?;
    let ln_dt = g.ln(dt)?;
    let ct = g.affine(dt, -1.0, 1.0);
    let cs = g.affine(ds, -1.0, 1.0);
    let ln_cs = g.ln(cs)?;
    let ln_ct = g.ln(ct)?;
    let pos = g.sub(ln_dt, ln_ds)?;
    let pos = g.mul(dt, pos)?;
    let neg = g.sub(ln_ct, ln_cs)?;
    let neg = g.mul(ct, neg)?;
    let kl = g.add(pos, neg)?;
    g.mean(kl, &[])
}

/// Sum over the similarity and difference maps of the mean binary KL between
/// teacher and student spatial distributions.
pub fn distillation_loss<T: Real>(g: &mut Graph<T>, student: (Var, Var), teacher: (Var, Var)) -> Result<Var> {
    let mut total = None;
    for (s, t) in [(student.0, teacher.0), (student.1, teacher.1)] {
        if g.shape(s) != g.shape(t) {
            return Err(Error::dim(
                "distillation_loss",
                "all",
                format!("student {:?} vs teacher {:?}", g.shape(s), g.shape(t)),
            ));
        }
        let ds = spatial_distribution(g, s)?;
        let dt = spatial_distribution(g, t)?;
        let kl = binary_kl(g, ds, dt)?;
        total = Some(match total {
            None => kl,
            Some(acc) => g.add(acc, kl)?,
        });
    }
    Ok(total.expect("two map kinds"))
}

/// Full distillation term for one sequence: student maps from `Fea3`,
/// teacher maps from the projected teacher residual features.
pub fn sequence_distillation<T: Real>(
    g: &mut Graph<T>,
    params: &TpgParams<Var>,
    prompt: &PromptActivations,
    teacher_features: &Tensor<T>,
    ref_index: usize,
) -> Result<Var> {
    let s = g.shape(prompt.fea3).to_vec();
    if teacher_features.shape()[0] != s[0] {
        return Err(Error::dim(
            "sequence_distillation",
            "frames",
            format!("teacher {} vs student {}", teacher_features.shape()[0], s[0]),
        ));
    }
    let student = distillation_maps(g, prompt.fea3, ref_index)?;
    let projected = tsnet_project(g, &params.tsnet, teacher_features, s[2], s[3])?;
    let teacher = distillation_maps(g, projected, ref_index)?;
    distillation_loss(g, student, teacher)
}
