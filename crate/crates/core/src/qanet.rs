//! Prompt-conditioned quality network.
//!
//! A patch-embedding stem feeds four convolutional blocks; before each block
//! an adapter adds a resampled copy of the prompt. Each scale is pooled and
//! projected to a shared width, mixed with per-frame attention weights
//! computed from the prompt, and scored by a small MLP.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, Linear, MapFn};
use crate::numerics::{Graph, Real, Tensor, Var};

pub const SCALES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaConfig {
    /// Patch side of the stem; the first scale lives at `H/stem_patch`.
    pub stem_patch: usize,
    pub widths: [usize; SCALES],
    pub fused_dim: usize,
    pub head_hidden: usize,
    pub attention_hidden: usize,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            stem_patch: 4,
            widths: [16, 32, 64, 128],
            fused_dim: 64,
            head_hidden: 32,
            attention_hidden: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub conv1: Conv<P>,
    pub conv2: Conv<P>,
    /// Halve the resolution on entry.
    pub downsample: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<P> {
    pub down: Conv<P>,
    pub proj: Conv<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaParams<P> {
    pub stem: Conv<P>,
    pub blocks: Vec<Block<P>>,
    pub adapters: Vec<Adapter<P>>,
    pub wg1: Linear<P>,
    pub wg2: Linear<P>,
    pub projections: Vec<Linear<P>>,
    pub head1: Linear<P>,
    pub head2: Linear<P>,
}

impl<P> QaParams<P> {
    pub fn map<'p, Q>(&'p self, prefix: &str, f: &mut MapFn<'_, 'p, P, Q>) -> QaParams<Q> {
        let stem = self.stem.map(&format!("{prefix}.stem"), f);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| Block {
                conv1: b.conv1.map(&format!("{prefix}.block{i}.conv1"), f),
                conv2: b.conv2.map(&format!("{prefix}.block{i}.conv2"), f),
                downsample: b.downsample,
            })
            .collect();
        let adapters = self
            .adapters
            .iter()
            .enumerate()
            .map(|(i, a)| Adapter {
                down: a.down.map(&format!("{prefix}.adapter{i}.down"), f),
                proj: a.proj.map(&format!("{prefix}.adapter{i}.proj"), f),
            })
            .collect();
        let wg1 = self.wg1.map(&format!("{prefix}.wg1"), f);
        let wg2 = self.wg2.map(&format!("{prefix}.wg2"), f);
        let projections = self
            .projections
            .iter()
            .enumerate()
            .map(|(i, p)| p.map(&format!("{prefix}.proj{i}"), f))
            .collect();
        QaParams {
            stem,
            blocks,
            adapters,
            wg1,
            wg2,
            projections,
            head1: self.head1.map(&format!("{prefix}.head1"), f),
            head2: self.head2.map(&format!("{prefix}.head2"), f),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut P)) {
        self.stem.visit_mut(f);
        for b in &mut self.blocks {
            b.conv1.visit_mut(f);
            b.conv2.visit_mut(f);
        }
        for a in &mut self.adapters {
            a.down.visit_mut(f);
            a.proj.visit_mut(f);
        }
        self.wg1.visit_mut(f);
        self.wg2.visit_mut(f);
        for p in &mut self.projections {
            p.visit_mut(f);
        }
        self.head1.visit_mut(f);
        self.head2.visit_mut(f);
    }
}

impl<T: Real> QaParams<Tensor<T>> {
    /// `prompt_stride` is the ratio between the prompt grid and the stem grid
    /// (`stem_patch / tpg patch`), so adapter `i` downsamples by
    /// `prompt_stride · 2^(i−1)` for `i ≥ 1`.
    pub fn init(rng: &mut ChaCha8Rng, cfg: &QaConfig, in_channels: usize, prompt_channels: usize, prompt_stride: usize) -> Self {
        let stem_out = cfg.widths[0];
        let stem = Conv::patch(rng, in_channels, stem_out, cfg.stem_patch);
        let mut blocks = Vec::with_capacity(SCALES);
        let mut adapters = Vec::with_capacity(SCALES);
        let mut cin = stem_out;
        let mut stride = prompt_stride;
        for (i, &cout) in cfg.widths.iter().enumerate() {
            adapters.push(Adapter {
                down: Conv::init(rng, prompt_channels, cin, stride, stride, 0),
                proj: Conv::init(rng, cin, cin, 1, 1, 0),
            });
            blocks.push(Block {
                conv1: Conv::same3(rng, cin, cout),
                conv2: Conv::same3(rng, cout, cout),
                downsample: i > 0,
            });
            if i > 0 {
                stride *= 2;
            }
            cin = cout;
        }
        QaParams {
            stem,
            blocks,
            adapters,
            wg1: Linear::init(rng, prompt_channels, cfg.attention_hidden),
            wg2: Linear::init(rng, cfg.attention_hidden, SCALES),
            projections: cfg.widths.iter().map(|&w| Linear::init(rng, w, cfg.fused_dim)).collect(),
            head1: Linear::init(rng, cfg.fused_dim, cfg.head_hidden),
            head2: Linear::init(rng, cfg.head_hidden, 1),
        }
    }

    /// Makes every adapter output exactly zero.
    pub fn zero_adapters(&mut self) {
        for a in &mut self.adapters {
            a.proj.weight.data_mut().fill(T::zero());
            a.proj.bias.data_mut().fill(T::zero());
        }
    }
}

#[derive(Clone, Debug)]
pub struct QaActivations {
    pub features: [Var; SCALES],
    pub weights: Var,
    pub projected: [Var; SCALES],
    pub fused: Var,
    pub scores: Var,
}

/// `F_i = Block_i(F_{i−1} + Adapter_i(P))`, `F_0 = stem(B)`. With no prompt the
/// adapters are skipped entirely.
pub fn extract_features<T: Real>(
    g: &mut Graph<T>,
    params: &QaParams<Var>,
    frames: Var,
    prompt: Option<Var>,
) -> Result<[Var; SCALES]> {
    let mut x = params.stem.forward(g, frames)?;
    let mut feats = Vec::with_capacity(SCALES);
    for (block, adapter) in params.blocks.iter().zip(&params.adapters) {
        if let Some(p) = prompt {
            let a = adapter.down.forward(g, p)?;
            let a = adapter.proj.forward(g, a)?;
            if g.shape(a) != g.shape(x) {
                return Err(Error::dim(
                    "extract_features",
                    "adapter output vs block input",
                    format!("{:?} vs {:?}", g.shape(a), g.shape(x)),
                ));
            }
            x = g.add(x, a)?;
        }
        if block.downsample {
            x = g.avg_pool2(x)?;
        }
        let h = block.conv1.forward(g, x)?;
        let h = g.relu(h);
        let h = block.conv2.forward(g, h)?;
        x = g.relu(h);
        feats.push(x);
    }
    Ok(feats.try_into().expect("four scales"))
}

/// Attention logits `E_wg(GAP(P))`, `T×4`.
pub fn attention_logits<T: Real>(g: &mut Graph<T>, params: &QaParams<Var>, prompt: Var) -> Result<Var> {
    let pooled = g.global_avg_pool(prompt)?;
    let h = params.wg1.forward(g, pooled)?;
    let h = g.relu(h);
    params.wg2.forward(g, h)
}

/// Per-frame softmax of the attention logits.
pub fn attention_weights<T: Real>(g: &mut Graph<T>, params: &QaParams<Var>, prompt: Var) -> Result<Var> {
    let logits = attention_logits(g, params, prompt)?;
    g.softmax(logits, 1)
}

/// Pool-and-project each scale, then `Σ_k w[:, k] · proj_k`.
pub fn fuse<T: Real>(
    g: &mut Graph<T>,
    params: &QaParams<Var>,
    features: &[Var; SCALES],
    weights: Var,
) -> Result<([Var; SCALES], Var)> {
    let t = g.shape(weights)[0];
    let mut projected = Vec::with_capacity(SCALES);
    let mut fused = None;
    for (k, (&f, proj)) in features.iter().zip(&params.projections).enumerate() {
        let pooled = g.global_avg_pool(f)?;
        let p = proj.forward(g, pooled)?;
        projected.push(p);
        let wk = g.select(weights, 1, &[k])?;
        let wk = g.reshape(wk, &[t])?;
        let term = g.scale_by(p, wk)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok((projected.try_into().expect("four scales"), fused.expect("nonempty")))
}

/// Unsquashed per-frame score, shape `[T]`.
pub fn predict_scores<T: Real>(g: &mut Graph<T>, params: &QaParams<Var>, fused: Var) -> Result<Var> {
    let t = g.shape(fused)[0];
    let h = params.head1.forward(g, fused)?;
    let h = g.relu(h);
    let s = params.head2.forward(g, h)?;
    g.reshape(s, &[t])
}

pub fn forward_qa<T: Real>(g: &mut Graph<T>, params: &QaParams<Var>, frames: Var, prompt: Var) -> Result<QaActivations> {
    let features = extract_features(g, params, frames, Some(prompt))?;
    let weights = attention_weights(g, params, prompt)?;
    let (projected, fused) = fuse(g, params, &features, weights)?;
    let scores = predict_scores(g, params, fused)?;
    Ok(QaActivations {
        features,
        weights,
        projected,
        fused,
        scores,
    })
}
