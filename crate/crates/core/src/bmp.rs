//! Bidirectional motion prediction: temporal flipping, 180° attention
//! rotation, the backward-prediction loss, backward fine-tuning and
//! forward/backward noise fusion.

use std::collections::BTreeSet;

use candle_core::Tensor;
use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::{stack_videos, AttentionMap, Conditioning, Denoiser, ForwardOpts};
use crate::diffusion::{add_noise, LatentVideo, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::nn::{self, AdamW, AdamWConfig, View};
use crate::text::TextEmbedding;
use crate::training::{draw_noise, step_rng, TrainingVideo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BmpConfig {
    pub enabled: bool,
    /// Fusion weight of the backward prediction.
    pub lambda: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for BmpConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: 0.5,
            steps: 1000,
            lr: 1e-3,
            batch: 2,
        }
    }
}

impl BmpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("bmp.lambda {} outside [0, 1]", self.lambda)));
        }
        if self.batch == 0 {
            return Err(invalid("bmp.batch must be positive"));
        }
        Ok(())
    }
}

/// Reverse the frame order.
pub fn flip_temporal(z: &LatentVideo) -> LatentVideo {
    LatentVideo::new(z.data().slice(s![..;-1, .., .., ..]).to_owned()).expect("flip preserves validity")
}

/// `A'[i][j] = A[N-1-i][N-1-j]` for every head.
pub fn rotate180(a: &AttentionMap) -> Result<AttentionMap> {
    let (_, r, c) = a.weights.dim();
    if r != c {
        return Err(invalid(format!("attention map must be square, got {r}x{c}")));
    }
    let rotated: Array3<f64> = a.weights.slice(s![.., ..;-1, ..;-1]).as_standard_layout().into_owned();
    AttentionMap::new(rotated)
}

/// `(1-λ)·fwd + λ·flip(bwd)`, evaluated as `fwd + λ·(flip(bwd) - fwd)` so a
/// self-consistent pair is returned unchanged.
pub fn fuse_noise(eps_fwd: &LatentVideo, eps_bwd: &LatentVideo, lambda: f64) -> Result<LatentVideo> {
    if eps_fwd.shape() != eps_bwd.shape() {
        return Err(Error::ShapeMismatch {
            expected: eps_fwd.shape().to_vec(),
            got: eps_bwd.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("fusion weight {lambda} outside [0, 1]")));
    }
    if lambda == 0.0 {
        return Ok(eps_fwd.clone());
    }
    let back = flip_temporal(eps_bwd);
    let data = ndarray::Zip::from(eps_fwd.data())
        .and(back.data())
        .map_collect(|f, b| f + lambda * (b - f));
    LatentVideo::new(data)
}

/// `‖flip(eps) − pred‖²` for an already computed backward prediction.
pub fn bmp_loss_value(pred: &LatentVideo, eps: &LatentVideo) -> Result<f64> {
    let target = flip_temporal(eps);
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: target.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    let v: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (t - p).powi(2))
        .sum();
    if !v.is_finite() {
        return Err(Error::NonFinite("bmp loss".into()));
    }
    Ok(v)
}

/// One backward-motion training example.
#[derive(Debug, Clone, Copy)]
pub struct BmpExample<'a> {
    pub z0: &'a LatentVideo,
    pub ctx: &'a [TextEmbedding],
    pub cond: &'a Conditioning,
    pub t: usize,
    pub eps: &'a LatentVideo,
}

/// Reverse a per-frame context in lockstep with the frames.
pub fn reversed_context(ctx: &[TextEmbedding]) -> Vec<TextEmbedding> {
    ctx.iter().rev().cloned().collect()
}

/// Summed squared error between the flipped noise and the rotated-attention
/// prediction on the flipped noisy latents, over a batch, as a graph node.
pub fn bmp_loss(
    model: &Denoiser,
    view: View,
    schedule: &NoiseSchedule,
    batch: &[BmpExample],
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(invalid("empty bmp batch"));
    }
    let mut z_flipped = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut ctxs = Vec::with_capacity(batch.len());
    let mut conds = Vec::with_capacity(batch.len());
    for ex in batch {
        let zt = add_noise(ex.z0, ex.eps, ex.t, schedule)?;
        z_flipped.push(flip_temporal(&zt));
        targets.push(flip_temporal(ex.eps));
        ctxs.push(reversed_context(ex.ctx));
        conds.push(ex.cond.swapped());
    }
    let reqs: Vec<_> = batch
        .iter()
        .enumerate()
        .map(|(i, ex)| crate::backbone::DenoiseRequest {
            z_t: &z_flipped[i],
            t: ex.t,
            ctx: &ctxs[i],
            cond: &conds[i],
        })
        .collect();
    let inp = model.inputs(&reqs)?;
    let opts = ForwardOpts {
        rotate_attention: true,
        ..Default::default()
    };
    let out = model.forward(view, &inp, &opts)?;
    let target = stack_videos(&targets.iter().collect::<Vec<_>>(), model.dtype())?;
    Ok((target - out.eps)?.sqr()?.sum_all()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmpReport {
    pub initial_heldout: f64,
    pub final_heldout: f64,
    pub losses: Vec<f64>,
}

/// Mean per-element backward loss on fixed draws.
pub fn heldout_bmp_loss(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    videos: &[TrainingVideo],
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, v) in videos.iter().enumerate() {
        let mut rng = step_rng(seed, 0xB0B, i as u64);
        let draw = draw_noise(&mut rng, v.z0.shape(), schedule.total_steps());
        let ex = BmpExample {
            z0: &v.z0,
            ctx: &v.ctx,
            cond: &v.cond,
            t: draw.t,
            eps: &draw.eps,
        };
        let loss = bmp_loss(model, View::frozen(&model.params), schedule, &[ex])?;
        total += nn::scalar_f64(&loss)?;
        count += v.z0.data().len();
    }
    Ok(total / count as f64)
}

/// Fine-tune only the backward value/output matrices of temporal attention.
pub fn finetune_bmp(
    model: &mut Denoiser,
    dataset: &[TrainingVideo],
    heldout: &[TrainingVideo],
    schedule: &NoiseSchedule,
    cfg: &BmpConfig,
    seed: u64,
) -> Result<BmpReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("bmp fine-tuning needs a non-empty dataset"));
    }
    let trainable: BTreeSet<String> = model.config.backward_motion_params().into_iter().collect();
    if trainable.is_empty() {
        return Err(invalid("empty trainable set"));
    }
    let eval_set = if heldout.is_empty() { dataset } else { heldout };
    let initial = heldout_bmp_loss(model, schedule, eval_set, seed)?;
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr));
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut smoothed: Option<f64> = None;
    for step in 0..cfg.steps {
        let mut rng = step_rng(seed, 0xB3, step as u64);
        let picks: Vec<usize> = (0..cfg.batch)
            .map(|_| rand::Rng::random_range(&mut rng, 0..dataset.len()))
            .collect();
        let draws: Vec<_> = picks
            .iter()
            .map(|&i| draw_noise(&mut rng, dataset[i].z0.shape(), schedule.total_steps()))
            .collect();
        let batch: Vec<BmpExample> = picks
            .iter()
            .zip(&draws)
            .map(|(&i, d)| BmpExample {
                z0: &dataset[i].z0,
                ctx: &dataset[i].ctx,
                cond: &dataset[i].cond,
                t: d.t,
                eps: &d.eps,
            })
            .collect();
        let numel: usize = batch.iter().map(|b| b.z0.data().len()).sum();
        let loss = bmp_loss(model, View::only(&model.params, &trainable), schedule, &batch)?
            .affine(1.0 / numel as f64, 0.0)?;
        let value = nn::scalar_f64(&loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: "non-finite backward loss".into(),
            });
        }
        let s = smoothed.map_or(value, |p| 0.95 * p + 0.05 * value);
        smoothed = Some(s);
        if s > 10.0 * initial {
            return Err(Error::Diverged {
                step,
                reason: format!("smoothed loss {s:.4} exceeds 10x initial {initial:.4}"),
            });
        }
        let grads = loss.backward()?;
        opt.step(&model.params, &grads, trainable.iter().map(String::as_str))?;
        losses.push(value);
        if step % 100 == 0 {
            log::info!("bmp step {step}: loss {value:.5}");
        }
    }
    let final_heldout = heldout_bmp_loss(model, schedule, eval_set, seed)?;
    Ok(BmpReport {
        initial_heldout: initial,
        final_heldout,
        losses,
    })
}
