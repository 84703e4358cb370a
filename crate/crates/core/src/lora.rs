//! Low-rank adapters: per-endpoint training and per-frame interpolation.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{stack_videos, Conditioning, DenoiseRequest, Denoiser, ForwardOpts, LoraWeights};
use crate::diffusion::{add_noise, LatentVideo, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::nn::{self, AdamW, AdamWConfig, Init, ParamStore, View};
use crate::text::TextEmbedding;
use crate::training::{draw_noise, step_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub enabled: bool,
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
    pub scale: f64,
    /// Frames the single training image is replicated to; 0 uses the model maximum.
    pub frames: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            rank: 16,
            steps: 200,
            lr: 2e-4,
            scale: 1.0,
            frames: 0,
        }
    }
}

/// Down (`r x d_in`) and up (`d_out x r`) matrices per adapted layer, stored
/// as `{layer}.a` and `{layer}.b`.
#[derive(Debug)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scale: f64,
    pub params: ParamStore,
}

impl LoraAdapter {
    /// Fresh adapter: Gaussian down matrices, zero up matrices.
    pub fn new(model: &Denoiser, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(invalid("adapter rank must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(model.dtype());
        for layer in model.config.resolved_lora_targets() {
            let (dout, din) = model.config.linear_dims(&layer)?;
            if rank > dout.min(din) {
                return Err(invalid(format!(
                    "rank {rank} exceeds the dimension of {layer} ({dout}x{din})"
                )));
            }
            params.add(&format!("{layer}.a"), &[rank, din], Init::Normal(1.0 / (din as f64).sqrt()), &mut rng)?;
            params.add(&format!("{layer}.b"), &[dout, rank], Init::Zeros, &mut rng)?;
        }
        Ok(Self { rank, scale, params })
    }

    pub fn from_params(rank: usize, scale: f64, params: ParamStore) -> Result<Self> {
        if rank == 0 {
            return Err(invalid("adapter rank must be at least 1"));
        }
        for name in params.names() {
            let shape = params.shape(name)?;
            let ok = match name.rsplit_once('.') {
                Some((_, "a")) => shape.len() == 2 && shape[0] == rank,
                Some((_, "b")) => shape.len() == 2 && shape[1] == rank,
                _ => false,
            };
            if !ok {
                return Err(invalid(format!("unexpected adapter entry {name} {shape:?}")));
            }
        }
        Ok(Self { rank, scale, params })
    }

    pub fn layers(&self) -> Vec<String> {
        self.params
            .names()
            .filter_map(|n| n.strip_suffix(".a").map(str::to_string))
            .collect()
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            rank: self.rank,
            scale: self.scale,
            params: self.params.deep_clone()?,
        })
    }

    /// Check that the adapter fits `model`.
    pub fn check(&self, model: &Denoiser) -> Result<()> {
        for layer in self.layers() {
            let (dout, din) = model.config.linear_dims(&layer)?;
            if !model.config.all_lora_layers().contains(&layer) {
                return Err(Error::UnknownLayer(layer));
            }
            if self.params.shape(&format!("{layer}.a"))? != [self.rank, din]
                || self.params.shape(&format!("{layer}.b"))? != [dout, self.rank]
            {
                return Err(invalid(format!("adapter does not match layer {layer}")));
            }
        }
        Ok(())
    }

    /// Shared-across-frames deltas for a forward pass.
    pub fn weights(&self, view: View) -> Result<LoraWeights> {
        let mut layers = BTreeMap::new();
        for layer in self.layers() {
            let a = view.get(&format!("{layer}.a"))?;
            let b = view.get(&format!("{layer}.b"))?;
            layers.insert(layer, (a, b));
        }
        Ok(LoraWeights {
            scale: self.scale,
            per_frame: false,
            layers,
        })
    }
}

fn same_structure(a: &LoraAdapter, b: &LoraAdapter) -> Result<()> {
    if a.rank != b.rank || a.scale != b.scale {
        return Err(invalid(format!(
            "adapters differ in rank/scale ({}/{} vs {}/{})",
            a.rank, a.scale, b.rank, b.scale
        )));
    }
    let an: Vec<&str> = a.params.names().collect();
    let bn: Vec<&str> = b.params.names().collect();
    if an != bn {
        return Err(invalid("adapters target different layers"));
    }
    for n in an {
        if a.params.shape(n)? != b.params.shape(n)? {
            return Err(Error::ShapeMismatch {
                expected: a.params.shape(n)?,
                got: b.params.shape(n)?,
            });
        }
    }
    Ok(())
}

/// `(1-λ)·a1 + λ·aN` for every matrix.
pub fn interp_lora(a1: &LoraAdapter, an: &LoraAdapter, lam: f64) -> Result<LoraAdapter> {
    same_structure(a1, an)?;
    if !(0.0..=1.0).contains(&lam) {
        return Err(invalid(format!("interpolation weight {lam} outside [0, 1]")));
    }
    if lam == 0.0 {
        return a1.deep_clone();
    }
    if lam == 1.0 {
        return an.deep_clone();
    }
    let mut params = ParamStore::new(a1.params.dtype());
    for name in a1.params.names() {
        let x = a1.params.values_f64(name)?;
        let y = an.params.values_f64(name)?;
        let v: Vec<f64> = x.iter().zip(&y).map(|(p, q)| (1.0 - lam) * p + lam * q).collect();
        let t = Tensor::from_vec(v, a1.params.shape(name)?, &nn::device())?.to_dtype(a1.params.dtype())?;
        params.insert(name, t)?;
    }
    Ok(LoraAdapter {
        rank: a1.rank,
        scale: a1.scale,
        params,
    })
}

/// Stack one adapter per frame into per-frame deltas.
pub fn stack_per_frame(adapters: &[LoraAdapter]) -> Result<LoraWeights> {
    let first = adapters.first().ok_or_else(|| invalid("no adapters to stack"))?;
    for a in &adapters[1..] {
        same_structure(first, a)?;
    }
    let mut layers = BTreeMap::new();
    for layer in first.layers() {
        let get = |suffix: &str| -> Result<Tensor> {
            let ts = adapters
                .iter()
                .map(|a| a.params.tensor(&format!("{layer}.{suffix}")))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&ts, 0)?)
        };
        layers.insert(layer.clone(), (get("a")?, get("b")?));
    }
    Ok(LoraWeights {
        scale: first.scale,
        per_frame: true,
        layers,
    })
}

/// Per-frame adapters `interp_lora(a1, aN, λ_n)`.
pub fn per_frame_adapters(a1: &LoraAdapter, an: &LoraAdapter, lambdas: &[f64]) -> Result<Vec<LoraAdapter>> {
    lambdas.iter().map(|&l| interp_lora(a1, an, l)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Everything needed to fit an adapter to one endpoint frame.
#[derive(Debug, Clone, Copy)]
pub struct LoraTarget<'a> {
    /// Encoded frame, `C x h x w`.
    pub latent: &'a Array3<f64>,
    pub caption: &'a TextEmbedding,
}

fn replicated(latent: &Array3<f64>, frames: usize) -> Result<LatentVideo> {
    LatentVideo::from_frames(&vec![latent.clone(); frames])
}

/// Mean-squared denoising error of `model + adapter` on fixed draws.
pub fn adapter_eval_loss(
    model: &Denoiser,
    adapter: &LoraAdapter,
    target: LoraTarget,
    schedule: &NoiseSchedule,
    frames: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let z0 = replicated(target.latent, frames)?;
    let cond = Conditioning {
        first: target.latent.clone(),
        last: target.latent.clone(),
    };
    let ctx = std::slice::from_ref(target.caption);
    let lw = adapter.weights(View::frozen(&adapter.params))?;
    let opts = ForwardOpts {
        lora: Some(&lw),
        ..Default::default()
    };
    let mut total = 0.0;
    for i in 0..draws {
        let mut rng = step_rng(seed, 0x10A, i as u64);
        let d = draw_noise(&mut rng, z0.shape(), schedule.total_steps());
        let zt = add_noise(&z0, &d.eps, d.t, schedule)?;
        let req = DenoiseRequest { z_t: &zt, t: d.t, ctx, cond: &cond };
        let pred = model.denoise(req, &opts)?.eps;
        total += pred
            .data()
            .iter()
            .zip(d.eps.data())
            .map(|(p, e)| (p - e).powi(2))
            .sum::<f64>()
            / z0.data().len() as f64;
    }
    Ok(total / draws as f64)
}

/// Fit a fresh adapter to a single frame replicated across all positions.
/// The backbone is only read.
pub fn train_lora(
    model: &Denoiser,
    target: LoraTarget,
    schedule: &NoiseSchedule,
    cfg: &LoraConfig,
    seed: u64,
) -> Result<(LoraAdapter, LoraReport)> {
    let adapter = LoraAdapter::new(model, cfg.rank, cfg.scale, seed)?;
    let frames = if cfg.frames == 0 { model.config.frame_count } else { cfg.frames };
    let eval = |a: &LoraAdapter| adapter_eval_loss(model, a, target, schedule, frames, 8, seed ^ 0xE7A1);
    let initial_loss = eval(&adapter)?;
    let z0 = replicated(target.latent, frames)?;
    let cond = Conditioning {
        first: target.latent.clone(),
        last: target.latent.clone(),
    };
    let ctx = std::slice::from_ref(target.caption);
    let names: Vec<String> = adapter.params.names().map(str::to_string).collect();
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = step_rng(seed, 0x10B, step as u64);
        let d = draw_noise(&mut rng, z0.shape(), schedule.total_steps());
        let zt = add_noise(&z0, &d.eps, d.t, schedule)?;
        let req = DenoiseRequest { z_t: &zt, t: d.t, ctx, cond: &cond };
        let inp = model.inputs(&[req])?;
        let lw = adapter.weights(View::trainable(&adapter.params))?;
        let opts = ForwardOpts {
            lora: Some(&lw),
            ..Default::default()
        };
        let out = model.forward(View::frozen(&model.params), &inp, &opts)?;
        let target_eps = stack_videos(&[&d.eps], model.dtype())?;
        let loss = (out.eps - target_eps)?.sqr()?.mean_all()?;
        let value = nn::scalar_f64(&loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: "non-finite adapter loss".into(),
            });
        }
        let grads = loss.backward()?;
        opt.step(&adapter.params, &grads, names.iter().map(String::as_str))?;
        losses.push(value);
    }
    let final_loss = eval(&adapter)?;
    Ok((
        adapter,
        LoraReport {
            initial_loss,
            final_loss,
            losses,
        },
    ))
}

/// Convert an adapter to another float type (used for gradient checks).
pub fn adapter_to_dtype(a: &LoraAdapter, dtype: DType) -> Result<LoraAdapter> {
    Ok(LoraAdapter {
        rank: a.rank,
        scale: a.scale,
        params: a.params.to_dtype(dtype)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::DenoiserConfig;
    use crate::text::TextEncoder;
    use ndarray::Array4;
    use rand_distr::{Distribution, StandardNormal};

    fn model() -> Denoiser {
        let m = Denoiser::new(DenoiserConfig::miniature(), DType::F32, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (co, ci) = (m.config.latent_channels, m.config.base_width);
        let w: Vec<f64> = (0..co * ci).map(|_| 0.1 * { let v: f64 = StandardNormal.sample(&mut rng); v }).collect();
        m.params
            .set_values("out.proj.weight", Tensor::from_vec(w, (co, ci), &nn::device()).unwrap())
            .unwrap();
        m
    }

    fn scalar_adapter(v: f64) -> LoraAdapter {
        let mut p = ParamStore::new(DType::F64);
        p.insert("x.a", Tensor::new(&[[v]], &nn::device()).unwrap()).unwrap();
        p.insert("x.b", Tensor::new(&[[v]], &nn::device()).unwrap()).unwrap();
        LoraAdapter::from_params(1, 1.0, p).unwrap()
    }

    #[test]
    fn midpoint_arithmetic() {
        let mid = interp_lora(&scalar_adapter(2.0), &scalar_adapter(4.0), 0.5).unwrap();
        assert_eq!(mid.params.values_f64("x.a").unwrap(), vec![3.0]);
    }

    #[test]
    fn endpoints_are_exact() {
        let m = model();
        let a = LoraAdapter::new(&m, 2, 1.0, 1).unwrap();
        let b = LoraAdapter::new(&m, 2, 1.0, 2).unwrap();
        for name in a.params.names() {
            let at0 = interp_lora(&a, &b, 0.0).unwrap();
            let at1 = interp_lora(&a, &b, 1.0).unwrap();
            assert_eq!(at0.params.values_f32(name).unwrap(), a.params.values_f32(name).unwrap());
            assert_eq!(at1.params.values_f32(name).unwrap(), b.params.values_f32(name).unwrap());
        }
        let same = interp_lora(&a, &a, 0.3).unwrap();
        for name in a.params.names() {
            let x = a.params.values_f64(name).unwrap();
            let y = same.params.values_f64(name).unwrap();
            for (p, q) in x.iter().zip(&y) {
                assert!((p - q).abs() <= 1e-6 * p.abs().max(1e-30));
            }
        }
    }

    #[test]
    fn structural_mismatch_is_rejected() {
        let m = model();
        let a = LoraAdapter::new(&m, 2, 1.0, 1).unwrap();
        let b = LoraAdapter::new(&m, 3, 1.0, 1).unwrap();
        assert!(interp_lora(&a, &b, 0.5).is_err());
        assert!(LoraAdapter::new(&m, 17, 1.0, 1).is_err());
        assert!(LoraAdapter::new(&m, 0, 1.0, 1).is_err());
    }

    #[test]
    fn zero_up_matrices_are_noops() {
        let m = model();
        let a = LoraAdapter::new(&m, 4, 1.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = LatentVideo::new(Array4::from_shape_simple_fn((4, 4, 8, 8), || StandardNormal.sample(&mut rng))).unwrap();
        let enc = TextEncoder::new(16, 4).unwrap();
        let ctx = vec![enc.encode("a blue square")];
        let cond = Conditioning { first: z.frame(0), last: z.frame(3) };
        let req = DenoiseRequest { z_t: &z, t: 400, ctx: &ctx, cond: &cond };
        let base = m.denoise(req, &ForwardOpts::default()).unwrap().eps;
        let lw = a.weights(View::frozen(&a.params)).unwrap();
        let with = m.denoise(req, &ForwardOpts { lora: Some(&lw), ..Default::default() }).unwrap().eps;
        assert_eq!(base, with);
        let stacked = stack_per_frame(&[a.deep_clone().unwrap(), a.deep_clone().unwrap(), a.deep_clone().unwrap(), a]).unwrap();
        let per = m.denoise(req, &ForwardOpts { lora: Some(&stacked), ..Default::default() }).unwrap().eps;
        assert_eq!(base, per);
    }

    #[test]
    fn zero_step_training_is_identity_and_base_untouched() {
        let m = model();
        let before: Vec<Vec<f32>> = m.params.names().map(|n| m.params.values_f32(n).unwrap()).collect();
        let latent = Array3::from_elem((4, 8, 8), 0.2);
        let cap = TextEncoder::new(16, 4).unwrap().encode("a red circle");
        let target = LoraTarget { latent: &latent, caption: &cap };
        let cfg = LoraConfig { rank: 2, steps: 3, lr: 1e-2, ..Default::default() };
        let (_, rep) = train_lora(&m, target, &NoiseSchedule::training_default(), &cfg, 1).unwrap();
        assert_eq!(rep.losses.len(), 3);
        let after: Vec<Vec<f32>> = m.params.names().map(|n| m.params.values_f32(n).unwrap()).collect();
        assert_eq!(before, after);
        let cfg0 = LoraConfig { rank: 2, steps: 0, ..Default::default() };
        let (a, rep) = train_lora(&m, target, &NoiseSchedule::training_default(), &cfg0, 1).unwrap();
        assert_eq!(rep.initial_loss, rep.final_loss);
        assert!(a.layers().iter().all(|l| a.params.values_f32(&format!("{l}.b")).unwrap().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn per_frame_stacking_matches_frame_count() {
        let m = model();
        let a = LoraAdapter::new(&m, 2, 1.0, 1).unwrap();
        let b = LoraAdapter::new(&m, 2, 1.0, 2).unwrap();
        let frames = per_frame_adapters(&a, &b, &[0.0, 0.5, 1.0]).unwrap();
        let w = stack_per_frame(&frames).unwrap();
        let (sa, sb) = &w.layers["mid.spatial.v"];
        assert_eq!(sa.dims(), &[3, 2, 32]);
        assert_eq!(sb.dims(), &[3, 32, 2]);
    }
}
