//! Denoiser training: data preparation, per-step randomness, the AdamW loop
//! with optional alignment regularization, and resumable checkpoints.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Conditioning, Denoiser};
use crate::checkpoint::{self, Manifest};
use crate::codec::LatentCodec;
use crate::data::TransitionSample;
use crate::diffusion::{LatentVideo, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::nn::{self, AdamW, AdamWConfig, View};
use crate::rar::{total_training_loss, Alignment, Projector, RarConfig, ReferenceEncoder, ReferenceFeatures, TrainExample};
use crate::text::{TextEmbedding, TextEncoder};
use crate::transition::{frame_text_embeddings, InterpCoeffs, LambdaSpacing};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Probability of replacing a video's captions with the null embedding.
    pub caption_dropout: f64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            weight_decay: 0.0,
            caption_dropout: 0.1,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

/// A training video in latent space with its per-frame captions.
#[derive(Debug, Clone)]
pub struct TrainingVideo {
    pub id: String,
    pub z0: LatentVideo,
    pub ctx: Vec<TextEmbedding>,
    pub null_ctx: Vec<TextEmbedding>,
    pub cond: Conditioning,
    pub reference: Option<ReferenceFeatures>,
}

/// Deterministic generator for `(seed, stream, step)`.
pub fn step_rng(seed: u64, stream: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((step as u128) << 24);
    let mut key = [0u8; 32];
    rng.fill(&mut key);
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: LatentVideo,
}

/// Uniform timestep in `1..=total_steps` and standard normal noise.
pub fn draw_noise<R: Rng>(rng: &mut R, shape: [usize; 4], total_steps: usize) -> NoiseDraw {
    let t = rng.random_range(1..=total_steps);
    let eps = Array4::from_shape_simple_fn((shape[0], shape[1], shape[2], shape[3]), || StandardNormal.sample(rng));
    NoiseDraw {
        t,
        eps: LatentVideo::new(eps).expect("gaussian draws are finite"),
    }
}

/// Encode frames and captions. `reference` also produces alignment targets
/// resampled to `tap_grid`.
pub fn prepare(
    samples: &[TransitionSample],
    codec: &LatentCodec,
    text: &TextEncoder,
    reference: Option<(&ReferenceEncoder, (usize, usize))>,
) -> Result<Vec<TrainingVideo>> {
    samples
        .iter()
        .map(|s| {
            let video = s.video.as_ref().ok_or_else(|| Error::Dataset {
                id: s.id.clone(),
                reason: "training samples need ground-truth videos".into(),
            })?;
            let latents = video.iter().map(|f| codec.encode_frame(f)).collect::<Result<Vec<_>>>()?;
            let z0 = LatentVideo::from_frames(&latents)?;
            let n = video.len();
            let coeffs = InterpCoeffs::new(n, LambdaSpacing::Uniform, 0.0)?;
            let ctx = frame_text_embeddings(&text.encode(&s.caption_first), &text.encode(&s.caption_last), n, &coeffs)?;
            let reference = match reference {
                Some((enc, grid)) => Some(enc.encode_reference(video)?.resample(grid)?),
                None => None,
            };
            Ok(TrainingVideo {
                id: s.id.clone(),
                cond: Conditioning {
                    first: latents[0].clone(),
                    last: latents[n - 1].clone(),
                },
                z0,
                ctx,
                null_ctx: vec![text.null()],
                reference,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub simple: f64,
    pub rar: Option<f64>,
}

/// Exponentially smoothed loss curve (factor 0.98).
pub fn smoothed(losses: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut s: Option<f64> = None;
    for &l in losses {
        let v = s.map_or(l, |p| 0.98 * p + 0.02 * l);
        s = Some(v);
        out.push(v);
    }
    out
}

/// Mean per-element noise-prediction error on fixed draws.
pub fn eval_loss(model: &Denoiser, schedule: &NoiseSchedule, videos: &[TrainingVideo], draws: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, v) in videos.iter().enumerate() {
        for d in 0..draws {
            let mut rng = step_rng(seed, 0xE7, (i * draws + d) as u64);
            let nd = draw_noise(&mut rng, v.z0.shape(), schedule.total_steps());
            let ex = TrainExample {
                z0: &v.z0,
                ctx: &v.ctx,
                cond: &v.cond,
                t: nd.t,
                eps: &nd.eps,
                reference: None,
            };
            let parts = total_training_loss(model, View::frozen(&model.params), schedule, &[ex], None)?;
            total += parts.simple;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Training state: model, optional projector and their optimizers.
#[derive(Debug)]
pub struct Trainer {
    pub model: Denoiser,
    pub projector: Option<Projector>,
    pub opt: AdamW,
    pub proj_opt: Option<AdamW>,
    pub step: usize,
    pub log: Vec<StepLog>,
}

impl Trainer {
    pub fn new(model: Denoiser, projector: Option<Projector>, cfg: &TrainConfig) -> Self {
        let oc = AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::with_lr(cfg.lr)
        };
        let proj_opt = projector.as_ref().map(|_| AdamW::new(oc));
        Self {
            model,
            projector,
            opt: AdamW::new(oc),
            proj_opt,
            step: 0,
            log: Vec::new(),
        }
    }

    /// Run until `until` total steps have been taken.
    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &mut self,
        data: &[TrainingVideo],
        schedule: &NoiseSchedule,
        cfg: &TrainConfig,
        rar: &RarConfig,
        seed: u64,
        until: usize,
        ckpt_dir: Option<&Path>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(invalid("training needs a non-empty dataset"));
        }
        if cfg.batch == 0 {
            return Err(invalid("train.batch must be positive"));
        }
        if rar.enabled && self.projector.is_none() {
            return Err(invalid("alignment is enabled but no projector was built"));
        }
        let model_names: Vec<String> = self.model.params.names().map(str::to_string).collect();
        let proj_names: Vec<String> = self
            .projector
            .as_ref()
            .map(|p| p.params.names().map(str::to_string).collect())
            .unwrap_or_default();
        while self.step < until {
            let step = self.step;
            let mut rng = step_rng(seed, 0x7A, step as u64);
            let picks: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..data.len())).collect();
            let drop: Vec<bool> = picks.iter().map(|_| rng.random::<f64>() < cfg.caption_dropout).collect();
            let draws: Vec<NoiseDraw> = picks
                .iter()
                .map(|&i| draw_noise(&mut rng, data[i].z0.shape(), schedule.total_steps()))
                .collect();
            let batch: Vec<TrainExample> = picks
                .iter()
                .zip(&drop)
                .zip(&draws)
                .map(|((&i, &dropped), d)| {
                    let v = &data[i];
                    TrainExample {
                        z0: &v.z0,
                        ctx: if dropped { &v.null_ctx } else { &v.ctx },
                        cond: &v.cond,
                        t: d.t,
                        eps: &d.eps,
                        reference: v.reference.as_ref(),
                    }
                })
                .collect();
            let align = match (&self.projector, rar.enabled) {
                (Some(p), true) => Some(Alignment {
                    projector: p,
                    view: View::trainable(&p.params),
                    weight: rar.weight,
                    tap_layer: &rar.tap_layer,
                    patch: rar.patch_size,
                }),
                _ => None,
            };
            let parts = total_training_loss(&self.model, View::trainable(&self.model.params), schedule, &batch, align)?;
            let loss = nn::scalar_f64(&parts.total)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: "non-finite training loss".into(),
                });
            }
            let grads = parts.total.backward()?;
            self.opt.step(&self.model.params, &grads, model_names.iter().map(String::as_str))?;
            if let (Some(p), Some(o), true) = (&self.projector, &mut self.proj_opt, rar.enabled) {
                o.step(&p.params, &grads, proj_names.iter().map(String::as_str))?;
            }
            self.log.push(StepLog {
                step,
                loss,
                simple: parts.simple,
                rar: parts.rar,
            });
            self.step += 1;
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                log::info!("step {step}: loss {loss:.5} (denoise {:.5}, align {:?})", parts.simple, parts.rar);
            }
            if let Some(dir) = ckpt_dir {
                if cfg.checkpoint_every > 0 && self.step % cfg.checkpoint_every == 0 && self.step < until {
                    self.save(&dir.join(format!("step-{:06}", self.step)))?;
                }
            }
        }
        if let Some(dir) = ckpt_dir {
            self.save(dir)?;
        }
        Ok(())
    }

    /// Full training state: parameters, projector and optimizer moments.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        let mut m = Manifest::new("denoiser");
        m.config = serde_json::to_value(&self.model.config)?;
        m.extra = serde_json::json!({
            "step": self.step,
            "log": self.log,
        });
        let man = checkpoint::save(dir, m, &self.model.params, &[("model", &self.opt)])?;
        if let Some(p) = &self.projector {
            let mut pm = Manifest::new("projector");
            pm.config = serde_json::json!({
                "input_dim": p.input_dim,
                "hidden": p.hidden,
                "output_dim": p.output_dim,
            });
            let opts: Vec<(&str, &AdamW)> = self.proj_opt.iter().map(|o| ("projector", o)).collect();
            checkpoint::save(&dir.join("projector"), pm, &p.params, &opts)?;
        }
        Ok(man)
    }

    pub fn resume(dir: &Path) -> Result<Self> {
        let model = checkpoint::load_denoiser(dir)?;
        let man = checkpoint::read_manifest(dir)?;
        let opt = checkpoint::load_optimizer(dir, &man, "model")?
            .ok_or_else(|| invalid(format!("{} holds no optimizer state", dir.display())))?;
        let step = man.extra.get("step").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let log: Vec<StepLog> = man
            .extra
            .get("log")
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()?
            .unwrap_or_default();
        let pdir = dir.join("projector");
        let (projector, proj_opt) = if pdir.join("manifest.json").exists() {
            let (pm, store) = checkpoint::load(&pdir)?;
            let o = checkpoint::load_optimizer(&pdir, &pm, "projector")?;
            (Some(Projector::from_params(store)?), o)
        } else {
            (None, None)
        };
        Ok(Self {
            model,
            projector,
            opt,
            proj_opt,
            step,
            log,
        })
    }
}

/// Projector sized for `model`'s tap layer and `encoder`'s width.
pub fn build_projector(model: &Denoiser, rar: &RarConfig, encoder: &ReferenceEncoder, seed: u64) -> Result<Projector> {
    let level = model
        .config
        .blocks()
        .into_iter()
        .find(|(b, _)| *b == rar.tap_layer)
        .map(|(_, l)| l)
        .ok_or_else(|| Error::UnknownLayer(rar.tap_layer.clone()))?;
    let k = model.config.width(level) * rar.patch_size * rar.patch_size;
    Projector::new(k, rar.projector_hidden, encoder.dim(), model.dtype(), seed)
}

/// Grid of patches the tap layer produces.
pub fn tap_grid(model: &Denoiser, rar: &RarConfig) -> Result<(usize, usize)> {
    let level = model
        .config
        .blocks()
        .into_iter()
        .find(|(b, _)| *b == rar.tap_layer)
        .map(|(_, l)| l)
        .ok_or_else(|| Error::UnknownLayer(rar.tap_layer.clone()))?;
    let (h, w) = (model.config.latent_height >> level, model.config.latent_width >> level);
    if rar.patch_size == 0 || h % rar.patch_size != 0 || w % rar.patch_size != 0 {
        return Err(invalid(format!("patch size {} does not divide the {h}x{w} tap", rar.patch_size)));
    }
    Ok((h / rar.patch_size, w / rar.patch_size))
}

/// Names whose values differ between two stores (bitwise).
pub fn changed_params(a: &crate::nn::ParamStore, b: &crate::nn::ParamStore) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for name in a.names() {
        let x: Vec<u32> = a.values_f32(name)?.iter().map(|v| v.to_bits()).collect();
        let y: Vec<u32> = b.values_f32(name)?.iter().map(|v| v.to_bits()).collect();
        if x != y {
            out.insert(name.to_string());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::DenoiserConfig;
    use crate::data::{gen_synthetic, SynthSpec, Task};
    use candle_core::DType;

    fn tiny_data() -> (Vec<TrainingVideo>, TextEncoder) {
        let spec = SynthSpec { frames: 4, size: 16, radius: Some(3.0), ..SynthSpec::new(Task::Motion) };
        let samples = gen_synthetic(&spec, 3).unwrap();
        let codec = LatentCodec::lossless(2).unwrap();
        let text = TextEncoder::new(16, 4).unwrap();
        let enc = ReferenceEncoder::random((16, 16), 4, 8, 6, 1).unwrap();
        (prepare(&samples, &codec, &text, Some((&enc, (4, 4)))).unwrap(), text)
    }

    fn cfg() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 12,
            ..DenoiserConfig::miniature()
        }
    }

    #[test]
    fn step_rng_is_keyed_by_all_inputs() {
        let v = |s, t, k| step_rng(s, t, k).random::<u64>();
        assert_eq!(v(1, 2, 3), v(1, 2, 3));
        assert_ne!(v(1, 2, 3), v(1, 2, 4));
        assert_ne!(v(1, 2, 3), v(1, 3, 3));
        assert_ne!(v(1, 2, 3), v(2, 2, 3));
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let (data, _) = tiny_data();
        let model = Denoiser::new(cfg(), DType::F32, 4).unwrap();
        let init = model.params.deep_clone().unwrap();
        let mut tr = Trainer::new(model, None, &TrainConfig::default());
        let rar = RarConfig { enabled: false, ..Default::default() };
        tr.run(&data, &NoiseSchedule::training_default(), &TrainConfig::default(), &rar, 1, 0, None).unwrap();
        assert!(changed_params(&init, &tr.model.params).unwrap().is_empty());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (data, _) = tiny_data();
        let sched = NoiseSchedule::training_default();
        let tc = TrainConfig { batch: 2, lr: 1e-3, ..Default::default() };
        let rar = RarConfig::default();
        let enc = ReferenceEncoder::random((16, 16), 4, 8, 6, 1).unwrap();
        let fresh = || {
            let m = Denoiser::new(cfg(), DType::F32, 4).unwrap();
            let p = build_projector(&m, &rar, &enc, 2).unwrap();
            Trainer::new(m, Some(p), &tc)
        };
        let mut straight = fresh();
        straight.run(&data, &sched, &tc, &rar, 9, 6, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = fresh();
        first.run(&data, &sched, &tc, &rar, 9, 3, Some(dir.path())).unwrap();
        let mut resumed = Trainer::resume(dir.path()).unwrap();
        assert_eq!(resumed.step, 3);
        resumed.run(&data, &sched, &tc, &rar, 9, 6, None).unwrap();
        assert!(changed_params(&straight.model.params, &resumed.model.params).unwrap().is_empty());
        let (a, b) = (straight.projector.unwrap(), resumed.projector.unwrap());
        assert!(changed_params(&a.params, &b.params).unwrap().is_empty());
        assert_eq!(straight.log, resumed.log);
    }

    #[test]
    fn disabled_alignment_ignores_projector() {
        let (data, _) = tiny_data();
        let sched = NoiseSchedule::training_default();
        let tc = TrainConfig { batch: 2, ..Default::default() };
        let off = RarConfig { enabled: false, ..Default::default() };
        let enc = ReferenceEncoder::random((16, 16), 4, 8, 6, 1).unwrap();
        let mut with_proj = {
            let m = Denoiser::new(cfg(), DType::F32, 4).unwrap();
            let p = build_projector(&m, &off, &enc, 2).unwrap();
            Trainer::new(m, Some(p), &tc)
        };
        let mut without = Trainer::new(Denoiser::new(cfg(), DType::F32, 4).unwrap(), None, &tc);
        with_proj.run(&data, &sched, &tc, &off, 5, 3, None).unwrap();
        without.run(&data, &sched, &tc, &off, 5, 3, None).unwrap();
        assert!(changed_params(&with_proj.model.params, &without.model.params).unwrap().is_empty());
        assert_eq!(with_proj.log, without.log);
    }
}
