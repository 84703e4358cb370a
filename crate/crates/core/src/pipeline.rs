//! End-to-end inference and training orchestration.
//!
//! Inference: encode both endpoints, DDIM-invert them as a two-frame video,
//! spherically interpolate the inverted noise into the intermediate frames,
//! then run guided DDIM with optional bidirectional fusion, per-frame
//! interpolated adapters and early-step injection. Endpoint frames are pinned
//! to their inverted trajectories at every level.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Conditioning, DenoiseRequest, Denoiser, ForwardOpts, LoraWeights};
use crate::bmp::{finetune_bmp, flip_temporal, fuse_noise, reversed_context, BmpReport};
use crate::checkpoint;
use crate::codec::{image_to_rgb8, quantize, Image, LatentCodec};
use crate::config::RunConfig;
use crate::data::TransitionSample;
use crate::diffusion::{cfg_combine, ddim_update, GuidanceConfig, LatentVideo, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::lora::{per_frame_adapters, stack_per_frame, train_lora, LoraAdapter, LoraReport, LoraTarget};
use crate::metrics::{evaluate_transition, EmbeddingProvider, MetricsReport, PerceptualDistance};
use crate::rar::ReferenceEncoder;
use crate::text::{TextEmbedding, TextEncoder};
use crate::training::{build_projector, prepare, step_rng, tap_grid, Trainer, TrainingVideo};
use crate::transition::{build_initial_latents, frame_text_embeddings, inject_weight, interpolated_frame, InterpCoeffs};

const INIT_NOISE_STREAM: u64 = 0x1A17;

/// Text encoder matching the denoiser's context shape.
pub fn text_encoder_for(model: &Denoiser) -> Result<TextEncoder> {
    TextEncoder::new(model.config.text_embed_dim, model.config.text_len)
}

/// Codec implied by the run configuration.
pub fn codec_for(cfg: &RunConfig) -> Result<LatentCodec> {
    LatentCodec::lossless(cfg.data.codec_factor)
}

/// Guided noise prediction for one video under fixed conditioning.
#[derive(Clone, Copy)]
pub struct Guided<'a> {
    pub model: &'a Denoiser,
    pub ctx: &'a [TextEmbedding],
    pub null: &'a [TextEmbedding],
    pub cond: &'a Conditioning,
    pub guidance: &'a GuidanceConfig,
    pub lora: Option<&'a LoraWeights>,
    pub rotate: bool,
}

impl Guided<'_> {
    pub fn eps(&self, z: &LatentVideo, t: usize) -> Result<LatentVideo> {
        let opts = ForwardOpts {
            rotate_attention: self.rotate,
            lora: self.lora,
            ..Default::default()
        };
        let cond = DenoiseRequest { z_t: z, t, ctx: self.ctx, cond: self.cond };
        let uncond = DenoiseRequest { z_t: z, t, ctx: self.null, cond: self.cond };
        let w = self.guidance.scale;
        if w == 1.0 {
            return Ok(self.model.denoise_batch(&[cond], &opts)?.remove(0));
        }
        if w == 0.0 {
            return Ok(self.model.denoise_batch(&[uncond], &opts)?.remove(0));
        }
        let mut out = self.model.denoise_batch(&[cond, uncond], &opts)?;
        let u = out.pop().expect("two outputs");
        let c = out.pop().expect("two outputs");
        cfg_combine(&c, &u, self.guidance)
    }
}

/// `[0, t_1, ..., t_S]`: the clean level followed by the inference timesteps.
pub fn levels(schedule: &NoiseSchedule, steps: usize) -> Result<Vec<usize>> {
    let mut l = vec![0];
    l.extend(schedule.inference_timesteps(steps)?);
    Ok(l)
}

/// DDIM inversion from the clean latents through every level. Each step
/// solves `z' = invert(z, eps(z', t'))` by fixed-point iteration starting
/// from `eps(z, t')`, so sampling with the same predictor retraces it.
pub fn invert_trajectory(
    g: &Guided,
    z0: &LatentVideo,
    schedule: &NoiseSchedule,
    levels: &[usize],
    refine: usize,
) -> Result<Vec<LatentVideo>> {
    let mut traj = Vec::with_capacity(levels.len());
    traj.push(z0.clone());
    for k in 1..levels.len() {
        let (t, t_next) = (levels[k - 1], levels[k]);
        let (ab, ab_next) = (schedule.alpha_bar(t)?, schedule.alpha_bar(t_next)?);
        let z = &traj[k - 1];
        let mut eps = g.eps(z, t_next)?;
        let mut next = ddim_update(z, &eps, ab, ab_next, None)?;
        for _ in 0..refine {
            eps = g.eps(&next, t_next)?;
            next = ddim_update(z, &eps, ab, ab_next, None)?;
        }
        traj.push(next);
    }
    Ok(traj)
}

/// Plain guided DDIM from the top level down to clean latents.
pub fn sample_from(
    g: &Guided,
    z_top: &LatentVideo,
    schedule: &NoiseSchedule,
    levels: &[usize],
    clamp_x0: Option<f64>,
) -> Result<LatentVideo> {
    let mut z = z_top.clone();
    for k in (1..levels.len()).rev() {
        let (t, t_prev) = (levels[k], levels[k - 1]);
        let eps = g.eps(&z, t)?;
        z = ddim_update(&z, &eps, schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?, clamp_x0)?;
    }
    Ok(z)
}

/// Invert and resample; returns the reconstruction and its relative L2 error.
pub fn inversion_round_trip(
    g: &Guided,
    z0: &LatentVideo,
    schedule: &NoiseSchedule,
    steps: usize,
    refine: usize,
) -> Result<(LatentVideo, f64)> {
    let lv = levels(schedule, steps)?;
    let traj = invert_trajectory(g, z0, schedule, &lv, refine)?;
    let back = sample_from(g, traj.last().expect("non-empty"), schedule, &lv, None)?;
    let diff = back.combine(1.0, z0, -1.0)?;
    Ok((back, diff.norm() / z0.norm().max(f64::MIN_POSITIVE)))
}

/// A generated transition.
#[derive(Debug, Clone)]
pub struct Transition {
    pub frames: Vec<Image>,
    pub latents: LatentVideo,
}

/// Which parts of the method are active for a sampling run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub init: bool,
    pub bmp: bool,
    pub lora: bool,
}

impl Toggles {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            init: cfg.init.enabled,
            bmp: cfg.bmp.enabled,
            lora: cfg.lora.enabled,
        }
    }
}

struct Endpoints {
    c_first: TextEmbedding,
    c_last: TextEmbedding,
    null: Vec<TextEmbedding>,
    cond: Conditioning,
    traj_first: Vec<Array3<f64>>,
    traj_last: Vec<Array3<f64>>,
    levels: Vec<usize>,
}

fn check_inputs(sample: &TransitionSample, model: &Denoiser, codec: &LatentCodec, frames: usize) -> Result<()> {
    sample.validate()?;
    if frames < 2 {
        return Err(invalid(format!("a transition needs >= 2 frames, got {frames}")));
    }
    if frames > model.config.frame_count {
        return Err(invalid(format!(
            "{frames} frames exceed the model maximum of {}",
            model.config.frame_count
        )));
    }
    let (h, w, _) = sample.first_frame.dim();
    let f = codec.factor();
    let c = &model.config;
    if h % f != 0 || w % f != 0 || h / f != c.latent_height || w / f != c.latent_width || codec.latent_channels() != c.latent_channels {
        return Err(invalid(format!(
            "{h}x{w} frames with codec factor {f} do not fit a {}x{}x{} latent",
            c.latent_channels, c.latent_height, c.latent_width
        )));
    }
    Ok(())
}

fn null_context(text: &TextEncoder, guidance: &GuidanceConfig) -> Vec<TextEmbedding> {
    if guidance.negative_prompt.trim().is_empty() {
        vec![text.null()]
    } else {
        vec![text.encode(&guidance.negative_prompt)]
    }
}

fn prepare_endpoints(
    sample: &TransitionSample,
    model: &Denoiser,
    codec: &LatentCodec,
    cfg: &RunConfig,
    schedule: &NoiseSchedule,
    lora: Option<&LoraWeights>,
) -> Result<Endpoints> {
    let text = text_encoder_for(model)?;
    let z_first = codec.encode_frame(&sample.first_frame)?;
    let z_last = codec.encode_frame(&sample.last_frame)?;
    let c_first = text.encode(&sample.caption_first);
    let c_last = text.encode(&sample.caption_last);
    let guidance = cfg.sampler.guidance();
    let null = null_context(&text, &guidance);
    let cond = Conditioning {
        first: z_first.clone(),
        last: z_last.clone(),
    };
    let pair_ctx = [c_first.clone(), c_last.clone()];
    let g = Guided {
        model,
        ctx: &pair_ctx,
        null: &null,
        cond: &cond,
        guidance: &guidance,
        lora,
        rotate: false,
    };
    let lv = levels(schedule, cfg.sampler.steps)?;
    let pair = LatentVideo::from_frames(&[z_first, z_last])?;
    let traj = invert_trajectory(&g, &pair, schedule, &lv, cfg.sampler.invert_refine)?;
    Ok(Endpoints {
        c_first,
        c_last,
        null,
        cond,
        traj_first: traj.iter().map(|z| z.frame(0)).collect(),
        traj_last: traj.iter().map(|z| z.frame(1)).collect(),
        levels: lv,
    })
}

/// Each frame takes the caption of the nearer endpoint.
pub fn nearest_captions(c_first: &TextEmbedding, c_last: &TextEmbedding, frames: usize) -> Vec<TextEmbedding> {
    (0..frames)
        .map(|n| if 2 * n < frames { c_first.clone() } else { c_last.clone() })
        .collect()
}

/// Endpoint noises with independent standard normal intermediates.
pub fn random_initial_latents(z_first: &Array3<f64>, z_last: &Array3<f64>, frames: usize, seed: u64) -> Result<LatentVideo> {
    let mut rng = step_rng(seed, INIT_NOISE_STREAM, 0);
    let mut out = Vec::with_capacity(frames);
    for n in 0..frames {
        out.push(if n == 0 {
            z_first.clone()
        } else if n + 1 == frames {
            z_last.clone()
        } else {
            Array3::from_shape_simple_fn(z_first.dim(), || StandardNormal.sample(&mut rng))
        });
    }
    LatentVideo::from_frames(&out)
}

fn decode(codec: &LatentCodec, z: &LatentVideo) -> Result<Vec<Image>> {
    (0..z.frames()).map(|n| Ok(quantize(&codec.decode_frame(&z.frame(n))?))).collect()
}

fn anchor(z: &mut LatentVideo, ep: &Endpoints, k: usize) {
    let n = z.frames();
    z.set_frame(0, &ep.traj_first[k]);
    z.set_frame(n - 1, &ep.traj_last[k]);
}

/// Full transition sampler. `adapters` are the endpoint adapters and are
/// required when the configuration enables them.
pub fn generate_transition(
    sample: &TransitionSample,
    model: &Denoiser,
    adapters: Option<(&LoraAdapter, &LoraAdapter)>,
    codec: &LatentCodec,
    cfg: &RunConfig,
) -> Result<Transition> {
    let frames = cfg.data.frames;
    check_inputs(sample, model, codec, frames)?;
    let on = Toggles::from_config(cfg);
    let schedule = NoiseSchedule::training_default();
    let coeffs = InterpCoeffs::new(frames, cfg.init.lambda_spacing, cfg.init.rho)?;
    let adapters = match (on.lora, adapters) {
        (true, Some((a1, an))) => {
            a1.check(model)?;
            an.check(model)?;
            Some((a1, an))
        }
        (true, None) => return Err(invalid("adapters are enabled but none were supplied")),
        (false, _) => None,
    };
    let (lora_pair, lora_fwd, lora_bwd) = match adapters {
        Some((a1, an)) => {
            let per = per_frame_adapters(a1, an, &coeffs.lambda_lora)?;
            let pair = stack_per_frame(&per_frame_adapters(a1, an, &[0.0, 1.0])?)?;
            let fwd = stack_per_frame(&per)?;
            let rev: Vec<LoraAdapter> = per.into_iter().rev().collect();
            (Some(pair), Some(fwd), Some(stack_per_frame(&rev)?))
        }
        None => (None, None, None),
    };
    let ep = prepare_endpoints(sample, model, codec, cfg, &schedule, lora_pair.as_ref())?;
    let top = ep.levels.len() - 1;
    let mut z = if on.init {
        build_initial_latents(&ep.traj_first[top], &ep.traj_last[top], frames, &coeffs)?
    } else {
        random_initial_latents(&ep.traj_first[top], &ep.traj_last[top], frames, cfg.seed)?
    };
    let ctx = if on.init {
        frame_text_embeddings(&ep.c_first, &ep.c_last, frames, &coeffs)?
    } else {
        nearest_captions(&ep.c_first, &ep.c_last, frames)
    };
    let ctx_rev = reversed_context(&ctx);
    let cond_rev = ep.cond.swapped();
    let guidance = cfg.sampler.guidance();
    let fwd = Guided {
        model,
        ctx: &ctx,
        null: &ep.null,
        cond: &ep.cond,
        guidance: &guidance,
        lora: lora_fwd.as_ref(),
        rotate: false,
    };
    let bwd = Guided {
        ctx: &ctx_rev,
        cond: &cond_rev,
        lora: lora_bwd.as_ref(),
        rotate: true,
        ..fwd
    };
    let steps = top;
    for k in (1..=top).rev() {
        let (t, t_prev) = (ep.levels[k], ep.levels[k - 1]);
        let step_index = steps - k;
        let mut eps = fwd.eps(&z, t)?;
        if on.bmp {
            let eps_b = bwd.eps(&flip_temporal(&z), t)?;
            eps = fuse_noise(&eps, &eps_b, cfg.bmp.lambda)?;
        }
        if on.init {
            let w = inject_weight(step_index, steps, &coeffs);
            if w > 0.0 {
                for n in 1..frames - 1 {
                    let target = interpolated_frame(&ep.traj_first[k], &ep.traj_last[k], coeffs.lambda_noise[n])?;
                    let blended = &z.frame(n) * (1.0 - w) + &target * w;
                    z.set_frame(n, &blended);
                }
            }
        }
        z = ddim_update(&z, &eps, schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?, cfg.sampler.clamp_x0)?;
        anchor(&mut z, &ep, k - 1);
    }
    Ok(Transition {
        frames: decode(codec, &z)?,
        latents: z,
    })
}

/// Reference sampler without any of the method's components: random
/// intermediate noise, nearest-endpoint captions, forward prediction only.
pub fn baseline_transition(
    sample: &TransitionSample,
    model: &Denoiser,
    codec: &LatentCodec,
    cfg: &RunConfig,
) -> Result<Transition> {
    let frames = cfg.data.frames;
    check_inputs(sample, model, codec, frames)?;
    let schedule = NoiseSchedule::training_default();
    let ep = prepare_endpoints(sample, model, codec, cfg, &schedule, None)?;
    let top = ep.levels.len() - 1;
    let mut z = random_initial_latents(&ep.traj_first[top], &ep.traj_last[top], frames, cfg.seed)?;
    let ctx = nearest_captions(&ep.c_first, &ep.c_last, frames);
    let guidance = cfg.sampler.guidance();
    let g = Guided {
        model,
        ctx: &ctx,
        null: &ep.null,
        cond: &ep.cond,
        guidance: &guidance,
        lora: None,
        rotate: false,
    };
    for k in (1..=top).rev() {
        let (t, t_prev) = (ep.levels[k], ep.levels[k - 1]);
        let eps = g.eps(&z, t)?;
        z = ddim_update(&z, &eps, schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?, cfg.sampler.clamp_x0)?;
        anchor(&mut z, &ep, k - 1);
    }
    Ok(Transition {
        frames: decode(codec, &z)?,
        latents: z,
    })
}

/// A component that can be switched off for an ablation without extra inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Init,
    Bmp,
}

impl Component {
    fn set(self, cfg: &mut RunConfig, on: bool) {
        match self {
            Component::Init => cfg.init.enabled = on,
            Component::Bmp => cfg.bmp.enabled = on,
        }
    }
}

/// Metrics for one pair with the component on and off under the same seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: String,
    pub on: MetricsReport,
    pub off: MetricsReport,
}

/// Seed-matched ablation of `component` over `samples`. Every other setting
/// comes from `cfg`; adapters must be disabled.
pub fn ablation(
    samples: &[TransitionSample],
    model: &Denoiser,
    codec: &LatentCodec,
    cfg: &RunConfig,
    component: Component,
    dist: &dyn PerceptualDistance,
    emb: &dyn EmbeddingProvider,
) -> Result<Vec<AblationRow>> {
    if cfg.lora.enabled {
        return Err(invalid("ablations run without adapters; set lora.enabled = false"));
    }
    let run = |on: bool, s: &TransitionSample| -> Result<MetricsReport> {
        let mut c = cfg.clone();
        component.set(&mut c, on);
        let out = generate_transition(s, model, None, codec, &c)?;
        evaluate_transition(&s.id, &out.frames, &s.first_frame, &s.last_frame, dist, emb, cfg.metrics.tau)
    };
    samples
        .iter()
        .map(|s| {
            Ok(AblationRow {
                id: s.id.clone(),
                on: run(true, s)?,
                off: run(false, s)?,
            })
        })
        .collect()
}

/// Record of one endpoint adapter used by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub endpoint: String,
    pub key: String,
    pub path: PathBuf,
    pub seed: u64,
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
    pub scale: f64,
    pub reused: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<LoraReport>,
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Content key of an adapter: frame pixels, caption, adapter settings, seed
/// and the backbone it was fitted to.
pub fn adapter_key(frame: &Image, caption: &str, cfg: &RunConfig, seed: u64, backbone: &str) -> Result<String> {
    let rgb = image_to_rgb8(frame);
    let settings = serde_json::to_vec(&cfg.lora)?;
    Ok(sha_hex(&[rgb.as_raw(), caption.as_bytes(), &settings, &seed.to_le_bytes(), backbone.as_bytes()]))
}

/// Load the two endpoint adapters from `cache`, training and storing any
/// that are missing.
pub fn ensure_adapters(
    sample: &TransitionSample,
    model: &Denoiser,
    codec: &LatentCodec,
    cfg: &RunConfig,
    backbone_hash: &str,
    cache: &Path,
) -> Result<(LoraAdapter, LoraAdapter, Vec<AdapterRecord>)> {
    let text = text_encoder_for(model)?;
    let schedule = NoiseSchedule::training_default();
    let mut out = Vec::new();
    let mut records = Vec::new();
    for (i, (name, frame, caption)) in [
        ("first", &sample.first_frame, &sample.caption_first),
        ("last", &sample.last_frame, &sample.caption_last),
    ]
    .into_iter()
    .enumerate()
    {
        let seed = cfg.seed.wrapping_add(0x10A0 + i as u64);
        let key = adapter_key(frame, caption, cfg, seed, backbone_hash)?;
        let dir = cache.join(&key);
        let (adapter, reused, report) = if dir.join("manifest.json").exists() {
            (checkpoint::load_adapter(&dir)?, true, None)
        } else {
            let latent = codec.encode_frame(frame)?;
            let emb = text.encode(caption);
            let (a, rep) = train_lora(model, LoraTarget { latent: &latent, caption: &emb }, &schedule, &cfg.lora, seed)?;
            checkpoint::save_adapter(&dir, &a, serde_json::json!({ "caption": caption, "report": rep }))?;
            (a, false, Some(rep))
        };
        adapter.check(model)?;
        records.push(AdapterRecord {
            endpoint: name.into(),
            key,
            path: dir,
            seed,
            rank: adapter.rank,
            steps: cfg.lora.steps,
            lr: cfg.lora.lr,
            scale: adapter.scale,
            reused,
            report,
        });
        out.push(adapter);
    }
    let an = out.pop().expect("two adapters");
    let a1 = out.pop().expect("two adapters");
    Ok((a1, an, records))
}

/// Everything that determined a generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub sample_id: String,
    pub pair: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_hash: String,
    pub seed: u64,
    pub toggles: Toggles,
    pub config: RunConfig,
    pub adapters: Vec<AdapterRecord>,
    pub frames_dir: PathBuf,
    pub gif: PathBuf,
    pub frame_hashes: Vec<String>,
}

impl RunManifest {
    pub const FORMAT: &'static str = "vtg-run";

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format != Self::FORMAT {
            return Err(invalid(format!("{} is not a run manifest", path.display())));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// SHA-256 of each frame's 8-bit pixels.
pub fn frame_hashes(frames: &[Image]) -> Vec<String> {
    frames.iter().map(|f| sha_hex(&[image_to_rgb8(f).as_raw()])).collect()
}

/// Result of [`train_model`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub initial_eval: f64,
    pub final_eval: f64,
}

/// Encode `samples` for training under `cfg`.
pub fn training_videos(samples: &[TransitionSample], model: &Denoiser, cfg: &RunConfig) -> Result<Vec<TrainingVideo>> {
    let codec = codec_for(cfg)?;
    let text = text_encoder_for(model)?;
    if cfg.rar.enabled {
        let (h, w, _) = first_frame(samples)?.dim();
        let enc = reference_encoder(cfg, (h, w))?;
        prepare(samples, &codec, &text, Some((&enc, tap_grid(model, &cfg.rar)?)))
    } else {
        prepare(samples, &codec, &text, None)
    }
}

fn first_frame(samples: &[TransitionSample]) -> Result<&Image> {
    samples
        .first()
        .map(|s| &s.first_frame)
        .ok_or_else(|| invalid("empty dataset"))
}

/// The frozen reference encoder named by the configuration.
pub fn reference_encoder(cfg: &RunConfig, image_size: (usize, usize)) -> Result<ReferenceEncoder> {
    if cfg.rar.encoder == "builtin_random" {
        ReferenceEncoder::builtin(image_size)
    } else {
        Err(Error::Config(format!(
            "reference encoder `{}` is not available; only builtin_random is supported",
            cfg.rar.encoder
        )))
    }
}

/// Train a denoiser from scratch (or resume from `resume`) on `samples`.
pub fn train_model(
    samples: &[TransitionSample],
    cfg: &RunConfig,
    ckpt_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(invalid("training needs a non-empty dataset"));
    }
    cfg.validate()?;
    let schedule = NoiseSchedule::training_default();
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(dir)?,
        None => {
            let model = Denoiser::new(cfg.model.clone(), candle_core::DType::F32, cfg.seed)?;
            let projector = if cfg.rar.enabled {
                let (h, w, _) = first_frame(samples)?.dim();
                Some(build_projector(&model, &cfg.rar, &reference_encoder(cfg, (h, w))?, cfg.seed ^ 0x9A0)?)
            } else {
                None
            };
            Trainer::new(model, projector, &cfg.train)
        }
    };
    let data = training_videos(samples, &trainer.model, cfg)?;
    let initial_eval = crate::training::eval_loss(&trainer.model, &schedule, &data, 4, cfg.seed)?;
    trainer.run(&data, &schedule, &cfg.train, &cfg.rar, cfg.seed, cfg.train.steps, ckpt_dir)?;
    let final_eval = crate::training::eval_loss(&trainer.model, &schedule, &data, 4, cfg.seed)?;
    Ok(TrainOutcome {
        trainer,
        initial_eval,
        final_eval,
    })
}

/// Backward-motion fine-tuning of a trained model on `train`, scored on `heldout`.
pub fn finetune_bmp_model(
    model: &mut Denoiser,
    train: &[TransitionSample],
    heldout: &[TransitionSample],
    cfg: &RunConfig,
) -> Result<BmpReport> {
    let mut plain = cfg.clone();
    plain.rar.enabled = false;
    let data = training_videos(train, model, &plain)?;
    let held = if heldout.is_empty() {
        Vec::new()
    } else {
        training_videos(heldout, model, &plain)?
    };
    finetune_bmp(model, &data, &held, &NoiseSchedule::training_default(), &cfg.bmp, cfg.seed)
}
