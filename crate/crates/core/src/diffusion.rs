//! Noise schedules, forward corruption, deterministic DDIM sampling/inversion
//! and classifier-free guidance.
//!
//! All sampler arithmetic is carried out in `f64` on [`LatentVideo`]s; the
//! denoiser itself runs at whatever precision it was built with.

use ndarray::{Array3, Array4, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Beta progression of a [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

/// β/α/ᾱ tables for timesteps `1..=T`. Timestep 0 denotes clean data (ᾱ = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Training-time defaults: 1000 steps, scaled-linear betas 8.5e-4..0.012.
pub const TRAIN_STEPS: usize = 1000;
pub const BETA_START: f64 = 8.5e-4;
pub const BETA_END: f64 = 0.012;
/// Default number of DDIM inference steps.
pub const INFERENCE_STEPS: usize = 50;

pub fn make_schedule(
    total_steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if total_steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let frac = |i: usize| {
        if total_steps == 1 {
            0.0
        } else {
            i as f64 / (total_steps - 1) as f64
        }
    };
    let betas: Vec<f64> = (0..total_steps)
        .map(|i| match kind {
            ScheduleKind::Linear => beta_start + (beta_end - beta_start) * frac(i),
            ScheduleKind::ScaledLinear => {
                let (s, e) = (beta_start.sqrt(), beta_end.sqrt());
                let b = s + (e - s) * frac(i);
                b * b
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0f64, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    /// The conventional latent-diffusion training schedule.
    pub fn training_default() -> Self {
        make_schedule(TRAIN_STEPS, BETA_START, BETA_END, ScheduleKind::ScaledLinear)
            .expect("default schedule is valid")
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// ᾱ at timestep `t`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.total_steps() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::TimestepOutOfRange {
                t,
                max: self.total_steps(),
            }),
        }
    }

    /// Uniform-stride timesteps for `steps` inference steps, ascending
    /// (`T/steps, 2T/steps, ..., T`).
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.total_steps();
        if steps == 0 || steps > total {
            return Err(invalid(format!("inference steps must be in 1..={total}")));
        }
        Ok((1..=steps)
            .map(|k| ((k * total) as f64 / steps as f64).round() as usize)
            .collect())
    }
}

/// Frame latents, `N x C x h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    data: Array4<f64>,
}

impl LatentVideo {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape()[0] == 0 {
            return Err(invalid("latent video needs at least one frame"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent video".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(frames: usize, channels: usize, h: usize, w: usize) -> Self {
        Self {
            data: Array4::zeros((frames, channels, h, w)),
        }
    }

    /// Stack per-frame latents along a new leading axis.
    pub fn from_frames(frames: &[Array3<f64>]) -> Result<Self> {
        let views: Vec<ArrayView3<f64>> = frames.iter().map(|f| f.view()).collect();
        let data = ndarray::stack(Axis(0), &views)
            .map_err(|e| invalid(format!("cannot stack frames: {e}")))?;
        Self::new(data)
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn frame(&self, n: usize) -> Array3<f64> {
        self.data.index_axis(Axis(0), n).to_owned()
    }

    pub fn set_frame(&mut self, n: usize, frame: &Array3<f64>) {
        self.data.index_axis_mut(Axis(0), n).assign(frame);
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            data: &self.data * a,
        }
    }

    /// Euclidean norm of all entries.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_same_shape(&self, other: &LatentVideo) -> Result<()> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.data.shape().to_vec(),
                got: other.data.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    pub fn combine(&self, a: f64, other: &LatentVideo, b: f64) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = Zip::from(&self.data)
            .and(&other.data)
            .map_collect(|x, y| a * x + b * y);
        Ok(Self { data })
    }
}

/// `√ᾱ·z0 + √(1−ᾱ)·eps` for an explicit ᾱ.
pub fn add_noise_with_alpha_bar(
    z0: &LatentVideo,
    eps: &LatentVideo,
    alpha_bar: f64,
) -> Result<LatentVideo> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(invalid(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    z0.combine(alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

pub fn add_noise(
    z0: &LatentVideo,
    eps: &LatentVideo,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentVideo> {
    if t == 0 {
        return Err(Error::TimestepOutOfRange {
            t,
            max: schedule.total_steps(),
        });
    }
    add_noise_with_alpha_bar(z0, eps, schedule.alpha_bar(t)?)
}

/// Deterministic DDIM move from noise level `ab_from` to `ab_to`:
/// predict ẑ0 from `z`, then re-noise it with the same `eps_hat`.
pub fn ddim_update(
    z: &LatentVideo,
    eps_hat: &LatentVideo,
    ab_from: f64,
    ab_to: f64,
    clamp_x0: Option<f64>,
) -> Result<LatentVideo> {
    z.check_same_shape(eps_hat)?;
    if ab_from <= 0.0 {
        return Err(invalid("degenerate step: alpha_bar is zero"));
    }
    let (sa_from, sn_from) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (sa_to, sn_to) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    let data = Zip::from(z.data())
        .and(eps_hat.data())
        .map_collect(|&zt, &e| {
            let mut x0 = (zt - sn_from * e) / sa_from;
            if let Some(c) = clamp_x0 {
                x0 = x0.clamp(-c, c);
            }
            sa_to * x0 + sn_to * e
        });
    LatentVideo::new(data)
}

pub fn ddim_step(
    z_t: &LatentVideo,
    eps_hat: &LatentVideo,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentVideo> {
    if t_prev >= t {
        return Err(invalid(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}")));
    }
    ddim_update(
        z_t,
        eps_hat,
        schedule.alpha_bar(t)?,
        schedule.alpha_bar(t_prev)?,
        None,
    )
}

/// One inversion step: the DDIM recurrence with the timesteps exchanged.
pub fn ddim_invert_step(
    z_t: &LatentVideo,
    eps_hat: &LatentVideo,
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentVideo> {
    if t_next <= t {
        return Err(invalid(format!(
            "ddim_invert_step needs t_next > t, got {t_next} <= {t}"
        )));
    }
    ddim_update(
        z_t,
        eps_hat,
        schedule.alpha_bar(t)?,
        schedule.alpha_bar(t_next)?,
        None,
    )
}

/// Classifier-free guidance settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub negative_prompt: String,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 2.0,
            negative_prompt: String::new(),
        }
    }
}

pub fn cfg_combine(
    eps_cond: &LatentVideo,
    eps_uncond: &LatentVideo,
    guidance: &GuidanceConfig,
) -> Result<LatentVideo> {
    eps_cond.check_same_shape(eps_uncond)?;
    let w = guidance.scale;
    if !(w >= 0.0) {
        return Err(invalid(format!("guidance scale must be >= 0, got {w}")));
    }
    // The endpoints of the guidance line are returned verbatim so that w = 1
    // is bitwise the conditional prediction.
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let data = Zip::from(eps_uncond.data())
        .and(eps_cond.data())
        .map_collect(|&u, &c| u + w * (c - u));
    LatentVideo::new(data)
}
