//! The toy latent video denoiser ε_θ.
//!
//! A two-level U-Net over per-frame latent grids. Every block is a residual
//! convolution block followed by a transformer block with spatial
//! self-attention, text cross-attention (one context per frame) and temporal
//! self-attention across the frames at each spatial location. The temporal
//! attention carries a learned relative-position bias and a zero-initialized
//! backward copy of its value/output matrices that is used when attention maps
//! are rotated for backward motion prediction.
//!
//! Endpoint conditioning: the clean first and last latents are concatenated
//! channelwise onto every noisy frame together with a mask marking the
//! endpoint rows, and a pooled projection of each endpoint is appended to the
//! cross-attention context.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::LatentVideo;
use crate::error::{invalid, Error, Result};
use crate::nn::{self, device, Init, ParamStore, View};
use crate::text::TextEmbedding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub base_width: usize,
    pub levels: usize,
    pub attention_heads: usize,
    /// Maximum number of frames a call may carry.
    pub frame_count: usize,
    pub text_embed_dim: usize,
    pub text_len: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
    /// Layers that accept low-rank adapters. Empty means the default set
    /// (spatial self- and cross-attention value/output projections).
    #[serde(default)]
    pub lora_targets: Vec<String>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 192,
            latent_height: 8,
            latent_width: 8,
            base_width: 32,
            levels: 2,
            attention_heads: 4,
            frame_count: 16,
            text_embed_dim: crate::text::DEFAULT_TEXT_DIM,
            text_len: crate::text::DEFAULT_TEXT_LEN,
            time_embed_dim: 64,
            groups: 8,
            lora_targets: Vec::new(),
        }
    }
}

impl DenoiserConfig {
    /// A very small configuration used for gradient checks.
    pub fn miniature() -> Self {
        Self {
            latent_channels: 4,
            latent_height: 8,
            latent_width: 8,
            base_width: 16,
            levels: 2,
            attention_heads: 2,
            frame_count: 4,
            text_embed_dim: 16,
            text_len: 4,
            time_embed_dim: 16,
            groups: 4,
            lora_targets: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.latent_channels,
            self.latent_height,
            self.latent_width,
            self.base_width,
            self.levels,
            self.attention_heads,
            self.frame_count,
            self.text_embed_dim,
            self.text_len,
            self.time_embed_dim,
            self.groups,
        ];
        if positive.iter().any(|v| *v == 0) {
            return Err(invalid("denoiser dimensions must be positive"));
        }
        let scale = 1 << (self.levels - 1);
        if self.latent_height % scale != 0 || self.latent_width % scale != 0 {
            return Err(invalid("latent size must be divisible by 2^(levels-1)"));
        }
        if self.base_width % self.attention_heads != 0 || self.base_width % self.groups != 0 {
            return Err(invalid("base width must be divisible by heads and groups"));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(invalid("time embedding dim must be even"));
        }
        for t in &self.lora_targets {
            if !self.all_lora_layers().contains(t) {
                return Err(Error::UnknownLayer(t.clone()));
            }
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    fn temb_hidden(&self) -> usize {
        4 * self.base_width
    }

    /// Block names in execution order with their level.
    pub fn blocks(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> =
            (0..self.levels).map(|l| (format!("down{l}"), l)).collect();
        out.push(("mid".to_string(), self.levels - 1));
        out.extend((0..self.levels).rev().map(|l| (format!("up{l}"), l)));
        out
    }

    /// Layer names accepted for feature tapping.
    pub fn tap_layers(&self) -> Vec<String> {
        self.blocks().into_iter().map(|(b, _)| b).collect()
    }

    pub fn all_lora_layers(&self) -> Vec<String> {
        self.blocks()
            .iter()
            .flat_map(|(b, _)| {
                ["spatial.v", "spatial.o", "cross.v", "cross.o"]
                    .map(|p| format!("{b}.{p}"))
            })
            .collect()
    }

    pub fn resolved_lora_targets(&self) -> Vec<String> {
        if self.lora_targets.is_empty() {
            self.all_lora_layers()
        } else {
            self.lora_targets.clone()
        }
    }

    /// `(d_out, d_in)` of a linear layer by name (without `.weight`).
    pub fn linear_dims(&self, layer: &str) -> Result<(usize, usize)> {
        let (block, rest) = layer
            .split_once('.')
            .ok_or_else(|| Error::UnknownLayer(layer.into()))?;
        let level = self
            .blocks()
            .into_iter()
            .find(|(b, _)| b == block)
            .map(|(_, l)| l)
            .ok_or_else(|| Error::UnknownLayer(layer.into()))?;
        let w = self.width(level);
        match rest {
            "cross.k" | "cross.v" => Ok((w, self.text_embed_dim)),
            "spatial.q" | "spatial.k" | "spatial.v" | "spatial.o" | "cross.q" | "cross.o"
            | "temporal.q" | "temporal.k" | "temporal.v" | "temporal.o" | "temporal.v_bwd"
            | "temporal.o_bwd" => Ok((w, w)),
            _ => Err(Error::UnknownLayer(layer.into())),
        }
    }

    /// Parameters updated by backward-motion fine-tuning.
    pub fn backward_motion_params(&self) -> Vec<String> {
        self.blocks()
            .iter()
            .flat_map(|(b, _)| {
                [
                    format!("{b}.temporal.v_bwd.weight"),
                    format!("{b}.temporal.o_bwd.weight"),
                ]
            })
            .collect()
    }
}

/// Per-head temporal self-attention over `N` frame indices at one location.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `heads x N x N`, row-stochastic.
    pub weights: Array3<f64>,
}

impl AttentionMap {
    pub fn new(weights: Array3<f64>) -> Result<Self> {
        let (_, r, c) = weights.dim();
        if r != c {
            return Err(invalid(format!("attention map must be square, got {r}x{c}")));
        }
        Ok(Self { weights })
    }

    pub fn frames(&self) -> usize {
        self.weights.dim().1
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.weights
            .lanes(Axis(2))
            .into_iter()
            .map(|row| (row.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Activation captured at a named layer: `B x N x C' x h' x w'`.
#[derive(Debug, Clone)]
pub struct FeatureTap {
    pub layer: String,
    pub activation: Tensor,
}

/// Clean endpoint latents (`C x h x w` each) a transition is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub first: Array3<f64>,
    pub last: Array3<f64>,
}

impl Conditioning {
    /// Conditioning for the time-reversed video.
    pub fn swapped(&self) -> Self {
        Self {
            first: self.last.clone(),
            last: self.first.clone(),
        }
    }
}

/// Low-rank deltas ready for a forward pass. Matrices are either shared by all
/// frames (`A: r x d_in`, `B: d_out x r`) or stacked per frame
/// (`A: N x r x d_in`, `B: N x d_out x r`).
#[derive(Debug, Clone)]
pub struct LoraWeights {
    pub scale: f64,
    pub per_frame: bool,
    pub layers: BTreeMap<String, (Tensor, Tensor)>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOpts<'a> {
    pub rotate_attention: bool,
    pub lora: Option<&'a LoraWeights>,
    pub tap: Option<&'a str>,
    pub capture_attention: bool,
}

/// Batched model inputs in the model's dtype.
#[derive(Debug, Clone)]
pub struct ForwardInputs {
    /// `B x N x C x h x w`
    pub z_t: Tensor,
    pub t: Vec<usize>,
    /// `B x N x L x d`
    pub ctx: Tensor,
    /// `B x C x h x w`
    pub first: Tensor,
    pub last: Tensor,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `B x N x C x h x w`
    pub eps: Tensor,
    pub tap: Option<FeatureTap>,
    /// Temporal attention maps per block, `B·h·w x heads x N x N`.
    pub attention: Vec<(String, Tensor)>,
}

/// One video's worth of conditioning for [`Denoiser::denoise`].
#[derive(Debug, Clone, Copy)]
pub struct DenoiseRequest<'a> {
    pub z_t: &'a LatentVideo,
    pub t: usize,
    /// One embedding per frame, or a single embedding broadcast to all frames.
    pub ctx: &'a [TextEmbedding],
    pub cond: &'a Conditioning,
}

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub eps: LatentVideo,
    pub tap: Option<FeatureTap>,
    pub attention: Vec<(String, AttentionMap)>,
}

#[derive(Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

fn rev_index(n: usize) -> Result<Tensor> {
    let idx: Vec<u32> = (0..n as u32).rev().collect();
    Ok(Tensor::from_vec(idx, n, &device())?)
}

/// `A'[i][j] = A[N-1-i][N-1-j]` on the trailing two axes.
pub(crate) fn rotate180_tensor(a: &Tensor) -> Result<Tensor> {
    let rank = a.rank();
    let n = a.dim(rank - 1)?;
    let idx = rev_index(n)?;
    Ok(a.index_select(&idx, rank - 2)?.index_select(&idx, rank - 1)?)
}

pub fn timestep_embedding(t: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ts in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ts as f64 * f).collect();
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(args.iter().map(|a| a.cos()));
    }
    out
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new(dtype);
        let c = &config;
        let lin = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dout: usize, din: usize, bias: bool| -> Result<()> {
            p.add(&format!("{name}.weight"), &[dout, din], Init::Normal(1.0 / (din as f64).sqrt()), rng)?;
            if bias {
                p.add(&format!("{name}.bias"), &[dout], Init::Zeros, rng)?;
            }
            Ok(())
        };
        let conv = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize| -> Result<()> {
            let std = 1.0 / ((cin * 9) as f64).sqrt();
            p.add(&format!("{name}.weight"), &[cout, cin, 3, 3], Init::Normal(std), rng)?;
            p.add(&format!("{name}.bias"), &[cout], Init::Zeros, rng)?;
            Ok(())
        };
        let norm = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, ch: usize| -> Result<()> {
            p.add(&format!("{name}.gamma"), &[ch], Init::Ones, rng)?;
            p.add(&format!("{name}.beta"), &[ch], Init::Zeros, rng)?;
            Ok(())
        };

        let cin = 3 * c.latent_channels + 1;
        lin(&mut p, &mut rng, "conv_in", c.base_width, cin, true)?;
        lin(&mut p, &mut rng, "time.l1", c.temb_hidden(), c.time_embed_dim, true)?;
        lin(&mut p, &mut rng, "time.l2", c.temb_hidden(), c.temb_hidden(), true)?;
        lin(&mut p, &mut rng, "cond.first", c.text_embed_dim, c.latent_channels, true)?;
        lin(&mut p, &mut rng, "cond.last", c.text_embed_dim, c.latent_channels, true)?;

        for (block, level) in c.blocks() {
            let w = c.width(level);
            let win = if block.starts_with("up") {
                2 * w
            } else if block.starts_with("down") && level > 0 {
                c.width(level)
            } else {
                w
            };
            if block.starts_with("up") && level + 1 < c.levels {
                conv(&mut p, &mut rng, &format!("{block}.upsample"), w, c.width(level + 1))?;
            }
            if block.starts_with("down") && level + 1 < c.levels {
                conv(&mut p, &mut rng, &format!("{block}.downsample"), c.width(level + 1), w)?;
            }
            let r = format!("{block}.res");
            norm(&mut p, &mut rng, &format!("{r}.norm1"), win)?;
            conv(&mut p, &mut rng, &format!("{r}.conv1"), w, win)?;
            lin(&mut p, &mut rng, &format!("{r}.temb"), w, c.temb_hidden(), true)?;
            norm(&mut p, &mut rng, &format!("{r}.norm2"), w)?;
            conv(&mut p, &mut rng, &format!("{r}.conv2"), w, w)?;
            if win != w {
                lin(&mut p, &mut rng, &format!("{r}.skip"), w, win, false)?;
            }
            for ln in ["ln1", "ln2", "ln3", "ln4"] {
                norm(&mut p, &mut rng, &format!("{block}.{ln}"), w)?;
            }
            for proj in ["q", "k", "v", "o"] {
                lin(&mut p, &mut rng, &format!("{block}.spatial.{proj}"), w, w, false)?;
                lin(&mut p, &mut rng, &format!("{block}.temporal.{proj}"), w, w, false)?;
            }
            lin(&mut p, &mut rng, &format!("{block}.cross.q"), w, w, false)?;
            lin(&mut p, &mut rng, &format!("{block}.cross.k"), w, c.text_embed_dim, false)?;
            lin(&mut p, &mut rng, &format!("{block}.cross.v"), w, c.text_embed_dim, false)?;
            lin(&mut p, &mut rng, &format!("{block}.cross.o"), w, w, false)?;
            p.add(&format!("{block}.temporal.v_bwd.weight"), &[w, w], Init::Zeros, &mut rng)?;
            p.add(&format!("{block}.temporal.o_bwd.weight"), &[w, w], Init::Zeros, &mut rng)?;
            p.add(
                &format!("{block}.temporal.rel_bias"),
                &[c.attention_heads, 2 * c.frame_count - 1],
                Init::Zeros,
                &mut rng,
            )?;
            lin(&mut p, &mut rng, &format!("{block}.ff.l1"), 2 * w, w, true)?;
            lin(&mut p, &mut rng, &format!("{block}.ff.l2"), w, 2 * w, true)?;
        }
        norm(&mut p, &mut rng, "out.norm", c.base_width)?;
        p.add("out.proj.weight", &[c.latent_channels, c.base_width], Init::Zeros, &mut rng)?;
        p.add("out.proj.bias", &[c.latent_channels], Init::Zeros, &mut rng)?;
        // per-channel, timestep-dependent pass-through of the noisy input
        p.add("out.skip.weight", &[c.latent_channels, c.temb_hidden()], Init::Zeros, &mut rng)?;
        p.add("out.skip.bias", &[c.latent_channels], Init::Zeros, &mut rng)?;
        Ok(Self { config, params: p })
    }

    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), params.dtype(), 0)?;
        for (name, var) in reference.params.iter() {
            let got = params.shape(name)?;
            if got != var.as_tensor().dims() {
                return Err(Error::ShapeMismatch {
                    expected: var.as_tensor().dims().to_vec(),
                    got,
                });
            }
        }
        if params.len() != reference.params.len() {
            return Err(invalid("parameter set does not match the configuration"));
        }
        Ok(Self { config, params })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            params: self.params.deep_clone()?,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            params: self.params.to_dtype(dtype)?,
        })
    }

    /// Batched forward pass with autograd controlled by `view`.
    pub fn forward(&self, view: View, inp: &ForwardInputs, opts: &ForwardOpts) -> Result<ForwardOutput> {
        let c = &self.config;
        let (b, n, ch, h, w) = inp.z_t.dims5()?;
        if ch != c.latent_channels || h != c.latent_height || w != c.latent_width {
            return Err(Error::ShapeMismatch {
                expected: vec![c.latent_channels, c.latent_height, c.latent_width],
                got: vec![ch, h, w],
            });
        }
        if n == 0 || n > c.frame_count {
            return Err(invalid(format!(
                "frame count {n} outside 1..={} supported by the model",
                c.frame_count
            )));
        }
        if inp.t.len() != b {
            return Err(invalid("one timestep per batch entry is required"));
        }
        let ctx_dims = inp.ctx.dims();
        if ctx_dims != [b, n, c.text_len, c.text_embed_dim] {
            return Err(Error::ShapeMismatch {
                expected: vec![b, n, c.text_len, c.text_embed_dim],
                got: ctx_dims.to_vec(),
            });
        }
        if let Some(tap) = opts.tap {
            if !c.tap_layers().iter().any(|l| l == tap) {
                return Err(Error::UnknownLayer(tap.to_string()));
            }
        }
        if let Some(lora) = opts.lora {
            self.check_lora(lora, n)?;
        }
        let dtype = self.dtype();
        let f = b * n;
        let ctx = Ctx {
            view,
            cfg: c,
            b,
            n,
            opts,
            dtype,
        };

        // input projection over [z_t | first | last | mask], split by column
        // block so the endpoint terms are computed once per video
        let hw = h * w;
        let wi = ctx.get("conv_in.weight")?;
        let cols = |from: usize, len: usize| -> Result<Tensor> { Ok(wi.narrow(1, from, len)?.contiguous()?) };
        let tokens = |t: &Tensor, rows: usize| -> Result<Tensor> {
            Ok(t.reshape((rows, ch, hw))?.transpose(1, 2)?.contiguous()?)
        };
        let x = nn::linear(&tokens(&inp.z_t, f)?, &cols(0, ch)?, Some(&ctx.get("conv_in.bias")?))?;
        let ends = (nn::linear(&tokens(&inp.first, b)?, &cols(ch, ch)?, None)?
            + nn::linear(&tokens(&inp.last, b)?, &cols(2 * ch, ch)?, None)?)?;
        let ends = ends
            .unsqueeze(1)?
            .broadcast_as((b, n, hw, c.base_width))?
            .reshape((f, hw, c.base_width))?;
        let mask: Vec<f64> = (0..f)
            .map(|i| {
                let fi = i % n;
                if fi == 0 || fi == n - 1 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mask = Tensor::from_vec(mask, (f, 1, 1), &device())?.to_dtype(dtype)?;
        let mask = mask.broadcast_mul(&cols(3 * ch, 1)?.reshape((1, 1, c.base_width))?)?;
        let x = (x + ends)?.broadcast_add(&mask)?;

        // timestep embedding, one per frame
        let temb = Tensor::from_vec(timestep_embedding(&inp.t, c.time_embed_dim), (b, c.time_embed_dim), &device())?
            .to_dtype(dtype)?;
        let temb = ctx.linear(&temb, "time.l1", true)?;
        let temb = ctx.linear(&nn::silu(&temb)?, "time.l2", true)?;
        let temb = temb
            .unsqueeze(1)?
            .broadcast_as((b, n, c.temb_hidden()))?
            .reshape((f, c.temb_hidden()))?;

        // context: per-frame text plus pooled endpoint tokens
        let pool = |e: &Tensor, name: &str| -> Result<Tensor> {
            let pooled = e.reshape((b, ch, h * w))?.mean(2)?;
            let tok = ctx.linear(&pooled, name, true)?;
            Ok(tok
                .reshape((b, 1, 1, c.text_embed_dim))?
                .broadcast_as((b, n, 1, c.text_embed_dim))?
                .reshape((f, 1, c.text_embed_dim))?)
        };
        let text = inp.ctx.reshape((f, c.text_len, c.text_embed_dim))?;
        let context = Tensor::cat(&[&text, &pool(&inp.first, "cond.first")?, &pool(&inp.last, "cond.last")?], 1)?;

        let mut tap: Option<FeatureTap> = None;
        let mut attention = Vec::new();
        let record = |name: &str, x: &Tensor, level: usize, tap: &mut Option<FeatureTap>| -> Result<()> {
            if opts.tap == Some(name) {
                let (hl, wl) = (h >> level, w >> level);
                let wd = c.width(level);
                let act = x.transpose(1, 2)?.reshape((b, n, wd, hl, wl))?;
                *tap = Some(FeatureTap {
                    layer: name.to_string(),
                    activation: act,
                });
            }
            Ok(())
        };

        let mut skips = Vec::new();
        let mut x = x;
        for level in 0..c.levels {
            let name = format!("down{level}");
            let (hl, wl) = (h >> level, w >> level);
            x = ctx.res_block(&x, &format!("{name}.res"), &temb, hl, wl)?;
            x = ctx.transformer(&x, &name, &context, hl, wl, &mut attention)?;
            record(&name, &x, level, &mut tap)?;
            skips.push(x.clone());
            if level + 1 < c.levels {
                let s = x.reshape((f, hl, wl, c.width(level)))?;
                let s = nn::conv2d(&s, &ctx.get(&format!("{name}.downsample.weight"))?, Some(&ctx.get(&format!("{name}.downsample.bias"))?), 2, 1)?;
                x = s.reshape((f, (hl / 2) * (wl / 2), c.width(level + 1)))?;
            }
        }
        let top = c.levels - 1;
        let (ht, wt) = (h >> top, w >> top);
        x = ctx.res_block(&x, "mid.res", &temb, ht, wt)?;
        x = ctx.transformer(&x, "mid", &context, ht, wt, &mut attention)?;
        record("mid", &x, top, &mut tap)?;

        for level in (0..c.levels).rev() {
            let name = format!("up{level}");
            let (hl, wl) = (h >> level, w >> level);
            if level < top {
                let s = nn::upsample2x(&x.reshape((f, hl / 2, wl / 2, c.width(level + 1)))?)?;
                let s = nn::conv2d(&s, &ctx.get(&format!("{name}.upsample.weight"))?, Some(&ctx.get(&format!("{name}.upsample.bias"))?), 1, 1)?;
                x = s.reshape((f, hl * wl, c.width(level)))?;
            }
            let skip = skips.pop().expect("one skip per level");
            x = Tensor::cat(&[&x, &skip], 2)?;
            x = ctx.res_block(&x, &format!("{name}.res"), &temb, hl, wl)?;
            x = ctx.transformer(&x, &name, &context, hl, wl, &mut attention)?;
            record(&name, &x, level, &mut tap)?;
        }

        let s = nn::group_norm(&x, c.groups, &ctx.get("out.norm.gamma")?, &ctx.get("out.norm.beta")?, 1e-5)?;
        let out = ctx.linear(&nn::silu(&s)?, "out.proj", true)?;
        let eps = out.transpose(1, 2)?.contiguous()?.reshape((b, n, ch, h, w))?;
        let gate = ctx.linear(&nn::silu(&temb)?, "out.skip", true)?.reshape((b, n, ch, 1, 1))?;
        let eps = (eps + inp.z_t.broadcast_mul(&gate)?)?;
        Ok(ForwardOutput { eps, tap, attention })
    }

    fn check_lora(&self, lora: &LoraWeights, n: usize) -> Result<()> {
        for (layer, (a, bm)) in &lora.layers {
            if !self.config.all_lora_layers().contains(layer) {
                return Err(Error::UnknownLayer(layer.clone()));
            }
            let (dout, din) = self.config.linear_dims(layer)?;
            let (ad, bd) = (a.dims(), bm.dims());
            let ok = if lora.per_frame {
                ad.len() == 3 && bd.len() == 3 && ad[0] == n && bd[0] == n && ad[2] == din && bd[1] == dout && ad[1] == bd[2]
            } else {
                ad.len() == 2 && bd.len() == 2 && ad[1] == din && bd[0] == dout && ad[0] == bd[1]
            };
            if !ok {
                return Err(invalid(format!(
                    "adapter for {layer} has shapes {ad:?}/{bd:?}, layer is {dout}x{din}"
                )));
            }
        }
        Ok(())
    }

    /// Convert per-video requests into batched tensors.
    pub fn inputs(&self, reqs: &[DenoiseRequest]) -> Result<ForwardInputs> {
        let c = &self.config;
        if reqs.is_empty() {
            return Err(invalid("empty denoise batch"));
        }
        let n = reqs[0].z_t.frames();
        let mut z = Vec::new();
        let mut ctx = Vec::new();
        let mut first = Vec::new();
        let mut last = Vec::new();
        let mut ts = Vec::new();
        for r in reqs {
            if r.z_t.frames() != n {
                return Err(invalid("all videos in a batch need the same frame count"));
            }
            z.extend(r.z_t.data().iter().copied());
            let per_frame: Vec<&TextEmbedding> = match r.ctx.len() {
                1 => vec![&r.ctx[0]; n],
                k if k == n => r.ctx.iter().collect(),
                k => {
                    return Err(invalid(format!(
                        "context needs 1 or {n} embeddings, got {k}"
                    )))
                }
            };
            for e in per_frame {
                if e.tokens.dim() != (c.text_len, c.text_embed_dim) {
                    return Err(Error::ShapeMismatch {
                        expected: vec![c.text_len, c.text_embed_dim],
                        got: e.tokens.shape().to_vec(),
                    });
                }
                ctx.extend(e.tokens.iter().copied());
            }
            for (dst, src) in [(&mut first, &r.cond.first), (&mut last, &r.cond.last)] {
                if src.dim() != (c.latent_channels, c.latent_height, c.latent_width) {
                    return Err(Error::ShapeMismatch {
                        expected: vec![c.latent_channels, c.latent_height, c.latent_width],
                        got: src.shape().to_vec(),
                    });
                }
                dst.extend(src.iter().copied());
            }
            ts.push(r.t);
        }
        let [_, ch, h, w] = reqs[0].z_t.shape();
        let b = reqs.len();
        let dt = self.dtype();
        let dev = device();
        Ok(ForwardInputs {
            z_t: Tensor::from_vec(z, (b, n, ch, h, w), &dev)?.to_dtype(dt)?,
            t: ts,
            ctx: Tensor::from_vec(ctx, (b, n, c.text_len, c.text_embed_dim), &dev)?.to_dtype(dt)?,
            first: Tensor::from_vec(first, (b, ch, h, w), &dev)?.to_dtype(dt)?,
            last: Tensor::from_vec(last, (b, ch, h, w), &dev)?.to_dtype(dt)?,
        })
    }

    /// Inference-time noise prediction for a batch of videos.
    pub fn denoise_batch(&self, reqs: &[DenoiseRequest], opts: &ForwardOpts) -> Result<Vec<LatentVideo>> {
        let inp = self.inputs(reqs)?;
        let out = self.forward(View::frozen(&self.params), &inp, opts)?;
        split_videos(&out.eps)
    }

    /// Noise prediction for a single video.
    pub fn denoise(&self, req: DenoiseRequest, opts: &ForwardOpts) -> Result<DenoiseOutput> {
        let inp = self.inputs(&[req])?;
        let out = self.forward(View::frozen(&self.params), &inp, opts)?;
        let eps = split_videos(&out.eps)?.pop().expect("one video");
        let attention = out
            .attention
            .into_iter()
            .map(|(name, t)| {
                let t = t.to_dtype(DType::F64)?;
                let (l, hd, nn_, _) = t.dims4()?;
                let v: Vec<f64> = t.flatten_all()?.to_vec1()?;
                // first spatial location
                let _ = l;
                let arr = Array3::from_shape_vec((hd, nn_, nn_), v[..hd * nn_ * nn_].to_vec())
                    .map_err(|e| invalid(e.to_string()))?;
                Ok((name, AttentionMap::new(arr)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DenoiseOutput {
            eps,
            tap: out.tap,
            attention,
        })
    }
}

/// Split a `B x N x C x h x w` tensor into f64 latent videos.
pub fn split_videos(t: &Tensor) -> Result<Vec<LatentVideo>> {
    let (b, n, c, h, w) = t.dims5()?;
    let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let per = n * c * h * w;
    (0..b)
        .map(|i| {
            let arr = Array4::from_shape_vec((n, c, h, w), v[i * per..(i + 1) * per].to_vec())
                .map_err(|e| invalid(e.to_string()))?;
            LatentVideo::new(arr)
        })
        .collect()
}

/// Stack latent videos into a `B x N x C x h x w` tensor.
pub fn stack_videos(videos: &[&LatentVideo], dtype: DType) -> Result<Tensor> {
    let [n, c, h, w] = videos[0].shape();
    let mut v = Vec::with_capacity(videos.len() * n * c * h * w);
    for vid in videos {
        if vid.shape() != [n, c, h, w] {
            return Err(Error::ShapeMismatch {
                expected: vec![n, c, h, w],
                got: vid.shape().to_vec(),
            });
        }
        v.extend(vid.data().iter().copied());
    }
    Ok(Tensor::from_vec(v, (videos.len(), n, c, h, w), &device())?.to_dtype(dtype)?)
}

struct Ctx<'a> {
    view: View<'a>,
    cfg: &'a DenoiserConfig,
    b: usize,
    n: usize,
    opts: &'a ForwardOpts<'a>,
    dtype: DType,
}

impl Ctx<'_> {
    fn get(&self, name: &str) -> Result<Tensor> {
        self.view.get(name)
    }

    fn linear(&self, x: &Tensor, name: &str, bias: bool) -> Result<Tensor> {
        let w = self.get(&format!("{name}.weight"))?;
        let b = if bias {
            Some(self.get(&format!("{name}.bias"))?)
        } else {
            None
        };
        nn::linear(x, &w, b.as_ref())
    }

    /// Linear layer that picks up a low-rank delta when an adapter targets it.
    fn adapted(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let y = self.linear(x, name, false)?;
        let Some(lora) = self.opts.lora else {
            return Ok(y);
        };
        let Some((a, bm)) = lora.layers.get(name) else {
            return Ok(y);
        };
        let (f, t, din) = x.dims3()?;
        let delta = if lora.per_frame {
            let xs = x.reshape((self.b, self.n, t, din))?;
            let low = xs.broadcast_matmul(&a.t()?.contiguous()?)?;
            let out = low.broadcast_matmul(&bm.t()?.contiguous()?)?;
            out.reshape((f, t, bm.dim(1)?))?
        } else {
            let low = nn::linear(x, a, None)?;
            nn::linear(&low, bm, None)?
        };
        Ok((y + delta.affine(lora.scale, 0.0)?)?)
    }

    fn ln(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        nn::layer_norm(x, &self.get(&format!("{name}.gamma"))?, &self.get(&format!("{name}.beta"))?, 1e-5)
    }

    fn res_block(&self, x: &Tensor, name: &str, temb: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let g = self.cfg.groups;
        let (f, t, cin) = x.dims3()?;
        let hdn = nn::group_norm(x, g, &self.get(&format!("{name}.norm1.gamma"))?, &self.get(&format!("{name}.norm1.beta"))?, 1e-5)?;
        let hdn = nn::conv2d(&nn::silu(&hdn)?.reshape((f, h, w, cin))?, &self.get(&format!("{name}.conv1.weight"))?, Some(&self.get(&format!("{name}.conv1.bias"))?), 1, 1)?;
        let wd = hdn.dim(3)?;
        let hdn = hdn.reshape((f, t, wd))?;
        let tp = self.linear(&nn::silu(temb)?, &format!("{name}.temb"), true)?;
        let hdn = hdn.broadcast_add(&tp.reshape((f, 1, wd))?)?;
        let hdn = nn::group_norm(&hdn, g, &self.get(&format!("{name}.norm2.gamma"))?, &self.get(&format!("{name}.norm2.beta"))?, 1e-5)?;
        let hdn = nn::conv2d(&nn::silu(&hdn)?.reshape((f, h, w, wd))?, &self.get(&format!("{name}.conv2.weight"))?, Some(&self.get(&format!("{name}.conv2.bias"))?), 1, 1)?;
        let skip = if self.view.store.contains(&format!("{name}.skip.weight")) {
            self.linear(x, &format!("{name}.skip"), false)?
        } else {
            x.clone()
        };
        Ok((hdn.reshape((f, t, wd))? + skip)?)
    }

    fn heads(&self, x: &Tensor) -> Result<Tensor> {
        let (f, t, w) = x.dims3()?;
        let hd = self.cfg.attention_heads;
        Ok(x.reshape((f, t, hd, w / hd))?.transpose(1, 2)?.contiguous()?)
    }

    fn merge_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (f, hd, t, d) = x.dims4()?;
        Ok(x.transpose(1, 2)?.contiguous()?.reshape((f, t, hd * d))?)
    }

    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let d = q.dim(D::Minus1)? as f64;
        let s = q.matmul(&k.t()?)?.affine(1.0 / d.sqrt(), 0.0)?;
        let a = nn::softmax_last(&s)?;
        Ok(a.matmul(v)?)
    }

    fn transformer(
        &self,
        x: &Tensor,
        name: &str,
        context: &Tensor,
        h: usize,
        w: usize,
        attention: &mut Vec<(String, Tensor)>,
    ) -> Result<Tensor> {
        // spatial self-attention
        let hn = self.ln(x, &format!("{name}.ln1"))?;
        let q = self.heads(&self.linear(&hn, &format!("{name}.spatial.q"), false)?)?;
        let k = self.heads(&self.linear(&hn, &format!("{name}.spatial.k"), false)?)?;
        let v = self.heads(&self.adapted(&hn, &format!("{name}.spatial.v"))?)?;
        let o = self.merge_heads(&self.attend(&q, &k, &v)?)?;
        let x = (x + self.adapted(&o, &format!("{name}.spatial.o"))?)?;

        // cross-attention to the per-frame context
        let hn = self.ln(&x, &format!("{name}.ln2"))?;
        let q = self.heads(&self.linear(&hn, &format!("{name}.cross.q"), false)?)?;
        let k = self.heads(&self.linear(context, &format!("{name}.cross.k"), false)?)?;
        let v = self.heads(&self.adapted(context, &format!("{name}.cross.v"))?)?;
        let o = self.merge_heads(&self.attend(&q, &k, &v)?)?;
        let x = (&x + self.adapted(&o, &format!("{name}.cross.o"))?)?;

        // temporal self-attention at each spatial location
        let hn = self.ln(&x, &format!("{name}.ln3"))?;
        let x = (&x + self.temporal(&hn, name, h * w, attention)?)?;

        // feed-forward
        let hn = self.ln(&x, &format!("{name}.ln4"))?;
        let ff = self.linear(&nn::silu(&self.linear(&hn, &format!("{name}.ff.l1"), true)?)?, &format!("{name}.ff.l2"), true)?;
        Ok((x + ff)?)
    }

    fn temporal(&self, x: &Tensor, name: &str, p: usize, attention: &mut Vec<(String, Tensor)>) -> Result<Tensor> {
        let (b, n) = (self.b, self.n);
        let wd = x.dim(2)?;
        let heads = self.cfg.attention_heads;
        let hd = wd / heads;
        // (B·N, P, W) -> (B·P, N, W)
        let seq = x
            .reshape((b, n, p, wd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * p, n, wd))?;
        let rotate = self.opts.rotate_attention;
        let weight = |proj: &str| -> Result<Tensor> {
            let base = self.get(&format!("{name}.temporal.{proj}.weight"))?;
            if rotate && (proj == "v" || proj == "o") {
                Ok((base + self.get(&format!("{name}.temporal.{proj}_bwd.weight"))?)?)
            } else {
                Ok(base)
            }
        };
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b * p, n, heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(nn::linear(&seq, &weight("q")?, None)?)?;
        let k = split(nn::linear(&seq, &weight("k")?, None)?)?;
        let v = split(nn::linear(&seq, &weight("v")?, None)?)?;
        let scores = q.matmul(&k.t()?)?.affine(1.0 / (hd as f64).sqrt(), 0.0)?;
        // relative position bias indexed by i - j
        let nmax = self.cfg.frame_count;
        let idx: Vec<u32> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i + nmax - 1 - j) as u32))
            .collect();
        let idx = Tensor::from_vec(idx, n * n, &device())?;
        let bias = self
            .get(&format!("{name}.temporal.rel_bias"))?
            .index_select(&idx, 1)?
            .reshape((1, heads, n, n))?;
        let scores = scores.broadcast_add(&bias)?;
        let mut a = nn::softmax_last(&scores)?;
        if rotate {
            a = rotate180_tensor(&a)?;
        }
        if self.opts.capture_attention {
            attention.push((name.to_string(), a.detach()));
        }
        let out = a.matmul(&v)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b * p, n, wd))?;
        let out = nn::linear(&out, &weight("o")?, None)?;
        let _ = self.dtype;
        Ok(out
            .reshape((b, p, n, wd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * n, p, wd))?)
    }
}
