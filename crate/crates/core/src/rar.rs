//! Representation alignment: patchified diffusion features are projected by a
//! small MLP and pulled toward a frozen reference encoder's patch features
//! with a negative cosine loss.

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{stack_videos, Conditioning, DenoiseRequest, Denoiser, ForwardOpts};
use crate::codec::Image;
use crate::diffusion::{add_noise, LatentVideo, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::nn::{self, device, Init, ParamStore, View};
use crate::text::TextEmbedding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RarConfig {
    pub enabled: bool,
    pub weight: f64,
    pub tap_layer: String,
    pub patch_size: usize,
    /// Frozen reference encoder; only `builtin_random` is available.
    pub encoder: String,
    pub projector_hidden: usize,
}

impl Default for RarConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            weight: 0.5,
            tap_layer: "mid".into(),
            patch_size: 1,
            encoder: "builtin_random".into(),
            projector_hidden: 64,
        }
    }
}

/// `N x T x k` tokens cut from an `N x C x h x w` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub tokens: Array3<f64>,
    pub patch: usize,
    pub grid: (usize, usize),
    pub channels: usize,
}

fn check_patch(h: usize, w: usize, s: usize) -> Result<()> {
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(invalid(format!("patch size {s} does not divide {h}x{w}")));
    }
    Ok(())
}

/// Token `(n, p)` is the `C·s·s` block at patch `p` (row-major), flattened
/// channel-major.
pub fn patchify(feat: &Array4<f64>, s: usize) -> Result<PatchGrid> {
    let (n, c, h, w) = feat.dim();
    check_patch(h, w, s)?;
    let (gh, gw) = (h / s, w / s);
    let tokens = Array3::from_shape_fn((n, gh * gw, c * s * s), |(f, p, k)| {
        let (pi, pj) = (p / gw, p % gw);
        let (ch, di, dj) = (k / (s * s), (k / s) % s, k % s);
        feat[[f, ch, pi * s + di, pj * s + dj]]
    });
    Ok(PatchGrid {
        tokens,
        patch: s,
        grid: (gh, gw),
        channels: c,
    })
}

pub fn unpatchify(g: &PatchGrid) -> Array4<f64> {
    let (n, _, _) = g.tokens.dim();
    let s = g.patch;
    let (gh, gw) = g.grid;
    Array4::from_shape_fn((n, g.channels, gh * s, gw * s), |(f, ch, y, x)| {
        let p = (y / s) * gw + x / s;
        let k = ch * s * s + (y % s) * s + x % s;
        g.tokens[[f, p, k]]
    })
}

/// Tensor version of [`patchify`]: `B x N x C x h x w` to `B x N x T x C·s·s`.
pub fn patchify_tensor(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, n, c, h, w) = x.dims5()?;
    check_patch(h, w, s)?;
    let (gh, gw) = (h / s, w / s);
    let t = x
        .reshape(vec![b * n, c, gh, s, gw, s])?
        .permute([0, 2, 4, 1, 3, 5])?
        .contiguous()?;
    Ok(t.reshape((b, n, gh * gw, c * s * s))?)
}

/// Patch features `N x P x m` on a `gh x gw` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFeatures {
    pub y: Array3<f64>,
    pub grid: (usize, usize),
}

impl ReferenceFeatures {
    pub fn frames(&self) -> usize {
        self.y.dim().0
    }

    pub fn dim(&self) -> usize {
        self.y.dim().2
    }

    /// Bilinear resampling of the patch grid (half-pixel centers).
    pub fn resample(&self, grid: (usize, usize)) -> Result<Self> {
        if grid.0 == 0 || grid.1 == 0 {
            return Err(invalid("empty target grid"));
        }
        if grid == self.grid {
            return Ok(self.clone());
        }
        let (n, _, m) = self.y.dim();
        let (sh, sw) = self.grid;
        let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
            let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, x - lo as f64)
        };
        let mut y = Array3::zeros((n, grid.0 * grid.1, m));
        for i in 0..grid.0 {
            let (y0, y1, fy) = coord(i, sh, grid.0);
            for j in 0..grid.1 {
                let (x0, x1, fx) = coord(j, sw, grid.1);
                for f in 0..n {
                    for k in 0..m {
                        let at = |r: usize, c: usize| self.y[[f, r * sw + c, k]];
                        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                        let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                        y[[f, i * grid.1 + j, k]] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
        }
        Ok(Self { y, grid })
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (n, p, m) = self.y.dim();
        Ok(Tensor::from_vec(self.y.iter().copied().collect(), (n, p, m), &device())?.to_dtype(dtype)?)
    }
}

/// Frozen random patch encoder: non-overlapping `s x s` patches go through a
/// two-layer MLP. Frames are encoded independently.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEncoder {
    pub patch: usize,
    pub image_size: (usize, usize),
    w1: Array2<f64>,
    b1: Vec<f64>,
    w2: Array2<f64>,
}

impl ReferenceEncoder {
    pub const DEFAULT_SEED: u64 = 0x5EED_E4C0;

    pub fn builtin(image_size: (usize, usize)) -> Result<Self> {
        Self::random(image_size, 8, 96, 64, Self::DEFAULT_SEED)
    }

    pub fn random(image_size: (usize, usize), patch: usize, hidden: usize, dim: usize, seed: u64) -> Result<Self> {
        check_patch(image_size.0, image_size.1, patch)?;
        if hidden == 0 || dim == 0 {
            return Err(invalid("encoder widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let din = 3 * patch * patch;
        let mut normal = |std: f64| -> f64 { std * { let v: f64 = StandardNormal.sample(&mut rng); v } };
        let w1 = Array2::from_shape_simple_fn((hidden, din), || normal((2.0 / din as f64).sqrt()));
        let b1 = (0..hidden).map(|_| normal(0.5)).collect();
        let w2 = Array2::from_shape_simple_fn((dim, hidden), || normal(1.0 / (hidden as f64).sqrt()));
        Ok(Self {
            patch,
            image_size,
            w1,
            b1,
            w2,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch, self.image_size.1 / self.patch)
    }

    pub fn dim(&self) -> usize {
        self.w2.nrows()
    }

    /// `P x m` features of one image.
    pub fn encode_image(&self, img: &Image) -> Result<Array2<f64>> {
        let (h, w, c) = img.dim();
        if (h, w) != self.image_size || c != 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![self.image_size.0, self.image_size.1, 3],
                got: vec![h, w, c],
            });
        }
        let s = self.patch;
        let (gh, gw) = self.grid();
        let mut out = Array2::zeros((gh * gw, self.dim()));
        let mut x = vec![0.0; 3 * s * s];
        for pi in 0..gh {
            for pj in 0..gw {
                for ch in 0..3 {
                    for di in 0..s {
                        for dj in 0..s {
                            x[ch * s * s + di * s + dj] = img[[pi * s + di, pj * s + dj, ch]] * 2.0 - 1.0;
                        }
                    }
                }
                let hidden: Vec<f64> = self
                    .w1
                    .outer_iter()
                    .zip(&self.b1)
                    .map(|(row, b)| {
                        let z = row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + b;
                        z / (1.0 + (-z).exp())
                    })
                    .collect();
                let p = pi * gw + pj;
                for (k, row) in self.w2.outer_iter().enumerate() {
                    out[[p, k]] = row.iter().zip(&hidden).map(|(w, v)| w * v).sum();
                }
            }
        }
        Ok(out)
    }

    pub fn encode_reference(&self, frames: &[Image]) -> Result<ReferenceFeatures> {
        if frames.is_empty() {
            return Err(invalid("no frames to encode"));
        }
        let per: Vec<Array2<f64>> = frames.iter().map(|f| self.encode_image(f)).collect::<Result<_>>()?;
        let views: Vec<_> = per.iter().map(|a| a.view()).collect();
        let y = ndarray::stack(Axis(0), &views).map_err(|e| invalid(e.to_string()))?;
        Ok(ReferenceFeatures { y, grid: self.grid() })
    }
}

/// Two-layer MLP from per-patch diffusion features to the reference width.
#[derive(Debug)]
pub struct Projector {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub params: ParamStore,
}

impl Projector {
    pub fn new(input_dim: usize, hidden: usize, output_dim: usize, dtype: DType, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || output_dim == 0 {
            return Err(invalid("projector widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(dtype);
        params.add("proj.l1.weight", &[hidden, input_dim], Init::Normal(1.0 / (input_dim as f64).sqrt()), &mut rng)?;
        params.add("proj.l1.bias", &[hidden], Init::Zeros, &mut rng)?;
        params.add("proj.l2.weight", &[output_dim, hidden], Init::Normal(1.0 / (hidden as f64).sqrt()), &mut rng)?;
        params.add("proj.l2.bias", &[output_dim], Init::Zeros, &mut rng)?;
        Ok(Self {
            input_dim,
            hidden,
            output_dim,
            params,
        })
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let w1 = params.shape("proj.l1.weight")?;
        let w2 = params.shape("proj.l2.weight")?;
        if w1.len() != 2 || w2.len() != 2 || w2[1] != w1[0] {
            return Err(invalid("projector parameters have inconsistent shapes"));
        }
        Ok(Self {
            input_dim: w1[1],
            hidden: w1[0],
            output_dim: w2[0],
            params,
        })
    }

    pub fn forward(&self, view: View, x: &Tensor) -> Result<Tensor> {
        let h = nn::linear(x, &view.get("proj.l1.weight")?, Some(&view.get("proj.l1.bias")?))?;
        nn::linear(&nn::silu(&h)?, &view.get("proj.l2.weight")?, Some(&view.get("proj.l2.bias")?))
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            input_dim: self.input_dim,
            hidden: self.hidden,
            output_dim: self.output_dim,
            params: self.params.to_dtype(dtype)?,
        })
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `-Σ_n (1/P) Σ_p cos(y*[n][p], pred[n][p])`, zero-norm patches count as 0.
pub fn rar_loss_value(y_star: &Array3<f64>, pred: &Array3<f64>) -> Result<f64> {
    if y_star.dim() != pred.dim() {
        return Err(Error::ShapeMismatch {
            expected: y_star.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    let (n, p, _) = y_star.dim();
    let mut total = 0.0;
    for f in 0..n {
        let mut s = 0.0;
        for q in 0..p {
            let a: Vec<f64> = y_star.slice(ndarray::s![f, q, ..]).to_vec();
            let b: Vec<f64> = pred.slice(ndarray::s![f, q, ..]).to_vec();
            s += cosine(&a, &b);
        }
        total += s / p as f64;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("rar loss".into()));
    }
    Ok(-total)
}

/// Differentiable alignment loss averaged over the batch.
///
/// `tap` is `B x N x C' x h' x w'`, `y_star` is `B x N x P x m`.
pub fn rar_loss(tap: &Tensor, y_star: &Tensor, projector: &Projector, view: View, patch: usize) -> Result<Tensor> {
    let tokens = patchify_tensor(tap, patch)?;
    let (b, n, t, k) = tokens.dims4()?;
    if k != projector.input_dim {
        return Err(Error::ShapeMismatch {
            expected: vec![projector.input_dim],
            got: vec![k],
        });
    }
    let ys = y_star.dims();
    if ys != [b, n, t, projector.output_dim] {
        return Err(Error::ShapeMismatch {
            expected: vec![b, n, t, projector.output_dim],
            got: ys.to_vec(),
        });
    }
    let pred = projector.forward(view, &tokens)?;
    let dot = (&pred * y_star)?.sum(3)?;
    let np = (pred.sqr()?.sum(3)? + 1e-20)?.sqrt()?;
    let ny = (y_star.sqr()?.sum(3)? + 1e-20)?.sqrt()?;
    let cos = (dot / (np * ny)?)?;
    // mean over patches, sum over frames, mean over batch
    let per_video = cos.mean(2)?.sum(1)?;
    Ok(per_video.mean(0)?.neg()?)
}

/// One noised training example.
#[derive(Debug, Clone, Copy)]
pub struct TrainExample<'a> {
    pub z0: &'a LatentVideo,
    pub ctx: &'a [TextEmbedding],
    pub cond: &'a Conditioning,
    pub t: usize,
    pub eps: &'a LatentVideo,
    /// Reference features already resampled to the tap grid.
    pub reference: Option<&'a ReferenceFeatures>,
}

#[derive(Debug)]
pub struct LossParts {
    pub total: Tensor,
    pub simple: f64,
    pub rar: Option<f64>,
}

/// Alignment part of the objective: the projector and its view.
#[derive(Debug, Clone, Copy)]
pub struct Alignment<'a> {
    pub projector: &'a Projector,
    pub view: View<'a>,
    pub weight: f64,
    pub tap_layer: &'a str,
    pub patch: usize,
}

/// `mean‖ε − ε_θ(z_t)‖² + λ·L_RAR`.
pub fn total_training_loss(
    model: &Denoiser,
    view: View,
    schedule: &NoiseSchedule,
    batch: &[TrainExample],
    align: Option<Alignment>,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(invalid("empty training batch"));
    }
    let noisy: Vec<LatentVideo> = batch
        .iter()
        .map(|ex| add_noise(ex.z0, ex.eps, ex.t, schedule))
        .collect::<Result<_>>()?;
    let reqs: Vec<DenoiseRequest> = batch
        .iter()
        .zip(&noisy)
        .map(|(ex, z)| DenoiseRequest {
            z_t: z,
            t: ex.t,
            ctx: ex.ctx,
            cond: ex.cond,
        })
        .collect();
    let inp = model.inputs(&reqs)?;
    let opts = ForwardOpts {
        tap: align.map(|a| a.tap_layer),
        ..Default::default()
    };
    let out = model.forward(view, &inp, &opts)?;
    let eps = stack_videos(&batch.iter().map(|e| e.eps).collect::<Vec<_>>(), model.dtype())?;
    let simple_t = (out.eps - eps)?.sqr()?.mean_all()?;
    let simple = nn::scalar_f64(&simple_t)?;
    if !simple.is_finite() {
        return Err(Error::NonFinite("denoising loss".into()));
    }
    let Some(a) = align else {
        return Ok(LossParts {
            total: simple_t,
            simple,
            rar: None,
        });
    };
    let tap = out.tap.ok_or_else(|| invalid("alignment requested but no feature was tapped"))?;
    let refs = batch
        .iter()
        .map(|ex| {
            ex.reference
                .ok_or_else(|| invalid("alignment requires reference features for every example"))?
                .to_tensor(model.dtype())
        })
        .collect::<Result<Vec<_>>>()?;
    let y = Tensor::stack(&refs, 0)?;
    let rar_t = rar_loss(&tap.activation, &y, a.projector, a.view, a.patch)?;
    let rar = nn::scalar_f64(&rar_t)?;
    if !rar.is_finite() {
        return Err(Error::NonFinite("alignment loss".into()));
    }
    let total = if a.weight == 0.0 {
        simple_t
    } else {
        (simple_t + rar_t.affine(a.weight, 0.0)?)?
    };
    Ok(LossParts {
        total,
        simple,
        rar: Some(rar),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random4(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn patch_counts() {
        let g = patchify(&random4(0, (2, 3, 32, 32)), 4).unwrap();
        assert_eq!(g.tokens.dim(), (2, 64, 48));
        let whole = patchify(&random4(1, (2, 3, 8, 8)), 8).unwrap();
        assert_eq!(whole.tokens.dim(), (2, 1, 192));
        assert!(patchify(&random4(1, (1, 1, 6, 6)), 4).is_err());
    }

    #[test]
    fn unpatchify_inverts() {
        let x = random4(2, (3, 5, 8, 12));
        for s in [1, 2, 4] {
            assert_eq!(unpatchify(&patchify(&x, s).unwrap()), x);
        }
    }

    #[test]
    fn tensor_patchify_matches_array_version() {
        let x = random4(3, (2, 4, 8, 8));
        let t = Tensor::from_vec(x.iter().copied().collect::<Vec<_>>(), (1, 2, 4, 8, 8), &device()).unwrap();
        let got: Vec<f64> = patchify_tensor(&t, 2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let want: Vec<f64> = patchify(&x, 2).unwrap().tokens.iter().copied().collect();
        assert_eq!(got, want);
    }

    #[test]
    fn hand_valued_loss() {
        let u = [1.0, 0.0];
        let at = |c: f64| [c, (1.0 - c * c).sqrt()];
        let y = Array3::from_shape_vec((2, 2, 2), [u, u, u, u].concat()).unwrap();
        let p = Array3::from_shape_vec((2, 2, 2), [at(1.0), at(0.5), at(-0.5), at(0.0)].concat()).unwrap();
        assert!((rar_loss_value(&y, &p).unwrap() + 0.5).abs() < 1e-12);
        assert!((rar_loss_value(&y, &y).unwrap() + 2.0).abs() < 1e-12);
        let orth = Array3::from_shape_vec((2, 2, 2), [0.0, 3.0].repeat(4)).unwrap();
        assert_eq!(rar_loss_value(&y, &orth).unwrap(), 0.0);
        let zero = Array3::zeros((2, 2, 2));
        assert_eq!(rar_loss_value(&y, &zero).unwrap(), 0.0);
    }

    #[test]
    fn tensor_loss_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let proj = Projector::new(6, 5, 3, DType::F64, 1).unwrap();
        let tap = Tensor::from_vec((0..2 * 3 * 6 * 4 * 4).map(|_| rng.random::<f64>() - 0.5).collect::<Vec<_>>(), (2, 3, 6, 4, 4), &device()).unwrap();
        let y = Array4::from_shape_simple_fn((2, 3, 16, 3), || rng.random::<f64>() - 0.5);
        let yt = Tensor::from_vec(y.iter().copied().collect::<Vec<_>>(), (2, 3, 16, 3), &device()).unwrap();
        let got = nn::scalar_f64(&rar_loss(&tap, &yt, &proj, View::frozen(&proj.params), 1).unwrap()).unwrap();
        let pred = proj.forward(View::frozen(&proj.params), &patchify_tensor(&tap, 1).unwrap()).unwrap();
        let pv: Vec<f64> = pred.flatten_all().unwrap().to_vec1().unwrap();
        let pa = Array4::from_shape_vec((2, 3, 16, 3), pv).unwrap();
        let want = (0..2)
            .map(|b| rar_loss_value(&y.index_axis(Axis(0), b).to_owned(), &pa.index_axis(Axis(0), b).to_owned()).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn reference_encoder_contract() {
        let enc = ReferenceEncoder::builtin((64, 64)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<Image> = (0..4)
            .map(|_| Array3::from_shape_simple_fn((64, 64, 3), || rng.random::<f64>()))
            .collect();
        let mut with_dup = frames.clone();
        with_dup[3] = frames[1].clone();
        let f = enc.encode_reference(&with_dup).unwrap();
        assert_eq!(f.y.dim(), (4, 64, 64));
        assert_eq!(f.y.index_axis(Axis(0), 1), f.y.index_axis(Axis(0), 3));
        let perm = [2usize, 0, 3, 1];
        let a = enc.encode_reference(&frames).unwrap();
        let permuted: Vec<Image> = perm.iter().map(|&i| frames[i].clone()).collect();
        let b = enc.encode_reference(&permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b.y.index_axis(Axis(0), k), a.y.index_axis(Axis(0), i));
        }
        assert!(enc.encode_image(&Array3::zeros((32, 64, 3))).is_err());
    }

    #[test]
    fn resampling_halves_by_averaging() {
        let y = Array3::from_shape_fn((1, 16, 1), |(_, p, _)| p as f64);
        let f = ReferenceFeatures { y, grid: (4, 4) };
        let r = f.resample((2, 2)).unwrap();
        // rows {0,1} x cols {0,1}: mean of 0, 1, 4, 5
        assert!((r.y[[0, 0, 0]] - 2.5).abs() < 1e-12);
        assert!((r.y[[0, 3, 0]] - 12.5).abs() < 1e-12);
        assert_eq!(f.resample((4, 4)).unwrap(), f);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn loss_is_bounded_and_scale_invariant(seed in 0u64..300, scale in 0.01f64..100.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let y = Array3::from_shape_simple_fn((3, 4, 5), || rng.random::<f64>() - 0.5);
                let p = Array3::from_shape_simple_fn((3, 4, 5), || rng.random::<f64>() - 0.5);
                let v = rar_loss_value(&y, &p).unwrap();
                prop_assert!((-3.0..=3.0).contains(&v));
                let scaled = rar_loss_value(&y.mapv(|x| x * scale), &p).unwrap();
                prop_assert!((v - scaled).abs() < 1e-12);
            }
        }
    }
}
