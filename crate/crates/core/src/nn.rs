//! Parameter storage, tensor helpers and the AdamW optimizer used by every
//! trainable component (denoiser, adapters, projector, codec).

use std::collections::{BTreeMap, BTreeSet};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn device() -> Device {
    Device::Cpu
}

/// Parameter initializers.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Named trainable tensors, ordered by name.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn add<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| std * { let v: f64 = StandardNormal.sample(rng); v })
                .map(|v: f64| v as f32 as f64)
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &device())?.to_dtype(self.dtype)?;
        self.insert(name, t)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let t = tensor.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Detached copy-free handle to a parameter.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        Ok(self.var(name)?.as_tensor().detach())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn shape(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.var(name)?.as_tensor().dims().to_vec())
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.as_tensor().elem_count()).sum()
    }

    /// Independent storage with the same values.
    pub fn deep_clone(&self) -> Result<Self> {
        self.to_dtype(self.dtype)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype);
        for (k, v) in &self.vars {
            let t = v.as_tensor().to_dtype(dtype)?.copy()?;
            out.vars.insert(k.clone(), Var::from_tensor(&t)?);
        }
        Ok(out)
    }

    pub fn values_f64(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self
            .var(name)?
            .as_tensor()
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?)
    }

    pub fn values_f32(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self
            .var(name)?
            .as_tensor()
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1()?)
    }

    pub fn set_values(&self, name: &str, values: Tensor) -> Result<()> {
        let var = self.var(name)?;
        let t = values
            .to_dtype(self.dtype)?
            .reshape(var.as_tensor().dims())?;
        var.set(&t)?;
        Ok(())
    }

    /// Overwrite a single scalar entry (used by finite-difference checks).
    pub fn set_entry(&self, name: &str, index: usize, value: f64) -> Result<()> {
        let mut vals = self.values_f64(name)?;
        vals[index] = value;
        let shape = self.shape(name)?;
        self.set_values(name, Tensor::from_vec(vals, shape, &device())?)
    }
}

/// Which parameters of a store participate in autograd for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Grad<'a> {
    None,
    All,
    Only(&'a BTreeSet<String>),
}

#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub store: &'a ParamStore,
    pub grad: Grad<'a>,
}

impl<'a> View<'a> {
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            grad: Grad::None,
        }
    }

    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            grad: Grad::All,
        }
    }

    pub fn only(store: &'a ParamStore, names: &'a BTreeSet<String>) -> Self {
        Self {
            store,
            grad: Grad::Only(names),
        }
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let var = self.store.var(name)?;
        let tracked = match self.grad {
            Grad::None => false,
            Grad::All => true,
            Grad::Only(set) => set.contains(name),
        };
        Ok(if tracked {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }
}

/// `x @ w^T + b` over the last axis of `x`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let din = *dims.last().expect("rank >= 1");
    let rows = x.elem_count() / din;
    let y = x.reshape((rows, din))?.matmul(&w.t()?)?;
    let y = match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = w.dim(0)?;
    Ok(y.reshape(out_dims)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(xn.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Group normalization of channels-last `(F, T, C)` activations.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let (f, t, c) = x.dims3()?;
    let g = x.reshape((f, t, groups, c / groups))?;
    let mean = g.mean_keepdim((1, 3))?;
    let gc = g.broadcast_sub(&mean)?;
    let var = gc.sqr()?.mean_keepdim((1, 3))?;
    let gn = gc.broadcast_div(&(var + eps)?.sqrt()?)?.reshape((f, t, c))?;
    Ok(gn.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Odd square convolution of channels-last `(F, H, W, C)` input as one
/// matmul over unfolded patches. Stride 2 subsamples the stride-1 output.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (f, h, wd, c) = x.dims4()?;
    let (cout, cin, kh, kw) = w.dims4()?;
    if cin != c || kh != kw || kh != 2 * padding + 1 || !(stride == 1 || stride == 2) {
        return Err(crate::error::invalid(format!(
            "unsupported convolution: input {c} channels, kernel {cout}x{cin}x{kh}x{kw}, stride {stride}, padding {padding}"
        )));
    }
    let xp = x.pad_with_zeros(1, padding, padding)?.pad_with_zeros(2, padding, padding)?;
    let (ho, wo) = (h / stride, wd / stride);
    let mut shifts = Vec::with_capacity(kh * kw);
    for dy in 0..kh {
        for dx in 0..kw {
            let s = xp.narrow(1, dy, h)?.narrow(2, dx, wd)?.contiguous()?;
            let s = if stride == 2 {
                s.reshape((f, ho, 2, wo, 2, c))?.narrow(2, 0, 1)?.narrow(4, 0, 1)?.contiguous()?.reshape((f, ho, wo, c))?
            } else {
                s
            };
            shifts.push(s);
        }
    }
    // columns ordered (ky, kx, c)
    let cols = Tensor::cat(&shifts, 3)?.reshape((f * ho * wo, kh * kw * c))?;
    let wm = w.permute((0, 2, 3, 1))?.reshape((cout, kh * kw * c))?;
    let mut y = cols.matmul(&wm.t()?)?;
    if let Some(b) = b {
        y = y.broadcast_add(b)?;
    }
    Ok(y.reshape((f, ho, wo, cout))?)
}

/// Nearest-neighbour 2x upsampling of channels-last `(F, H, W, C)` input.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (f, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((f, h, 1, w, 1, c))?
        .broadcast_as((f, h, 2, w, 2, c))?
        .contiguous()?
        .reshape((f, 2 * h, 2 * w, c))?)
}

/// Sum of squares of all entries, as an f64 scalar.
pub fn sum_sq(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?)
}

pub fn scalar_f64(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Decoupled-weight-decay Adam. Moment buffers are keyed by parameter name so
/// they can be checkpointed alongside the parameters.
#[derive(Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, (Tensor, Tensor)> {
        &self.moments
    }

    pub fn restore(config: AdamWConfig, step: u64, moments: BTreeMap<String, (Tensor, Tensor)>) -> Self {
        Self {
            config,
            step,
            moments,
        }
    }

    /// Apply one update to every parameter in `names` that has a gradient.
    pub fn step<'n>(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        names: impl IntoIterator<Item = &'n str>,
    ) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for name in names {
            let var = store.var(name)?;
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match self.moments.get(name) {
                Some(mv) => mv.clone(),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = (m.affine(c.beta1, 0.0)? + g.affine(1.0 - c.beta1, 0.0)?)?;
            let v = (v.affine(c.beta2, 0.0)? + g.sqr()?.affine(1.0 - c.beta2, 0.0)?)?;
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let v_hat = v.affine(1.0 / bc2, 0.0)?;
            let update = m_hat.div(&(v_hat.sqrt()? + c.eps)?)?;
            let p = var.as_tensor().detach();
            let p = (p.affine(1.0 - c.lr * c.weight_decay, 0.0)? - update.affine(c.lr, 0.0)?)?;
            var.set(&p)?;
            self.moments.insert(name.to_string(), (m, v));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-5.0, 0.0, 5.0]], &device()).unwrap();
        let s = softmax_last(&x).unwrap();
        let sums: Vec<f64> = s.sum(1).unwrap().to_vec1().unwrap();
        for v in sums {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let dev = device();
        for stride in [1, 2] {
            let x = Var::randn(0f64, 1., (3, 4, 6, 6), &dev).unwrap();
            let w = Var::randn(0f64, 1., (5, 4, 3, 3), &dev).unwrap();
            let b = Var::randn(0f64, 1., 5, &dev).unwrap();
            let cl = x.as_tensor().permute((0, 2, 3, 1)).unwrap();
            let ours = conv2d(&cl, w.as_tensor(), Some(b.as_tensor()), stride, 1)
                .unwrap()
                .permute((0, 3, 1, 2))
                .unwrap();
            let direct = x
                .as_tensor()
                .conv2d(w.as_tensor(), 1, stride, 1, 1)
                .unwrap()
                .broadcast_add(&b.as_tensor().reshape((1, 5, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), direct.dims());
            let diff = (&ours - &direct).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12, "stride {stride}: {diff}");
            let probe = Tensor::randn(0f64, 1., ours.dims(), &dev).unwrap();
            let g1 = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (&direct * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w, &b] {
                let d = (g1.get(v).unwrap() - g2.get(v).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(d < 1e-10, "stride {stride}: grad {d}");
            }
        }
    }

    #[test]
    fn group_norm_matches_per_group_statistics() {
        let dev = device();
        let x = Tensor::randn(0f64, 1., (2, 5, 6), &dev).unwrap();
        let ones = Tensor::ones(6, DType::F64, &dev).unwrap();
        let zeros = Tensor::zeros(6, DType::F64, &dev).unwrap();
        let y: Vec<Vec<Vec<f64>>> = group_norm(&x, 3, &ones, &zeros, 0.0).unwrap().to_vec3().unwrap();
        let xs: Vec<Vec<Vec<f64>>> = x.to_vec3().unwrap();
        for fi in 0..2 {
            for g in 0..3 {
                let vals: Vec<f64> = (0..5).flat_map(|t| xs[fi][t][2 * g..2 * g + 2].to_vec()).collect();
                let m = vals.iter().sum::<f64>() / 10.0;
                let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 10.0).sqrt();
                for t in 0..5 {
                    for ch in 2 * g..2 * g + 2 {
                        assert!((y[fi][t][ch] - (xs[fi][t][ch] - m) / sd).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::new(&[1.0f32, 2.0, 3.0, 4.0], &device())
            .unwrap()
            .reshape((1, 2, 2, 1))
            .unwrap();
        let y: Vec<f32> = upsample2x(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(
            y,
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn deep_clone_is_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new(DType::F32);
        s.add("w", &[2, 2], Init::Normal(1.0), &mut rng).unwrap();
        let c = s.deep_clone().unwrap();
        s.set_entry("w", 0, 42.0).unwrap();
        assert_ne!(c.values_f32("w").unwrap()[0], 42.0);
        assert_eq!(s.values_f32("w").unwrap()[0], 42.0);
    }

    #[test]
    fn adamw_descends_quadratic() {
        let mut s = ParamStore::new(DType::F64);
        s.insert("x", Tensor::new(&[3.0f64, -2.0], &device()).unwrap())
            .unwrap();
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.1));
        for _ in 0..200 {
            let x = View::trainable(&s).get("x").unwrap();
            let loss = x.sqr().unwrap().sum_all().unwrap();
            let g = loss.backward().unwrap();
            opt.step(&s, &g, ["x"]).unwrap();
        }
        let v = s.values_f64("x").unwrap();
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
    }

    #[test]
    fn frozen_view_has_no_gradient() {
        let mut s = ParamStore::new(DType::F64);
        s.insert("a", Tensor::new(&[1.0f64], &device()).unwrap()).unwrap();
        s.insert("b", Tensor::new(&[2.0f64], &device()).unwrap()).unwrap();
        let only: BTreeSet<String> = ["a".to_string()].into();
        let v = View::only(&s, &only);
        let loss = (v.get("a").unwrap() * v.get("b").unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let g = loss.backward().unwrap();
        assert!(g.get(s.var("a").unwrap().as_tensor()).is_some());
        assert!(g.get(s.var("b").unwrap().as_tensor()).is_none());
    }
}
