//! Interpolation-based initialization: spherical interpolation of endpoint
//! noises and caption embeddings, per-frame coefficients, and the early-step
//! injection schedule.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::diffusion::LatentVideo;
use crate::error::{invalid, Error, Result};
use crate::text::{TextEmbedding, TextEncoder};

/// Below this `sin φ` the two directions are treated as parallel.
pub const SLERP_DEGENERATE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSpacing {
    #[default]
    Uniform,
    Cosine,
}

impl LambdaSpacing {
    /// Coefficient for frame `n` (0-based) of `frames`.
    pub fn lambda(self, n: usize, frames: usize) -> f64 {
        if frames < 2 {
            return 0.0;
        }
        if n == frames - 1 {
            return 1.0;
        }
        let u = n as f64 / (frames - 1) as f64;
        match self {
            LambdaSpacing::Uniform => u,
            LambdaSpacing::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * u).cos()),
        }
    }
}

/// Per-frame interpolation coefficients and the injection cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpCoeffs {
    pub lambda_noise: Vec<f64>,
    pub lambda_text: Vec<f64>,
    pub lambda_lora: Vec<f64>,
    pub inject_cutoff: f64,
}

impl InterpCoeffs {
    pub fn new(frames: usize, spacing: LambdaSpacing, inject_cutoff: f64) -> Result<Self> {
        if frames < 2 {
            return Err(invalid(format!("a transition needs >= 2 frames, got {frames}")));
        }
        if !(0.0..=1.0).contains(&inject_cutoff) {
            return Err(invalid(format!("inject cutoff {inject_cutoff} outside [0, 1]")));
        }
        let lambdas: Vec<f64> = (0..frames).map(|n| spacing.lambda(n, frames)).collect();
        Ok(Self {
            lambda_noise: lambdas.clone(),
            lambda_text: lambdas.clone(),
            lambda_lora: lambdas,
            inject_cutoff,
        })
    }

    pub fn frames(&self) -> usize {
        self.lambda_noise.len()
    }

    /// Number of leading sampling steps that receive injection.
    pub fn inject_steps(&self, total_steps: usize) -> usize {
        // the epsilon keeps products like 0.4 * 50 from rounding up past 20
        ((self.inject_cutoff * total_steps as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spherical linear interpolation between two flat vectors.
pub fn slerp(v1: &[f64], v2: &[f64], lam: f64) -> Result<Vec<f64>> {
    if v1.len() != v2.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![v1.len()],
            got: vec![v2.len()],
        });
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(invalid(format!("slerp coefficient {lam} outside [0, 1]")));
    }
    let (n1, n2) = (dot(v1, v1).sqrt(), dot(v2, v2).sqrt());
    if n1 == 0.0 || n2 == 0.0 {
        return Err(invalid("slerp of a zero-norm vector"));
    }
    if v1 == v2 {
        return Ok(v1.to_vec());
    }
    let cos = (dot(v1, v2) / (n1 * n2)).clamp(-1.0, 1.0);
    let phi = cos.acos();
    let sin = phi.sin();
    if sin < SLERP_DEGENERATE {
        if cos < 0.0 {
            return Err(invalid("slerp between antiparallel vectors is not unique"));
        }
        return Ok(v1
            .iter()
            .zip(v2)
            .map(|(a, b)| (1.0 - lam) * a + lam * b)
            .collect());
    }
    let a = ((1.0 - lam) * phi).sin() / sin;
    let b = (lam * phi).sin() / sin;
    Ok(v1.iter().zip(v2).map(|(x, y)| a * x + b * y).collect())
}

fn flat3(a: &Array3<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

/// Stack endpoint noises with their spherical interpolants along time.
pub fn build_initial_latents(
    z_first: &Array3<f64>,
    z_last: &Array3<f64>,
    frames: usize,
    coeffs: &InterpCoeffs,
) -> Result<LatentVideo> {
    if frames < 2 {
        return Err(invalid(format!("a transition needs >= 2 frames, got {frames}")));
    }
    if coeffs.frames() != frames {
        return Err(invalid(format!(
            "coefficients cover {} frames, expected {frames}",
            coeffs.frames()
        )));
    }
    if z_first.dim() != z_last.dim() {
        return Err(Error::ShapeMismatch {
            expected: z_first.shape().to_vec(),
            got: z_last.shape().to_vec(),
        });
    }
    let (a, b) = (flat3(z_first), flat3(z_last));
    let mut out = Vec::with_capacity(frames);
    for n in 0..frames {
        let frame = if n == 0 {
            z_first.clone()
        } else if n == frames - 1 {
            z_last.clone()
        } else {
            let v = slerp(&a, &b, coeffs.lambda_noise[n])?;
            Array3::from_shape_vec(z_first.dim(), v).expect("same element count")
        };
        out.push(frame);
    }
    LatentVideo::from_frames(&out)
}

/// Interpolated latents for frame `n` of an `N`-frame transition, used as the
/// injection target at a given noise level.
pub fn interpolated_frame(
    z_first: &Array3<f64>,
    z_last: &Array3<f64>,
    lam: f64,
) -> Result<Array3<f64>> {
    let v = slerp(&flat3(z_first), &flat3(z_last), lam)?;
    Ok(Array3::from_shape_vec(z_first.dim(), v).expect("same element count"))
}

fn pad_rows(e: &TextEmbedding, len: usize) -> Array2<f64> {
    let mut rows = e.tokens.clone();
    if rows.nrows() < len {
        let null = TextEncoder {
            dim: e.dim(),
            max_len: 1,
        }
        .null_token();
        let mut padded = Array2::zeros((len, e.dim()));
        padded.slice_mut(ndarray::s![..rows.nrows(), ..]).assign(&rows);
        for i in rows.nrows()..len {
            padded.row_mut(i).assign(&null);
        }
        rows = padded;
    }
    rows
}

/// Frame-aware caption interpolation: row-wise slerp of the two token grids.
pub fn frame_text_embeddings(
    c_first: &TextEmbedding,
    c_last: &TextEmbedding,
    frames: usize,
    coeffs: &InterpCoeffs,
) -> Result<Vec<TextEmbedding>> {
    if frames < 2 {
        return Err(invalid(format!("a transition needs >= 2 frames, got {frames}")));
    }
    if coeffs.frames() != frames {
        return Err(invalid("coefficient/frame count mismatch"));
    }
    if c_first.dim() != c_last.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![c_first.dim()],
            got: vec![c_last.dim()],
        });
    }
    let len = c_first.len().max(c_last.len());
    let (a, b) = (pad_rows(c_first, len), pad_rows(c_last, len));
    let mut out = Vec::with_capacity(frames);
    for n in 0..frames {
        if n == 0 {
            out.push(c_first.clone());
            continue;
        }
        if n == frames - 1 {
            out.push(c_last.clone());
            continue;
        }
        let lam = coeffs.lambda_text[n];
        let mut tokens = Array2::zeros((len, a.ncols()));
        for (i, mut row) in tokens.axis_iter_mut(Axis(0)).enumerate() {
            let ra: Vec<f64> = a.row(i).to_vec();
            let rb: Vec<f64> = b.row(i).to_vec();
            let v = slerp(&ra, &rb, lam)?;
            row.assign(&ndarray::Array1::from(v));
        }
        out.push(TextEmbedding::new(
            tokens,
            format!("{} | {} @ {lam:.4}", c_first.caption, c_last.caption),
        )?);
    }
    Ok(out)
}

/// Whether sampling step `step_index` (0 = first, noisiest) receives injection.
pub fn should_inject(step_index: usize, total_steps: usize, coeffs: &InterpCoeffs) -> bool {
    step_index < coeffs.inject_steps(total_steps)
}

/// Blend weight toward the interpolated trajectory: 1 at the first step,
/// decaying linearly to 0 at the cutoff.
pub fn inject_weight(step_index: usize, total_steps: usize, coeffs: &InterpCoeffs) -> f64 {
    let cutoff = coeffs.inject_steps(total_steps);
    if step_index >= cutoff {
        0.0
    } else {
        1.0 - step_index as f64 / cutoff as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::encode_text;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn norm(v: &[f64]) -> f64 {
        dot(v, v).sqrt()
    }

    #[test]
    fn slerp_endpoint() {
        let a = gaussian(1, 32);
        let b = gaussian(2, 32);
        let out = slerp(&a, &b, 0.0).unwrap();
        for (x, y) in out.iter().zip(&a) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-7);
        }
        let out = slerp(&a, &b, 1.0).unwrap();
        for (x, y) in out.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-7);
        }
    }

    #[test]
    fn slerp_orthonormal_midpoint() {
        let out = slerp(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(out[0], r, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], r, epsilon = 1e-12);
        assert_abs_diff_eq!(norm(&out), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn slerp_degenerate_and_errors() {
        let a = gaussian(3, 8);
        for lam in [0.0, 0.3, 0.5, 1.0] {
            assert_eq!(slerp(&a, &a, lam).unwrap(), a);
        }
        // nearly parallel takes the linear branch
        let mut b = a.clone();
        b[0] += 1e-9;
        let out = slerp(&a, &b, 0.5).unwrap();
        assert_abs_diff_eq!(out[0], a[0] + 0.5e-9, epsilon = 1e-15);

        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!(slerp(&a, &neg, 0.5).is_err());
        assert!(slerp(&a, &vec![0.0; 8], 0.5).is_err());
        assert!(slerp(&a, &a[..4], 0.5).is_err());
        assert!(slerp(&a, &a, 1.5).is_err());
    }

    #[test]
    fn coefficient_spacings() {
        for spacing in [LambdaSpacing::Uniform, LambdaSpacing::Cosine] {
            let c = InterpCoeffs::new(16, spacing, 0.4).unwrap();
            assert_eq!(c.lambda_noise[0], 0.0);
            assert_eq!(c.lambda_noise[15], 1.0);
            assert!(c.lambda_noise.windows(2).all(|w| w[1] >= w[0]));
        }
        let c = InterpCoeffs::new(5, LambdaSpacing::Uniform, 0.4).unwrap();
        assert_eq!(c.lambda_text, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(InterpCoeffs::new(1, LambdaSpacing::Uniform, 0.4).is_err());
        assert!(InterpCoeffs::new(4, LambdaSpacing::Uniform, 1.2).is_err());
    }

    #[test]
    fn initial_latents_orthonormal_middle() {
        let a = Array3::from_shape_vec((2, 1, 1), vec![1.0, 0.0]).unwrap();
        let b = Array3::from_shape_vec((2, 1, 1), vec![0.0, 1.0]).unwrap();
        let c = InterpCoeffs::new(3, LambdaSpacing::Uniform, 0.4).unwrap();
        let v = build_initial_latents(&a, &b, 3, &c).unwrap();
        let mid = v.frame(1);
        let r = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(mid[[0, 0, 0]], r, epsilon = 1e-12);
        assert_abs_diff_eq!(mid[[1, 0, 0]], r, epsilon = 1e-12);
        assert_eq!(v.frame(0), a);
        assert_eq!(v.frame(2), b);
    }

    #[test]
    fn initial_latents_norm_containment() {
        let c = InterpCoeffs::new(16, LambdaSpacing::Uniform, 0.4).unwrap();
        for draw in 0..100u64 {
            let a = gaussian(2 * draw, 64);
            let b = gaussian(2 * draw + 1, 64);
            // equal endpoint norms: the great circle keeps every frame on it
            let scale = norm(&a) / norm(&b);
            let b_eq: Vec<f64> = b.iter().map(|x| x * scale).collect();
            let za = Array3::from_shape_vec((4, 4, 4), a.clone()).unwrap();
            let zb = Array3::from_shape_vec((4, 4, 4), b_eq).unwrap();
            let v = build_initial_latents(&za, &zb, 16, &c).unwrap();
            for n in 0..16 {
                let nn = norm(&flat3(&v.frame(n)));
                assert!((nn - norm(&a)).abs() <= 1e-5, "draw {draw} frame {n}");
            }
            // unequal norms: frames follow the closed form term by term
            let zb = Array3::from_shape_vec((4, 4, 4), b.clone()).unwrap();
            let v = build_initial_latents(&za, &zb, 16, &c).unwrap();
            let phi = (dot(&a, &b) / (norm(&a) * norm(&b))).acos();
            for n in 1..15 {
                let lam = n as f64 / 15.0;
                let (ka, kb) = (((1.0 - lam) * phi).sin() / phi.sin(), (lam * phi).sin() / phi.sin());
                for (got, (x, y)) in flat3(&v.frame(n)).iter().zip(a.iter().zip(&b)) {
                    assert!((got - (ka * x + kb * y)).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn initial_latents_identical_endpoints() {
        let a = Array3::from_shape_vec((2, 2, 2), gaussian(5, 8)).unwrap();
        let c = InterpCoeffs::new(6, LambdaSpacing::Uniform, 0.4).unwrap();
        let v = build_initial_latents(&a, &a, 6, &c).unwrap();
        for n in 0..6 {
            assert_eq!(v.frame(n), a);
        }
        assert!(build_initial_latents(&a, &a, 1, &c).is_err());
    }

    #[test]
    fn initial_latents_monotone_angle() {
        let a = Array3::from_shape_vec((3, 2, 2), gaussian(7, 12)).unwrap();
        let b = Array3::from_shape_vec((3, 2, 2), gaussian(8, 12)).unwrap();
        let c = InterpCoeffs::new(16, LambdaSpacing::Uniform, 0.4).unwrap();
        let v = build_initial_latents(&a, &b, 16, &c).unwrap();
        let fa = flat3(&a);
        let mut prev = -1.0;
        for n in 0..16 {
            let f = flat3(&v.frame(n));
            let ang = (dot(&f, &fa) / (norm(&f) * norm(&fa))).clamp(-1.0, 1.0).acos();
            assert!(ang >= prev - 1e-12);
            prev = ang;
        }
    }

    #[test]
    fn frame_text_examples() {
        let c1 = encode_text("a red circle");
        let cn = encode_text("a blue square");
        let coeffs2 = InterpCoeffs::new(2, LambdaSpacing::Uniform, 0.4).unwrap();
        let two = frame_text_embeddings(&c1, &cn, 2, &coeffs2).unwrap();
        assert_eq!(two, vec![c1.clone(), cn.clone()]);

        let coeffs5 = InterpCoeffs::new(5, LambdaSpacing::Uniform, 0.4).unwrap();
        let same = frame_text_embeddings(&c1, &c1, 5, &coeffs5).unwrap();
        assert!(same.iter().all(|e| e.tokens == c1.tokens));
    }

    #[test]
    fn frame_text_orthonormal_rows() {
        let t1 = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let tn = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        let c1 = TextEmbedding::new(t1.clone(), "a").unwrap();
        let cn = TextEmbedding::new(tn.clone(), "b").unwrap();
        let coeffs = InterpCoeffs::new(3, LambdaSpacing::Uniform, 0.4).unwrap();
        let out = frame_text_embeddings(&c1, &cn, 3, &coeffs).unwrap();
        let r = 1.0 / 2f64.sqrt();
        for i in 0..2 {
            let want: Array1<f64> = (&t1.row(i) + &tn.row(i)) * r;
            for (x, y) in out[1].tokens.row(i).iter().zip(want.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn frame_text_pads_shorter_caption() {
        let c1 = TextEmbedding::new(Array2::from_shape_vec((1, 3), vec![1.0, 0.0, 0.0]).unwrap(), "a").unwrap();
        let cn = TextEmbedding::new(
            Array2::from_shape_vec((2, 3), vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            "b",
        )
        .unwrap();
        let coeffs = InterpCoeffs::new(3, LambdaSpacing::Uniform, 0.4).unwrap();
        let out = frame_text_embeddings(&c1, &cn, 3, &coeffs).unwrap();
        assert_eq!(out[1].len(), 2);
        let bad = TextEmbedding::new(Array2::ones((1, 4)), "c").unwrap();
        assert!(frame_text_embeddings(&c1, &bad, 3, &coeffs).is_err());
    }

    #[test]
    fn injection_schedule() {
        let c = |rho| InterpCoeffs::new(4, LambdaSpacing::Uniform, rho).unwrap();
        assert!((0..50).all(|k| !should_inject(k, 50, &c(0.0))));
        assert!((0..50).all(|k| should_inject(k, 50, &c(1.0))));
        let c4 = c(0.4);
        let on: Vec<usize> = (0..50).filter(|k| should_inject(*k, 50, &c4)).collect();
        assert_eq!(on, (0..20).collect::<Vec<_>>());
        assert_eq!(inject_weight(0, 50, &c4), 1.0);
        assert_abs_diff_eq!(inject_weight(10, 50, &c4), 0.5, epsilon = 1e-15);
        assert_eq!(inject_weight(20, 50, &c4), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn unit(seed: u64, n: usize) -> Vec<f64> {
            let v = gaussian(seed, n);
            let nv = norm(&v);
            v.into_iter().map(|x| x / nv).collect()
        }

        proptest! {
            #[test]
            fn unit_norm_preserved(seed in 0u64..10_000, lam in 0.0f64..=1.0, n in 2usize..64) {
                let out = slerp(&unit(seed, n), &unit(seed + 10_000, n), lam).unwrap();
                prop_assert!((norm(&out) - 1.0).abs() <= 1e-6);
            }

            #[test]
            fn symmetric_under_exchange(seed in 0u64..10_000, lam in 0.0f64..=1.0) {
                let (a, b) = (gaussian(seed, 16), gaussian(seed + 1, 16));
                let x = slerp(&a, &b, lam).unwrap();
                let y = slerp(&b, &a, 1.0 - lam).unwrap();
                for (p, q) in x.iter().zip(&y) {
                    prop_assert!((p - q).abs() <= 1e-7);
                }
            }
        }
    }
}
