//! Transition metrics over pluggable perceptual-distance and embedding
//! providers: PPL, Gini/smoothness, TCR, TC-Score and FID.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codec::Image;
use crate::error::{invalid, Error, Result};
use crate::rar::{ReferenceEncoder, ReferenceFeatures};

pub const DEFAULT_TAU: f64 = 0.5;

pub trait PerceptualDistance {
    fn name(&self) -> &str;
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

/// Maps an image to a unit-norm feature vector.
pub trait EmbeddingProvider {
    fn name(&self) -> &str;
    fn embed(&self, img: &Image) -> Result<Vec<f64>>;
}

/// Root-mean-square difference of frozen reference-encoder patch features.
#[derive(Debug, Clone)]
pub struct ReferenceDistance {
    pub encoder: ReferenceEncoder,
}

impl PerceptualDistance for ReferenceDistance {
    fn name(&self) -> &str {
        "reference_l2"
    }

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        let fa = self.encoder.encode_image(a)?;
        let fb = self.encoder.encode_image(b)?;
        let ss: f64 = fa.iter().zip(fb.iter()).map(|(x, y)| (x - y).powi(2)).sum();
        Ok((ss / fa.len() as f64).sqrt())
    }
}

/// Reference-encoder features pooled to a coarse grid and normalized.
#[derive(Debug, Clone)]
pub struct ReferenceEmbedding {
    pub encoder: ReferenceEncoder,
    pub grid: (usize, usize),
}

impl ReferenceEmbedding {
    pub fn new(encoder: ReferenceEncoder) -> Self {
        Self { encoder, grid: (2, 2) }
    }
}

impl EmbeddingProvider for ReferenceEmbedding {
    fn name(&self) -> &str {
        "reference_pooled"
    }

    fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        let f = self.encoder.encode_image(img)?;
        let (p, m) = f.dim();
        let feats = ReferenceFeatures {
            y: f.into_shape_with_order((1, p, m)).map_err(|e| invalid(e.to_string()))?,
            grid: self.encoder.grid(),
        };
        let pooled = feats.resample(self.grid)?;
        let v: Vec<f64> = pooled.y.iter().copied().collect();
        normalize(v)
    }
}

fn normalize(v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::NonFinite("embedding norm".into()));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// The default providers, built for a given image size.
pub fn default_providers(image_size: (usize, usize)) -> Result<(ReferenceDistance, ReferenceEmbedding)> {
    let enc = ReferenceEncoder::builtin(image_size)?;
    Ok((
        ReferenceDistance { encoder: enc.clone() },
        ReferenceEmbedding::new(enc),
    ))
}

pub fn adjacent_distances(frames: &[Image], dist: &dyn PerceptualDistance) -> Result<Vec<f64>> {
    frames.windows(2).map(|w| dist.distance(&w[0], &w[1])).collect()
}

/// Mean distance between consecutive frames.
pub fn ppl(frames: &[Image], dist: &dyn PerceptualDistance) -> Result<f64> {
    if frames.len() < 2 {
        return Err(invalid("ppl needs at least 2 frames"));
    }
    let d = adjacent_distances(frames, dist)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// `Σ_i Σ_j |x_i − x_j| / (2 n² x̄)`, with all-zero input defined as 0.
pub fn gini(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("gini of an empty sequence"));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid("gini needs finite nonnegative values"));
    }
    let total: f64 = values.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let mut x = values.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    // sorted form of the pairwise sum: Σ_i (2i − n + 1) x_(i), 0-based
    let weighted: f64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * i as f64 - n + 1.0) * v)
        .sum();
    Ok((weighted / (n * total)).max(0.0))
}

pub fn smoothness_from_distances(d: &[f64]) -> Result<f64> {
    if d.len() < 2 {
        return Err(invalid("smoothness needs at least 2 distances"));
    }
    Ok(1.0 - gini(d)?)
}

/// `1 − gini` of the adjacent perceptual distances.
pub fn smoothness(frames: &[Image], dist: &dyn PerceptualDistance) -> Result<f64> {
    if frames.len() < 3 {
        return Err(invalid("smoothness needs at least 3 frames"));
    }
    smoothness_from_distances(&adjacent_distances(frames, dist)?)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per frame, the larger cosine similarity to either endpoint.
pub fn endpoint_similarities(frames: &[Image], first: &Image, last: &Image, emb: &dyn EmbeddingProvider) -> Result<Vec<f64>> {
    let ef = emb.embed(first)?;
    let el = emb.embed(last)?;
    frames
        .iter()
        .map(|f| {
            let e = emb.embed(f)?;
            Ok(dot(&e, &ef).max(dot(&e, &el)))
        })
        .collect()
}

pub fn tcr_from_similarities(sims: &[f64], tau: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(invalid(format!("margin {tau} outside [-1, 1]")));
    }
    if sims.is_empty() {
        return Err(invalid("tcr needs at least one frame"));
    }
    let hits = sims.iter().filter(|s| **s >= tau).count();
    Ok(100.0 * hits as f64 / sims.len() as f64)
}

/// Percentage of frames within similarity `tau` of either endpoint.
pub fn tcr(frames: &[Image], first: &Image, last: &Image, emb: &dyn EmbeddingProvider, tau: f64) -> Result<f64> {
    tcr_from_similarities(&endpoint_similarities(frames, first, last, emb)?, tau)
}

pub fn tc_score_from_similarities(sims: &[f64]) -> Result<f64> {
    if sims.is_empty() {
        return Err(invalid("tc-score needs at least one frame"));
    }
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

pub fn tc_score(frames: &[Image], first: &Image, last: &Image, emb: &dyn EmbeddingProvider) -> Result<f64> {
    tc_score_from_similarities(&endpoint_similarities(frames, first, last, emb)?)
}

/// Mean and (n−1)-normalized covariance of row vectors.
pub fn gaussian_fit(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x.len() < 2 {
        return Err(invalid("a Gaussian fit needs at least 2 samples"));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|v| v.len() != d) {
        return Err(invalid("embeddings must share a positive dimension"));
    }
    let n = x.len() as f64;
    let mut mu = DVector::zeros(d);
    for v in x {
        mu += DVector::from_column_slice(v) / n;
    }
    let mut cov = DMatrix::zeros(d, d);
    for v in x {
        let c = DVector::from_column_slice(v) - &mu;
        cov.ger(1.0 / (n - 1.0), &c, &c, 1.0);
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(invalid("Gaussian parameters disagree in dimension"));
    }
    let sa = sym_sqrt(cov_a);
    let mut m = &sa * cov_b * &sa;
    m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (mu_a - mu_b).norm_squared();
    let v = diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    if !v.is_finite() {
        return Err(Error::NonFinite("fid".into()));
    }
    Ok(v.max(0.0))
}

pub fn fid_from_embeddings(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = gaussian_fit(a)?;
    let (mb, cb) = gaussian_fit(b)?;
    frechet_distance(&ma, &ca, &mb, &cb)
}

pub fn fid(set_a: &[Image], set_b: &[Image], emb: &dyn EmbeddingProvider) -> Result<f64> {
    let ea: Vec<Vec<f64>> = set_a.iter().map(|i| emb.embed(i)).collect::<Result<_>>()?;
    let eb: Vec<Vec<f64>> = set_b.iter().map(|i| emb.embed(i)).collect::<Result<_>>()?;
    fid_from_embeddings(&ea, &eb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub id: String,
    pub ppl: f64,
    pub tcr: f64,
    pub tc_score: f64,
    pub smoothness: f64,
    pub fid: f64,
    pub tau: f64,
    pub distance_provider: String,
    pub embedding_provider: String,
}

/// All metrics for one generated transition. FID compares the two endpoints
/// against the generated frames.
pub fn evaluate_transition(
    id: &str,
    frames: &[Image],
    first: &Image,
    last: &Image,
    dist: &dyn PerceptualDistance,
    emb: &dyn EmbeddingProvider,
    tau: f64,
) -> Result<MetricsReport> {
    let d = adjacent_distances(frames, dist)?;
    if d.len() < 2 {
        return Err(invalid("evaluation needs at least 3 frames"));
    }
    let sims = endpoint_similarities(frames, first, last, emb)?;
    Ok(MetricsReport {
        id: id.to_string(),
        ppl: d.iter().sum::<f64>() / d.len() as f64,
        tcr: tcr_from_similarities(&sims, tau)?,
        tc_score: tc_score_from_similarities(&sims)?,
        smoothness: smoothness_from_distances(&d)?,
        fid: fid(&[first.clone(), last.clone()], frames, emb)?,
        tau,
        distance_provider: dist.name().to_string(),
        embedding_provider: emb.name().to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub count: usize,
    pub ppl: MeanStd,
    pub tcr: MeanStd,
    pub tc_score: MeanStd,
    pub smoothness: MeanStd,
    pub fid: MeanStd,
}

/// Mean ± population std per metric, folded in id order.
pub fn aggregate(reports: &[MetricsReport]) -> AggregateReport {
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&sorted.iter().map(|r| f(r)).collect::<Vec<_>>());
    AggregateReport {
        count: reports.len(),
        ppl: col(|r| r.ppl),
        tcr: col(|r| r.tcr),
        tc_score: col(|r| r.tc_score),
        smoothness: col(|r| r.smoothness),
        fid: col(|r| r.fid),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn gini_oracle(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        if mean == 0.0 {
            return 0.0;
        }
        let mut s = 0.0;
        for a in x {
            for b in x {
                s += (a - b).abs();
            }
        }
        s / (2.0 * n * n * mean)
    }

    /// Distance read off a scalar stored in pixel (0, 0, 0).
    struct Scalar;
    impl PerceptualDistance for Scalar {
        fn name(&self) -> &str {
            "scalar"
        }
        fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
            Ok((a[[0, 0, 0]] - b[[0, 0, 0]]).abs())
        }
    }

    /// Embedding given by the first two pixel values.
    struct Planar;
    impl EmbeddingProvider for Planar {
        fn name(&self) -> &str {
            "planar"
        }
        fn embed(&self, img: &Image) -> Result<Vec<f64>> {
            normalize(vec![img[[0, 0, 0]], img[[0, 0, 1]]])
        }
    }

    fn px(a: f64, b: f64) -> Image {
        let mut i = Array3::zeros((1, 1, 3));
        i[[0, 0, 0]] = a;
        i[[0, 0, 1]] = b;
        i
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!((gini(&[0.0, 0.0, 0.0, 1.0]).unwrap() - 0.75).abs() < 1e-15);
        let g = gini(&[1.0, 2.0, 3.0]).unwrap();
        assert!((g - gini_oracle(&[1.0, 2.0, 3.0])).abs() < 1e-15);
        assert!((g - 2.0 / 9.0).abs() < 1e-15);
        assert_eq!(gini(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(gini(&[-1.0, 2.0]).is_err());
        assert!(gini(&[]).is_err());
    }

    #[test]
    fn ppl_and_smoothness_examples() {
        let constant = vec![px(1.0, 0.0); 4];
        assert_eq!(ppl(&constant, &Scalar).unwrap(), 0.0);
        assert_eq!(smoothness(&constant, &Scalar).unwrap(), 1.0);
        assert_eq!(ppl(&[px(0.0, 0.0), px(0.3, 0.0)], &Scalar).unwrap(), 0.3);
        let path = [px(0.0, 0.0), px(1.0, 0.0), px(3.0, 0.0), px(6.0, 0.0)];
        assert_eq!(ppl(&path, &Scalar).unwrap(), 2.0);
        let uniform: Vec<Image> = (0..5).map(|i| px(i as f64 * 0.5, 0.0)).collect();
        assert_eq!(smoothness(&uniform, &Scalar).unwrap(), 1.0);
        assert!((smoothness_from_distances(&[0.0, 0.0, 0.0, 1.0]).unwrap() - 0.25).abs() < 1e-15);
        assert!(ppl(&path[..1], &Scalar).is_err());
        assert!(smoothness(&path[..2], &Scalar).is_err());
    }

    #[test]
    fn tcr_and_tc_score_examples() {
        assert_eq!(tcr_from_similarities(&[0.9, 0.7, 0.4, 0.95], 0.6).unwrap(), 75.0);
        assert_eq!(tc_score_from_similarities(&[1.0, 0.5]).unwrap(), 0.75);
        let (first, last) = (px(1.0, 0.0), px(1.0, 0.0));
        let same = vec![first.clone(); 3];
        assert_eq!(tcr(&same, &first, &last, &Planar, 1.0).unwrap(), 100.0);
        assert_eq!(tc_score(&same, &first, &last, &Planar).unwrap(), 1.0);
        let orth = vec![px(0.0, 1.0); 3];
        assert_eq!(tcr(&orth, &first, &last, &Planar, 0.5).unwrap(), 0.0);
        assert_eq!(tc_score(&orth, &first, &last, &Planar).unwrap(), 0.0);
    }

    #[test]
    fn fid_examples() {
        let a = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
        assert!(fid_from_embeddings(&a, &a).unwrap().abs() < 1e-6);
        let one = |m: f64, s: f64| (DVector::from_vec(vec![m]), DMatrix::from_vec(1, 1, vec![s * s]));
        let (ma, ca) = one(0.0, 1.0);
        let (mb, cb) = one(1.0, 1.0);
        assert!((frechet_distance(&ma, &ca, &mb, &cb).unwrap() - 1.0).abs() < 1e-12);
        let (mb, cb) = one(-2.0, 3.0);
        let want = 4.0 + 1.0 + 9.0 - 2.0 * 3.0;
        assert!((frechet_distance(&ma, &ca, &mb, &cb).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn default_providers_are_unit_norm() {
        let (d, e) = default_providers((64, 64)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Array3::from_shape_simple_fn((64, 64, 3), || rng.random::<f64>());
        let v = e.embed(&img).unwrap();
        assert_eq!(v.len(), 256);
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        assert_eq!(v, e.embed(&img).unwrap());
        assert_eq!(d.distance(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn aggregate_is_order_independent() {
        let r = |id: &str, v: f64| MetricsReport {
            id: id.into(),
            ppl: v,
            tcr: 100.0,
            tc_score: 0.5,
            smoothness: v / 10.0,
            fid: 1.0,
            tau: 0.5,
            distance_provider: "x".into(),
            embedding_provider: "y".into(),
        };
        let a = aggregate(&[r("a", 1.0), r("b", 3.0)]);
        let b = aggregate(&[r("b", 3.0), r("a", 1.0)]);
        assert_eq!(a, b);
        assert_eq!(a.ppl, MeanStd { mean: 2.0, std: 1.0 });
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gini_matches_oracle_and_is_scale_invariant(x in proptest::collection::vec(0.0f64..10.0, 1..40), a in 0.01f64..100.0) {
                let g = gini(&x).unwrap();
                prop_assert!((g - gini_oracle(&x)).abs() <= 1e-9);
                let n = x.len() as f64;
                prop_assert!(g >= 0.0 && g <= 1.0 - 1.0 / n + 1e-12);
                let scaled: Vec<f64> = x.iter().map(|v| v * a).collect();
                prop_assert!((gini(&scaled).unwrap() - g).abs() <= 1e-9);
            }

            #[test]
            fn tcr_is_monotone_in_tau(s in proptest::collection::vec(-1.0f64..1.0, 1..20), t1 in -1.0f64..1.0, t2 in -1.0f64..1.0) {
                let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                prop_assert!(tcr_from_similarities(&s, lo).unwrap() >= tcr_from_similarities(&s, hi).unwrap());
            }

            #[test]
            fn fid_is_symmetric(seed in 0u64..200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut set = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect() };
                let a = set(5);
                let b = set(7);
                let ab = fid_from_embeddings(&a, &b).unwrap();
                let ba = fid_from_embeddings(&b, &a).unwrap();
                prop_assert!((ab - ba).abs() < 1e-8 * ab.max(1.0));
                prop_assert!(fid_from_embeddings(&a, &a).unwrap().abs() < 1e-6);
            }
        }
    }
}
