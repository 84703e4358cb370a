//! Deterministic hashed bag-of-subwords text encoder.
//!
//! Each caption becomes a fixed-length grid of `max_len` token rows. A word's
//! row is the normalized sum of pseudo-random vectors keyed by the word itself
//! and its boundary-marked character trigrams. Unused rows hold the reserved
//! null token, so the empty caption maps to the all-null embedding used as the
//! unconditional branch of classifier-free guidance.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_TEXT_DIM: usize = 128;
pub const DEFAULT_TEXT_LEN: usize = 12;

const NULL_KEY: &str = "\u{0}<null>";

/// Token grid (`L x d`) for one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Array2<f64>,
    pub caption: String,
}

impl TextEmbedding {
    pub fn new(tokens: Array2<f64>, caption: impl Into<String>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(invalid("text embedding needs at least one token"));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text embedding".into()));
        }
        Ok(Self {
            tokens,
            caption: caption.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// Reverse-free flat view, row-major.
    pub fn flat(&self) -> Vec<f64> {
        self.tokens.iter().copied().collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn hashed_vector(key: &str, dim: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(key.as_bytes()));
    Array1::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng))
}

fn normalize(mut v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v /= n;
    }
    v
}

/// Split a caption into lowercase alphanumeric words.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextEncoder {
    pub dim: usize,
    pub max_len: usize,
}

impl Default for TextEncoder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_TEXT_DIM,
            max_len: DEFAULT_TEXT_LEN,
        }
    }
}

impl TextEncoder {
    pub fn new(dim: usize, max_len: usize) -> Result<Self> {
        if dim == 0 || max_len == 0 {
            return Err(invalid("text encoder needs positive dim and length"));
        }
        Ok(Self { dim, max_len })
    }

    pub fn null_token(&self) -> Array1<f64> {
        normalize(hashed_vector(NULL_KEY, self.dim))
    }

    fn word_vector(&self, word: &str) -> Array1<f64> {
        let mut acc = hashed_vector(&format!("w:{word}"), self.dim);
        let marked: Vec<char> = format!("<{word}>").chars().collect();
        for tri in marked.windows(3) {
            let key: String = tri.iter().collect();
            acc += &hashed_vector(&format!("t:{key}"), self.dim);
        }
        normalize(acc)
    }

    pub fn encode(&self, caption: &str) -> TextEmbedding {
        let words = tokenize(caption);
        let null = self.null_token();
        let mut tokens = Array2::zeros((self.max_len, self.dim));
        for (i, mut row) in tokens.axis_iter_mut(Axis(0)).enumerate() {
            match words.get(i) {
                Some(w) => row.assign(&self.word_vector(w)),
                None => row.assign(&null),
            }
        }
        TextEmbedding {
            tokens,
            caption: caption.to_string(),
        }
    }

    /// The unconditional embedding.
    pub fn null(&self) -> TextEmbedding {
        self.encode("")
    }
}

/// Encode with the default encoder.
pub fn encode_text(caption: &str) -> TextEmbedding {
    TextEncoder::default().encode(caption)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::caption_vocabulary;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn empty_caption_is_null_embedding() {
        let enc = TextEncoder::default();
        let e = enc.encode("");
        let null = enc.null_token();
        for row in e.tokens.axis_iter(Axis(0)) {
            assert_eq!(row, null);
        }
        assert_eq!(e, enc.null());
        // punctuation only carries no words either
        assert_eq!(enc.encode(" ,. ").tokens, e.tokens);
    }

    #[test]
    fn encoding_is_deterministic() {
        let a = encode_text("a red circle moving right");
        let b = encode_text("a red circle moving right");
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_captions_are_distinguishable() {
        let captions = caption_vocabulary(100);
        assert_eq!(captions.len(), 100);
        let embs: Vec<Vec<f64>> = captions.iter().map(|c| encode_text(c).flat()).collect();
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let c = cosine(&embs[i], &embs[j]);
                assert!(c < 1.0 - 1e-6, "{:?} vs {:?}: {c}", captions[i], captions[j]);
            }
        }
    }

    #[test]
    fn rows_are_unit_norm() {
        let e = encode_text("blue square on a gray background");
        for row in e.tokens.axis_iter(Axis(0)) {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn long_captions_truncate() {
        let enc = TextEncoder::new(8, 2).unwrap();
        assert_eq!(enc.encode("one two three").tokens, enc.encode("one two").tokens);
    }
}
