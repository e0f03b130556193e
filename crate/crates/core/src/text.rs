//! Text embeddings and the deterministic hashing text encoder used by the
//! toy backbones.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::rng;

/// Placeholder token bound to the subject during fine-tuning.
pub const IDENTITY_TOKEN: &str = "[sks]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// `pooled` is the mean of the token rows.
    Mean,
    /// `pooled` was produced by the encoder itself.
    Supplied,
}

/// `L × d` token matrix plus a pooled `d`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    tokens: Array2<f64>,
    pooled: Array1<f64>,
    pooling: Pooling,
}

impl TextEmbedding {
    pub fn from_tokens(tokens: Array2<f64>) -> Result<Self> {
        Self::check_tokens(&tokens)?;
        let pooled = tokens.mean_axis(Axis(0)).expect("non-empty");
        Ok(Self {
            tokens,
            pooled,
            pooling: Pooling::Mean,
        })
    }

    pub fn with_pooled(tokens: Array2<f64>, pooled: Array1<f64>) -> Result<Self> {
        Self::check_tokens(&tokens)?;
        if pooled.len() != tokens.ncols() {
            return Err(Error::shape(&[tokens.ncols()], &[pooled.len()]));
        }
        if !pooled.iter().all(|v| v.is_finite()) {
            return Err(Error::DimensionMismatch("non-finite pooled vector".into()));
        }
        Ok(Self {
            tokens,
            pooled,
            pooling: Pooling::Supplied,
        })
    }

    fn check_tokens(tokens: &Array2<f64>) -> Result<()> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "text embedding needs L >= 1 and d >= 1, got {:?}",
                tokens.dim()
            )));
        }
        if !tokens.iter().all(|v| v.is_finite()) {
            return Err(Error::DimensionMismatch("non-finite token embedding".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn pooled(&self) -> &Array1<f64> {
        &self.pooled
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

pub trait TextEncoder {
    fn encode_text(&self, text: &str) -> Result<TextEmbedding>;
}

/// Lowercased words with surrounding punctuation stripped; `[sks]` survives intact.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric() && c != '[' && c != ']')
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Maps each word to a fixed pseudo-random Gaussian vector keyed by its hash,
/// prefixed with a start token so the empty prompt still has one row.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    dim: usize,
    scale: f64,
}

impl HashTextEncoder {
    pub const START_TOKEN: &'static str = "<start>";

    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            scale: 1.0 / (dim as f64).sqrt(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn word_vector(&self, word: &str) -> Array1<f64> {
        let mut r = rng::seeded(rng::stable_hash(word.as_bytes()), 7);
        Array1::from_shape_fn(self.dim, |_| rng::standard_normal(&mut r) * self.scale)
    }
}

impl TextEncoder for HashTextEncoder {
    fn encode_text(&self, text: &str) -> Result<TextEmbedding> {
        let words = tokenize(text);
        let mut tokens = Array2::zeros((words.len() + 1, self.dim));
        tokens.row_mut(0).assign(&self.word_vector(Self::START_TOKEN));
        for (i, w) in words.iter().enumerate() {
            tokens.row_mut(i + 1).assign(&self.word_vector(w));
        }
        TextEmbedding::from_tokens(tokens)
    }
}
