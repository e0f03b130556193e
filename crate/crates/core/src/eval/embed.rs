use std::cell::RefCell;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::rng;
use crate::text::tokenize;

/// `⟨u, v⟩ / (‖u‖ ‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine(u: &Array1<f64>, v: &Array1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(&[u.len()], &[v.len()]));
    }
    let uu = u.dot(u);
    let vv = v.dot(v);
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((u.dot(v) / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Both,
}

/// Maps images and/or text into a shared space of unit vectors.
pub trait Embedder {
    fn name(&self) -> &str;

    fn modality(&self) -> Modality;

    fn dim(&self) -> usize;

    fn embed_image(&self, _image: &ImageGrid) -> Result<Array1<f64>> {
        Err(Error::Config(format!("{} does not embed images", self.name())))
    }

    fn embed_text(&self, _text: &str) -> Result<Array1<f64>> {
        Err(Error::Config(format!("{} does not embed text", self.name())))
    }
}

fn normalize(v: Array1<f64>) -> Result<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(v / n)
}

/// Deterministic stand-in for learned encoders. Images are bilinearly
/// downsampled to `grid × grid`, extended with a constant feature and pushed
/// through a seeded Gaussian projection; text is a bag of hashed token
/// vectors in the same output space.
#[derive(Debug, Clone)]
pub struct MockImageEmbedder {
    name: String,
    grid: usize,
    projection: Array2<f64>,
    seed: u64,
    text: bool,
}

impl MockImageEmbedder {
    pub fn new(name: &str, grid: usize, dim: usize, seed: u64, text: bool) -> Self {
        let inputs = grid * grid * 3 + 1;
        let mut r = rng::seeded(seed, 0);
        let projection = Array2::from_shape_fn((dim, inputs), |_| rng::standard_normal(&mut r));
        Self {
            name: name.to_string(),
            grid,
            projection,
            seed,
            text,
        }
    }

    /// Image and text embedder in the role of a contrastive image-text model.
    pub fn clip_like() -> Self {
        Self::new("mock-clip", 8, 64, 0xc11b, true)
    }

    /// Image-only embedder in the role of a self-supervised vision model.
    pub fn dino_like() -> Self {
        Self::new("mock-dino", 6, 96, 0xd1e0, false)
    }
}

impl Embedder for MockImageEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn modality(&self) -> Modality {
        if self.text {
            Modality::Both
        } else {
            Modality::Image
        }
    }

    fn dim(&self) -> usize {
        self.projection.nrows()
    }

    fn embed_image(&self, image: &ImageGrid) -> Result<Array1<f64>> {
        if image.channels() != 3 {
            return Err(Error::DimensionMismatch(format!(
                "expected RGB, got {} channels",
                image.channels()
            )));
        }
        let small = image.resize(self.grid, self.grid);
        let mut features: Vec<f64> = small.array().iter().map(|v| v - 0.5).collect();
        features.push(1.0);
        normalize(self.projection.dot(&Array1::from(features)))
    }

    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        if !self.text {
            return Err(Error::Config(format!("{} does not embed text", self.name)));
        }
        let mut v = Array1::zeros(self.dim());
        for word in tokenize(text) {
            let mut r = rng::seeded(self.seed ^ rng::stable_hash(word.as_bytes()), 1);
            v += &Array1::from_shape_fn(self.dim(), |_| rng::standard_normal(&mut r));
        }
        normalize(v)
    }
}

/// Wraps an embedder and keeps a copy of every image it is asked to embed.
pub struct RecordingEmbedder<E> {
    inner: E,
    seen: RefCell<Vec<ImageGrid>>,
}

impl<E: Embedder> RecordingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            seen: RefCell::new(Vec::new()),
        }
    }

    pub fn image_sizes(&self) -> Vec<(usize, usize)> {
        self.seen.borrow().iter().map(|i| (i.height(), i.width())).collect()
    }

    pub fn images(&self) -> Vec<ImageGrid> {
        self.seen.borrow().clone()
    }
}

impl<E: Embedder> Embedder for RecordingEmbedder<E> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn modality(&self) -> Modality {
        self.inner.modality()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_image(&self, image: &ImageGrid) -> Result<Array1<f64>> {
        self.seen.borrow_mut().push(image.clone());
        self.inner.embed_image(image)
    }

    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        self.inner.embed_text(text)
    }
}
