//! Deterministic reference backbones and instrumentation wrappers.

use std::cell::{Cell, RefCell};

use super::adapter::{AdapterConfig, AdapterSet};
use super::codec::{LatentCodec, ToyCodec};
use super::schedule::SamplerSchedule;
use super::{Backbone, Conditioning, StepOutput, TrainableBackbone};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::text::{HashTextEncoder, TextEmbedding, TextEncoder};

fn noise_towards(
    z: &LatentGrid,
    clean: impl Fn(usize, usize, usize) -> f64,
    level: usize,
    schedule: &SamplerSchedule,
) -> Result<LatentGrid> {
    schedule.check_step(level)?;
    let (a, d) = (schedule.alpha(level), schedule.delta(level));
    if d <= 0.0 {
        return Err(Error::InvalidSchedule(format!(
            "level {level} carries no noise to predict"
        )));
    }
    let src = z.array();
    let (h, w, c) = z.dims();
    Ok(LatentGrid::from_fn(h, w, c, |(y, x, k)| {
        (src[[y, x, k]] - a * clean(y, x, k)) / d
    }))
}

/// Predicts exactly the noise that separates `z` from a known clean latent.
#[derive(Debug, Clone)]
pub struct OracleBackbone {
    clean: LatentGrid,
    codec: ToyCodec,
    encoder: HashTextEncoder,
}

impl OracleBackbone {
    pub fn new(clean: LatentGrid) -> Self {
        let channels = clean.channels();
        Self {
            clean,
            codec: ToyCodec::new(1, channels),
            encoder: HashTextEncoder::new(32),
        }
    }
}

impl TextEncoder for OracleBackbone {
    fn encode_text(&self, text: &str) -> Result<TextEmbedding> {
        self.encoder.encode_text(text)
    }
}

impl Backbone for OracleBackbone {
    fn id(&self) -> &str {
        "oracle"
    }

    fn codec(&self) -> &dyn LatentCodec {
        &self.codec
    }

    fn working_size(&self) -> (usize, usize) {
        (self.clean.height(), self.clean.width())
    }

    fn predict_noise(
        &self,
        z: &LatentGrid,
        _embedding: &TextEmbedding,
        level: usize,
        schedule: &SamplerSchedule,
    ) -> Result<LatentGrid> {
        z.ensure_same_dims(&self.clean)?;
        let clean = self.clean.array();
        noise_towards(z, |y, x, k| clean[[y, x, k]], level, schedule)
    }
}

/// Denoises every latent towards a constant colour.
#[derive(Debug, Clone)]
pub struct SolidColorBackbone {
    color: Vec<f64>,
    working: (usize, usize),
    codec: ToyCodec,
    encoder: HashTextEncoder,
}

impl SolidColorBackbone {
    pub fn new(color: [f64; 3], working: (usize, usize)) -> Self {
        Self {
            color: color.to_vec(),
            working,
            codec: ToyCodec::identity(),
            encoder: HashTextEncoder::new(32),
        }
    }
}

impl TextEncoder for SolidColorBackbone {
    fn encode_text(&self, text: &str) -> Result<TextEmbedding> {
        self.encoder.encode_text(text)
    }
}

impl Backbone for SolidColorBackbone {
    fn id(&self) -> &str {
        "solid-color"
    }

    fn codec(&self) -> &dyn LatentCodec {
        &self.codec
    }

    fn working_size(&self) -> (usize, usize) {
        self.working
    }

    fn predict_noise(
        &self,
        z: &LatentGrid,
        _embedding: &TextEmbedding,
        level: usize,
        schedule: &SamplerSchedule,
    ) -> Result<LatentGrid> {
        if z.channels() != self.color.len() {
            return Err(Error::DimensionMismatch("colour/channel mismatch".into()));
        }
        noise_towards(z, |_, _, k| self.color[k], level, schedule)
    }
}

/// Counts `predict_step` invocations and records the step indices in order.
pub struct CountingBackbone<B> {
    inner: B,
    steps: Cell<usize>,
    seen: RefCell<Vec<usize>>,
}

impl<B: Backbone> CountingBackbone<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            steps: Cell::new(0),
            seen: RefCell::new(Vec::new()),
        }
    }

    pub fn step_calls(&self) -> usize {
        self.steps.get()
    }

    pub fn steps_seen(&self) -> Vec<usize> {
        self.seen.borrow().clone()
    }

    pub fn reset(&self) {
        self.steps.set(0);
        self.seen.borrow_mut().clear();
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backbone> TextEncoder for CountingBackbone<B> {
    fn encode_text(&self, text: &str) -> Result<TextEmbedding> {
        self.inner.encode_text(text)
    }
}

impl<B: Backbone> Backbone for CountingBackbone<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn codec(&self) -> &dyn LatentCodec {
        self.inner.codec()
    }

    fn working_size(&self) -> (usize, usize) {
        self.inner.working_size()
    }

    fn predict_noise(
        &self,
        z: &LatentGrid,
        embedding: &TextEmbedding,
        level: usize,
        schedule: &SamplerSchedule,
    ) -> Result<LatentGrid> {
        self.inner.predict_noise(z, embedding, level, schedule)
    }

    fn predict_step(
        &self,
        z: &LatentGrid,
        cond: &Conditioning,
        t: usize,
        schedule: &SamplerSchedule,
    ) -> Result<StepOutput> {
        self.steps.set(self.steps.get() + 1);
        self.seen.borrow_mut().push(t);
        self.inner.predict_step(z, cond, t, schedule)
    }
}

/// Placeholder for an external backbone whose weights are not present.
#[derive(Debug, Clone)]
pub struct UnboundBackbone {
    id: String,
    codec: ToyCodec,
}

impl UnboundBackbone {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            codec: ToyCodec::identity(),
        }
    }

    fn unavailable(&self) -> Error {
        Error::BackboneUnavailable(format!("no implementation bound for {:?}", self.id))
    }
}

impl TextEncoder for UnboundBackbone {
    fn encode_text(&self, _text: &str) -> Result<TextEmbedding> {
        Err(self.unavailable())
    }
}

impl Backbone for UnboundBackbone {
    fn id(&self) -> &str {
        &self.id
    }

    fn codec(&self) -> &dyn LatentCodec {
        &self.codec
    }

    fn working_size(&self) -> (usize, usize) {
        (64, 64)
    }

    fn predict_noise(
        &self,
        _z: &LatentGrid,
        _embedding: &TextEmbedding,
        _level: usize,
        _schedule: &SamplerSchedule,
    ) -> Result<LatentGrid> {
        Err(self.unavailable())
    }
}

impl TrainableBackbone for UnboundBackbone {
    fn init_adapters(&self, _config: &AdapterConfig, _seed: u64) -> Result<AdapterSet> {
        Err(self.unavailable())
    }

    fn attach_adapters(&mut self, _adapters: AdapterSet) -> Result<()> {
        Err(self.unavailable())
    }

    fn adapters(&self) -> Option<&AdapterSet> {
        None
    }

    fn adapters_mut(&mut self) -> Option<&mut AdapterSet> {
        None
    }

    fn base_weight_hash(&self) -> String {
        String::new()
    }

    fn noise_loss_and_grad(
        &self,
        _z: &LatentGrid,
        _embedding: &TextEmbedding,
        _level: usize,
        _schedule: &SamplerSchedule,
        _objective: &mut dyn FnMut(&LatentGrid) -> Result<(f64, LatentGrid)>,
    ) -> Result<(f64, AdapterSet)> {
        Err(self.unavailable())
    }
}
