//! Text-conditioned latent inpainting backbone.
//!
//! A backbone bundles a latent codec, a text encoder and a conditional noise
//! predictor. The reverse update is a deterministic (η = 0) step that re-noises
//! the clean estimate with the predicted noise, so every source of randomness
//! is an explicit seed or noise grid owned by the caller.

mod adapter;
mod codec;
mod schedule;
mod testing;
mod toy;

use ndarray::Zip;

pub use adapter::{AdapterConfig, AdapterSet, LoraAdapter, Projection};
pub use codec::{LatentCodec, ToyCodec};
pub use schedule::SamplerSchedule;
pub use testing::{CountingBackbone, OracleBackbone, SolidColorBackbone, UnboundBackbone};
pub use toy::ToyBackbone;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LatentGrid};
use crate::text::{TextEmbedding, TextEncoder};

#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub embedding: TextEmbedding,
    pub guidance_scale: f64,
}

impl Conditioning {
    pub fn new(embedding: TextEmbedding, guidance_scale: f64) -> Result<Self> {
        if !(guidance_scale >= 0.0 && guidance_scale.is_finite()) {
            return Err(Error::Config(format!(
                "guidance scale must be a nonnegative finite number, got {guidance_scale}"
            )));
        }
        Ok(Self {
            embedding,
            guidance_scale,
        })
    }
}

/// Output of one reverse step: the latent at step `t` and the clean estimate
/// it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub latent: LatentGrid,
    pub clean_estimate: LatentGrid,
}

/// `alpha[t] · latent + delta[t] · noise`.
pub fn forward_noise(
    latent: &LatentGrid,
    t: usize,
    noise: &LatentGrid,
    schedule: &SamplerSchedule,
) -> Result<LatentGrid> {
    schedule.check_step(t)?;
    latent.ensure_same_dims(noise)?;
    let (a, d) = (schedule.alpha(t), schedule.delta(t));
    let data = Zip::from(latent.array())
        .and(noise.array())
        .map_collect(|&x, &n| a * x + d * n);
    LatentGrid::from_array(data)
}

pub trait Backbone: TextEncoder {
    fn id(&self) -> &str;

    fn codec(&self) -> &dyn LatentCodec;

    /// Pixel resolution (h, w) that cropped patches are resized to.
    fn working_size(&self) -> (usize, usize);

    /// Noise estimate for a latent sitting at noise level `level`.
    fn predict_noise(
        &self,
        z: &LatentGrid,
        embedding: &TextEmbedding,
        level: usize,
        schedule: &SamplerSchedule,
    ) -> Result<LatentGrid>;

    fn encode(&self, image: &ImageGrid) -> Result<LatentGrid> {
        self.codec().encode(image)
    }

    fn decode(&self, latent: &LatentGrid) -> Result<ImageGrid> {
        self.codec().decode(latent)
    }

    /// Classifier-free guidance around the empty-prompt prediction.
    fn guided_noise(
        &self,
        z: &LatentGrid,
        cond: &Conditioning,
        level: usize,
        schedule: &SamplerSchedule,
    ) -> Result<LatentGrid> {
        let s = cond.guidance_scale;
        if s == 1.0 {
            return self.predict_noise(z, &cond.embedding, level, schedule);
        }
        let uncond = self.encode_text("")?;
        let eps_u = self.predict_noise(z, &uncond, level, schedule)?;
        if s == 0.0 {
            return Ok(eps_u);
        }
        let eps_c = self.predict_noise(z, &cond.embedding, level, schedule)?;
        let data = Zip::from(eps_u.array())
            .and(eps_c.array())
            .map_collect(|&u, &c| u + s * (c - u));
        LatentGrid::from_array(data)
    }

    /// Moves `z` from level `t + 1` to level `t`.
    fn predict_step(
        &self,
        z: &LatentGrid,
        cond: &Conditioning,
        t: usize,
        schedule: &SamplerSchedule,
    ) -> Result<StepOutput> {
        if t >= schedule.steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                steps: schedule.steps(),
            });
        }
        if !z.is_finite() {
            return Err(Error::DimensionMismatch("non-finite latent".into()));
        }
        let (a_next, d_next) = (schedule.alpha(t + 1), schedule.delta(t + 1));
        if a_next <= 0.0 {
            return Err(Error::InvalidSchedule(format!(
                "alpha[{}] = 0 leaves no signal to recover",
                t + 1
            )));
        }
        let eps = self.guided_noise(z, cond, t + 1, schedule)?;
        z.ensure_same_dims(&eps)?;
        let clean = Zip::from(z.array())
            .and(eps.array())
            .map_collect(|&zv, &e| (zv - d_next * e) / a_next);
        let (a, d) = (schedule.alpha(t), schedule.delta(t));
        let latent = Zip::from(&clean).and(eps.array()).map_collect(|&x, &e| a * x + d * e);
        Ok(StepOutput {
            latent: LatentGrid::from_array(latent)?,
            clean_estimate: LatentGrid::from_array(clean)?,
        })
    }
}

/// A backbone whose adapters can be trained by back-propagating a loss on
/// the predicted noise.
pub trait TrainableBackbone: Backbone {
    fn init_adapters(&self, config: &AdapterConfig, seed: u64) -> Result<AdapterSet>;

    fn attach_adapters(&mut self, adapters: AdapterSet) -> Result<()>;

    fn adapters(&self) -> Option<&AdapterSet>;

    fn adapters_mut(&mut self) -> Option<&mut AdapterSet>;

    /// Digest of the frozen base weights.
    fn base_weight_hash(&self) -> String;

    /// Predicts noise, hands it to `objective` (which returns the loss and its
    /// gradient w.r.t. the prediction) and back-propagates into adapter
    /// gradients.
    fn noise_loss_and_grad(
        &self,
        z: &LatentGrid,
        embedding: &TextEmbedding,
        level: usize,
        schedule: &SamplerSchedule,
        objective: &mut dyn FnMut(&LatentGrid) -> Result<(f64, LatentGrid)>,
    ) -> Result<(f64, AdapterSet)>;
}

/// Backbone identifiers with published adapter seams but no bundled weights.
pub const ADAPTER_IDS: &[&str] = &["sd15-inpaint", "sd2-inpaint", "sdxl-inpaint", "flux-fill"];

/// Resolves a backbone identifier from the run config.
pub fn load_backbone(id: &str) -> Result<Box<dyn TrainableBackbone>> {
    match id {
        "toy" => Ok(Box::new(ToyBackbone::new("toy", 1, (32, 32)))),
        "toy-f8" => Ok(Box::new(ToyBackbone::new("toy-f8", 8, (64, 64)))),
        other if ADAPTER_IDS.contains(&other) || other.starts_with("adapter:") => {
            Ok(Box::new(UnboundBackbone::new(other)))
        }
        other => Err(Error::Config(format!("unknown backbone {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::text::HashTextEncoder;

    fn schedule() -> SamplerSchedule {
        SamplerSchedule::linear(50, 0.7, 0.1).unwrap()
    }

    #[test]
    fn forward_noise_boundary_and_zero_noise() {
        let s = schedule();
        let mut r = rng::seeded(1, 0);
        let z = rng::normal_latent(&mut r, 4, 4, 3);
        let n = rng::normal_latent(&mut r, 4, 4, 3);
        assert_eq!(forward_noise(&z, 0, &n, &s).unwrap(), z);
        let zero = LatentGrid::zeros(4, 4, 3);
        let out = forward_noise(&z, 20, &zero, &s).unwrap();
        let expected = z.array().mapv(|v| v * s.alpha(20));
        assert_eq!(out.array(), &expected);
    }

    #[test]
    fn forward_noise_hand_case() {
        let s = SamplerSchedule::new(2, 0.5, vec![1.0, 0.5, 0.2], vec![0.0, 0.5, 0.9]).unwrap();
        let ones = LatentGrid::filled(2, 2, 1, 1.0);
        let neg = LatentGrid::filled(2, 2, 1, -1.0);
        let out = forward_noise(&ones, 1, &neg, &s).unwrap();
        assert!(out.array().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_noise_errors() {
        let s = schedule();
        let z = LatentGrid::zeros(4, 4, 3);
        assert!(matches!(
            forward_noise(&z, 51, &z, &s),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(matches!(
            forward_noise(&z, 3, &LatentGrid::zeros(4, 5, 3), &s),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn oracle_step_recovers_clean_latent() {
        let s = schedule();
        let mut r = rng::seeded(9, 0);
        let clean = rng::normal_latent(&mut r, 6, 5, 3);
        let noise = rng::normal_latent(&mut r, 6, 5, 3);
        let oracle = OracleBackbone::new(clean.clone());
        let z1 = forward_noise(&clean, 1, &noise, &s).unwrap();
        let cond = Conditioning::new(oracle.encode_text("x").unwrap(), 1.0).unwrap();
        let out = oracle.predict_step(&z1, &cond, 0, &s).unwrap();
        assert!(out.latent.max_abs_diff(&clean) <= 1e-6);
    }

    #[test]
    fn zero_guidance_ignores_embedding() {
        let toy = ToyBackbone::new("toy", 1, (8, 8));
        let s = schedule();
        let mut r = rng::seeded(3, 0);
        let z = rng::normal_latent(&mut r, 8, 8, 3);
        let enc = HashTextEncoder::new(32);
        let a = Conditioning::new(enc.encode_text("a red teapot").unwrap(), 0.0).unwrap();
        let b = Conditioning::new(enc.encode_text("a glass dog").unwrap(), 0.0).unwrap();
        let sa = toy.predict_step(&z, &a, 10, &s).unwrap();
        let sb = toy.predict_step(&z, &b, 10, &s).unwrap();
        assert_eq!(sa, sb);
        let c = Conditioning::new(enc.encode_text("a glass dog").unwrap(), 1.0).unwrap();
        assert_ne!(toy.predict_step(&z, &c, 10, &s).unwrap(), sa);
    }

    #[test]
    fn predict_step_is_deterministic() {
        let toy = ToyBackbone::new("toy", 1, (8, 8));
        let s = schedule();
        let mut r = rng::seeded(4, 0);
        let z = rng::normal_latent(&mut r, 8, 8, 3);
        let cond = Conditioning::new(toy.encode_text("a [sks] teapot").unwrap(), 3.0).unwrap();
        assert_eq!(
            toy.predict_step(&z, &cond, 5, &s).unwrap(),
            toy.predict_step(&z, &cond, 5, &s).unwrap()
        );
    }

    #[test]
    fn unbound_backbone_reports_unavailable() {
        let b = load_backbone("sdxl-inpaint").unwrap();
        let s = schedule();
        let z = LatentGrid::zeros(4, 4, 3);
        let emb = HashTextEncoder::new(8).encode_text("x").unwrap();
        let cond = Conditioning::new(emb, 1.0).unwrap();
        assert!(matches!(
            b.predict_step(&z, &cond, 0, &s),
            Err(Error::BackboneUnavailable(_))
        ));
        assert!(load_backbone("nope").is_err());
    }
}
