use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_re, loss_re_with_grad, LossWeights};
use super::optim::Adam;
use crate::adm::PromptRecord;
use crate::backbone::{forward_noise, AdapterConfig, AdapterSet, Backbone, SamplerSchedule, TrainableBackbone};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ImageGrid, LatentGrid};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSource {
    Subject,
    Regularization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: ImageGrid,
    pub mask: BinaryMask,
    pub prompt: PromptRecord,
    pub source: SampleSource,
}

impl TrainSample {
    pub fn new(image: ImageGrid, mask: BinaryMask, prompt: PromptRecord, source: SampleSource) -> Result<Self> {
        let sample = Self {
            image,
            mask,
            prompt,
            source,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, _) = self.image.dims();
        if self.mask.dims() != (h, w) {
            return Err(Error::shape(&[h, w], &[self.mask.height(), self.mask.width()]));
        }
        match (self.source, self.prompt.has_identity_token) {
            (SampleSource::Regularization, true) => Err(Error::IdentityTokenLeak(self.prompt.text.clone())),
            (SampleSource::Subject, false) => Err(Error::Config(format!(
                "subject prompt {:?} lacks the identity token",
                self.prompt.text
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub adapters: AdapterConfig,
    pub weights: LossWeights,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Samples drawn per term per optimizer step.
    pub batch_size: usize,
    /// Range of the random subject-mask inflation, as a fraction of the
    /// longer side of the mask's bounding box.
    pub mask_inflation: (f64, f64),
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            adapters: AdapterConfig::default(),
            weights: LossWeights::default(),
            steps: 800,
            lr: 1e-4,
            seed: 0,
            batch_size: 2,
            mask_inflation: (0.05, 0.25),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.adapters.validate()?;
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let (lo, hi) = self.mask_inflation;
        if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("mask inflation range [{lo}, {hi}] is invalid")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub subject_loss: f64,
    pub reg_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub adapters: AdapterSet,
    pub log: Vec<LogEntry>,
}

/// Mean loss over the first and the last `window` log entries.
pub fn smoothed_loss(log: &[LogEntry], window: usize) -> Option<(f64, f64)> {
    if log.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(log.len());
    let mean = |s: &[LogEntry]| s.iter().map(|e| e.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..w]), mean(&log[log.len() - w..])))
}

/// One noised training example: latent at level `t`, the injected noise and
/// the loss mask at latent resolution.
struct Noised {
    z: LatentGrid,
    noise: LatentGrid,
    mask: BinaryMask,
    level: usize,
}

fn noise_sample(
    model: &dyn Backbone,
    image: &ImageGrid,
    mask: &BinaryMask,
    schedule: &SamplerSchedule,
    r: &mut ChaCha8Rng,
) -> Result<Noised> {
    let latent = model.encode(image)?;
    let (h, w, c) = latent.dims();
    // Level 0 carries no noise to predict.
    let level = r.random_range(1..=schedule.steps());
    let noise = rng::normal_latent(r, h, w, c);
    Ok(Noised {
        z: forward_noise(&latent, level, &noise, schedule)?,
        noise,
        mask: mask.resize_nearest(h, w),
        level,
    })
}

fn batch_loss(
    model: &dyn Backbone,
    batch: &[TrainSample],
    weights: &LossWeights,
    schedule: &SamplerSchedule,
    r: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let n = noise_sample(model, &s.image, &s.mask, schedule, r)?;
        let emb = model.encode_text(&s.prompt.text)?;
        let pred = model.predict_noise(&n.z, &emb, n.level, schedule)?;
        total += loss_re(&pred, &n.noise, &n.mask, weights)?;
    }
    Ok(total / batch.len() as f64)
}

/// Subject term plus `beta` times the regularization term, each the batch
/// mean of the reweighted loss at one randomly drawn noise level per sample.
pub fn loss_final(
    model: &dyn Backbone,
    subject_batch: &[TrainSample],
    reg_batch: &[TrainSample],
    weights: &LossWeights,
    schedule: &SamplerSchedule,
    noise_seed: u64,
) -> Result<f64> {
    if subject_batch.is_empty() {
        return Err(Error::EmptyBatch("subject"));
    }
    if reg_batch.is_empty() {
        return Err(Error::EmptyBatch("regularization"));
    }
    let subject = batch_loss(model, subject_batch, weights, schedule, &mut rng::seeded(noise_seed, 0))?;
    if weights.beta == 0.0 {
        return Ok(subject);
    }
    let reg = batch_loss(model, reg_batch, weights, schedule, &mut rng::seeded(noise_seed, 1))?;
    Ok(subject + weights.beta * reg)
}

fn inflate(mask: &BinaryMask, range: (f64, f64), r: &mut ChaCha8Rng) -> BinaryMask {
    let Some(bbox) = mask.bbox() else {
        return mask.clone();
    };
    let frac = if range.1 > range.0 {
        r.random_range(range.0..range.1)
    } else {
        range.0
    };
    let radius = (frac * bbox.height().max(bbox.width()) as f64).round() as usize;
    mask.dilate(radius)
}

#[allow(clippy::too_many_arguments)]
fn accumulate_term(
    model: &dyn TrainableBackbone,
    samples: &[TrainSample],
    picks: &[usize],
    weights: &LossWeights,
    schedule: &SamplerSchedule,
    factor: f64,
    inflation: Option<(f64, f64)>,
    r: &mut ChaCha8Rng,
    grads: &mut AdapterSet,
) -> Result<f64> {
    let mut total = 0.0;
    let scale = factor / picks.len() as f64;
    for &i in picks {
        let s = &samples[i];
        let mask = match inflation {
            Some(range) => inflate(&s.mask, range, r),
            None => s.mask.clone(),
        };
        let n = noise_sample(model, &s.image, &mask, schedule, r)?;
        let emb = model.encode_text(&s.prompt.text)?;
        let mut objective = |pred: &LatentGrid| {
            let (l, mut g) = loss_re_with_grad(pred, &n.noise, &n.mask, weights)?;
            g.array_mut().mapv_inplace(|v| v * scale);
            Ok((l, g))
        };
        let (l, g) = model.noise_loss_and_grad(&n.z, &emb, n.level, schedule, &mut objective)?;
        grads.add_assign(&g);
        total += l;
    }
    Ok(total / picks.len() as f64)
}

/// Trains fresh adapters on `subjects` (and `reg`, when given) and leaves
/// them attached to `backbone`.
pub fn finetune(
    backbone: &mut dyn TrainableBackbone,
    subjects: &[TrainSample],
    reg: Option<&[TrainSample]>,
    schedule: &SamplerSchedule,
    config: &FinetuneConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if subjects.is_empty() {
        return Err(Error::EmptyBatch("subject"));
    }
    for s in subjects.iter().chain(reg.unwrap_or(&[])) {
        s.validate()?;
    }
    let reg = reg.filter(|r| !r.is_empty());
    let base_hash = backbone.base_weight_hash();
    let initial = backbone.init_adapters(&config.adapters, config.seed)?;
    backbone.attach_adapters(initial.clone())?;
    let mut adam = Adam::new(&initial, config.lr);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut r = rng::seeded(config.seed, 1_000 + step as u64);
        let mut grads = initial.zeros_like();
        let draw = |r: &mut ChaCha8Rng, n: usize| -> Vec<usize> {
            (0..config.batch_size).map(|_| r.random_range(0..n)).collect()
        };
        let subject_picks = draw(&mut r, subjects.len());
        let subject_loss = accumulate_term(
            &*backbone,
            subjects,
            &subject_picks,
            &config.weights,
            schedule,
            1.0,
            Some(config.mask_inflation),
            &mut r,
            &mut grads,
        )?;
        let mut reg_loss = 0.0;
        if let Some(reg) = reg {
            if config.weights.beta > 0.0 {
                let picks = draw(&mut r, reg.len());
                reg_loss = accumulate_term(
                    &*backbone,
                    reg,
                    &picks,
                    &config.weights,
                    schedule,
                    config.weights.beta,
                    None,
                    &mut r,
                    &mut grads,
                )?;
            }
        }
        let loss = subject_loss + config.weights.beta * reg_loss;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let params = backbone
            .adapters_mut()
            .ok_or_else(|| Error::Checkpoint("adapters detached during training".into()))?;
        adam.step(params, &grads);
        log.push(LogEntry {
            step,
            loss,
            subject_loss,
            reg_loss,
        });
    }
    debug_assert_eq!(base_hash, backbone.base_weight_hash());
    Ok(TrainOutcome {
        adapters: backbone.adapters().cloned().unwrap_or(initial),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ToyBackbone;
    use crate::grid::BoundingBox;

    fn subject() -> TrainSample {
        let img = ImageGrid::from_fn(16, 16, 3, |(y, x, k)| {
            if (4..12).contains(&y) && (4..12).contains(&x) {
                [0.55, 0.3, 0.15][k]
            } else {
                0.8
            }
        });
        let mask = BinaryMask::from_box(16, 16, &BoundingBox::new(4, 4, 12, 12));
        TrainSample::new(
            img,
            mask,
            PromptRecord::new("a [sks] teapot", vec![]),
            SampleSource::Subject,
        )
        .unwrap()
    }

    fn reg() -> TrainSample {
        TrainSample::new(
            ImageGrid::filled(16, 16, 3, 0.3),
            BinaryMask::full(16, 16),
            PromptRecord::new("a clay teapot", vec![]),
            SampleSource::Regularization,
        )
        .unwrap()
    }

    fn schedule() -> SamplerSchedule {
        SamplerSchedule::linear(50, 0.7, 0.1).unwrap()
    }

    #[test]
    fn sample_source_invariants() {
        let bad = TrainSample::new(
            ImageGrid::filled(4, 4, 3, 0.0),
            BinaryMask::full(4, 4),
            PromptRecord::new("a [sks] teapot", vec![]),
            SampleSource::Regularization,
        );
        assert!(matches!(bad, Err(Error::IdentityTokenLeak(_))));
    }

    #[test]
    fn beta_zero_is_subject_only() {
        let toy = ToyBackbone::new("toy", 1, (16, 16));
        let weights = LossWeights {
            beta: 0.0,
            ..Default::default()
        };
        let both = loss_final(&toy, &[subject()], &[reg()], &weights, &schedule(), 3).unwrap();
        let alone = batch_loss(&toy, &[subject()], &weights, &schedule(), &mut rng::seeded(3, 0)).unwrap();
        assert_eq!(both, alone);
        assert!(matches!(
            loss_final(&toy, &[subject()], &[], &weights, &schedule(), 3),
            Err(Error::EmptyBatch(_))
        ));
        for beta in [0.2, 0.4, 1.0] {
            let w = LossWeights {
                beta,
                ..Default::default()
            };
            assert!(loss_final(&toy, &[subject()], &[reg()], &w, &schedule(), 3).unwrap() > alone);
        }
    }

    #[test]
    fn zero_steps_keeps_initialisation() {
        let mut toy = ToyBackbone::new("toy", 1, (16, 16));
        let cfg = FinetuneConfig {
            steps: 0,
            ..Default::default()
        };
        let out = finetune(&mut toy, &[subject()], Some(&[reg()]), &schedule(), &cfg).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.adapters, toy.init_adapters(&cfg.adapters, cfg.seed).unwrap());
    }

    #[test]
    fn short_run_is_reproducible_and_moves_only_adapters() {
        let cfg = FinetuneConfig {
            steps: 5,
            lr: 1e-2,
            ..Default::default()
        };
        let mut a = ToyBackbone::new("toy", 1, (16, 16));
        let hash = a.base_weight_hash();
        let out_a = finetune(&mut a, &[subject()], Some(&[reg()]), &schedule(), &cfg).unwrap();
        let mut b = ToyBackbone::new("toy", 1, (16, 16));
        let out_b = finetune(&mut b, &[subject()], Some(&[reg()]), &schedule(), &cfg).unwrap();
        assert_eq!(out_a, out_b);
        assert_eq!(a.base_weight_hash(), hash);
        assert_ne!(out_a.adapters, a.init_adapters(&cfg.adapters, cfg.seed).unwrap());
        assert!(out_a.log.iter().all(|e| e.loss.is_finite()));
    }

    #[test]
    fn smoothing_windows() {
        let log: Vec<LogEntry> = (0..10)
            .map(|i| LogEntry {
                step: i,
                loss: i as f64,
                subject_loss: 0.0,
                reg_loss: 0.0,
            })
            .collect();
        assert_eq!(smoothed_loss(&log, 2), Some((0.5, 8.5)));
        assert_eq!(smoothed_loss(&[], 2), None);
    }
}
