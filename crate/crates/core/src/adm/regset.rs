use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::compose::PromptRecord;
use crate::backbone::{Backbone, Conditioning, SamplerSchedule};
use crate::dif;
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, BoundingBox, ImageGrid};
use crate::rng;

/// Largest tolerated fraction of samples that fail to generate.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

/// How the loss mask of each regularization image is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MaskPolicy {
    /// Centred rectangle covering a uniformly drawn fraction of the area.
    CenteredBox {
        min_area: f64,
        max_area: f64,
    },
    Full,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy::CenteredBox {
            min_area: 0.4,
            max_area: 0.7,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        if let MaskPolicy::CenteredBox { min_area, max_area } = *self {
            if !(0.0 < min_area && min_area <= max_area && max_area <= 1.0) {
                return Err(Error::Config(format!(
                    "mask area range must satisfy 0 < min <= max <= 1, got [{min_area}, {max_area}]"
                )));
            }
        }
        Ok(())
    }

    pub fn sample(&self, h: usize, w: usize, seed: u64) -> BinaryMask {
        match *self {
            MaskPolicy::Full => BinaryMask::full(h, w),
            MaskPolicy::CenteredBox { min_area, max_area } => {
                let mut r = rng::seeded(seed, 3);
                let frac = if max_area > min_area {
                    r.random_range(min_area..max_area)
                } else {
                    min_area
                };
                let side = frac.sqrt();
                let bh = ((h as f64 * side).round() as usize).clamp(1, h);
                let bw = ((w as f64 * side).round() as usize).clamp(1, w);
                let top = (h - bh) / 2;
                let left = (w - bw) / 2;
                BinaryMask::from_box(h, w, &BoundingBox::new(top, left, top + bh, left + bw))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegSample {
    pub image: ImageGrid,
    pub prompt: PromptRecord,
    pub mask: BinaryMask,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationSet {
    pub samples: Vec<RegSample>,
    pub target_count: usize,
    pub seed: u64,
    pub generator: String,
    /// `(prompt index, error message)` of samples that failed to generate.
    pub failures: Vec<(usize, String)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    image: String,
    mask: String,
    prompt: PromptRecord,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    target_count: usize,
    seed: u64,
    generator: String,
    samples: Vec<ManifestEntry>,
    failures: Vec<(usize, String)>,
}

pub(crate) fn sample_seed(seed: u64, index: usize) -> u64 {
    rng::stable_hash(format!("{seed}:{index}").as_bytes())
}

/// Generates one image per prompt with `generator` in full-mask mode and
/// attaches a loss mask drawn from `policy`.
pub fn synthesize_regularization(
    prompts: &[PromptRecord],
    generator: &dyn Backbone,
    policy: MaskPolicy,
    schedule: &SamplerSchedule,
    guidance_scale: f64,
    seed: u64,
) -> Result<RegularizationSet> {
    policy.validate()?;
    let (h, w) = generator.working_size();
    let mut samples = Vec::with_capacity(prompts.len());
    let mut failures = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        if prompt.has_identity_token {
            return Err(Error::IdentityTokenLeak(prompt.text.clone()));
        }
        let s = sample_seed(seed, i);
        let generated = generator
            .encode_text(&prompt.text)
            .and_then(|emb| Conditioning::new(emb, guidance_scale))
            .and_then(|cond| dif::generate(generator, &cond, (h, w), schedule, s));
        match generated {
            Ok(image) => samples.push(RegSample {
                image,
                prompt: prompt.clone(),
                mask: policy.sample(h, w, s),
                seed: s,
            }),
            Err(e) => {
                tracing::warn!(index = i, "regularization sample failed: {e}");
                failures.push((i, e.to_string()));
            }
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * prompts.len() as f64 {
        return Err(Error::GenerationFailed {
            failed: failures.len(),
            total: prompts.len(),
        });
    }
    Ok(RegularizationSet {
        samples,
        target_count: prompts.len(),
        seed,
        generator: generator.id().to_string(),
        failures,
    })
}

impl RegularizationSet {
    /// Writes `images/`, `masks/` and `manifest.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut entries = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let image = format!("images/{i:04}.png");
            let mask = format!("masks/{i:04}.png");
            s.image.save_png(dir.join(&image))?;
            s.mask.save_png(dir.join(&mask))?;
            entries.push(ManifestEntry {
                image,
                mask,
                prompt: s.prompt.clone(),
                seed: s.seed,
            });
        }
        let manifest = Manifest {
            target_count: self.target_count,
            seed: self.seed,
            generator: self.generator.clone(),
            samples: entries,
            failures: self.failures.clone(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let samples = manifest
            .samples
            .into_iter()
            .map(|e| {
                Ok(RegSample {
                    image: ImageGrid::load(dir.join(&e.image))?,
                    mask: BinaryMask::load(dir.join(&e.mask))?,
                    prompt: e.prompt,
                    seed: e.seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            target_count: manifest.target_count,
            seed: manifest.seed,
            generator: manifest.generator,
            failures: manifest.failures,
        })
    }
}
