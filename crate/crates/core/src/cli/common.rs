use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::adm::{
    compose_prompts, extract_dictionary, synthesize_regularization, AttributeDictionary, HeuristicVlm, HttpVlm,
    RecordedVlm, RegularizationSet, VlmClient,
};
use crate::backbone::{load_backbone, Backbone, Conditioning, TrainableBackbone};
use crate::config::{MatcherKind, RunConfig, VlmBackend, VLM_ENDPOINT_ENV};
use crate::dif::{self, InpaintRequest, StageTrace};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ImageGrid};
use crate::run::RunDir;
use crate::tas::{self, Matcher, SubstituteOptions};
use crate::training::load_checkpoint;

pub(crate) fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

pub(crate) fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} is not a directory", path.display())))
    }
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

/// Subject images: the PNG files directly inside `dir`, sorted by name, each
/// with an optional mask at `dir/masks/<same name>`.
#[derive(Debug, Clone)]
pub(crate) struct SubjectFiles {
    pub images: Vec<PathBuf>,
}

impl SubjectFiles {
    pub fn scan(dir: &Path) -> Result<Self> {
        require_dir(dir, "subject directory")?;
        let mut images: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        images.sort();
        if images.is_empty() {
            return Err(Error::Config(format!("no subject images (*.png) in {}", dir.display())));
        }
        Ok(Self { images })
    }

    pub fn load(&self) -> Result<Vec<(ImageGrid, Option<BinaryMask>)>> {
        self.images
            .iter()
            .map(|p| {
                let image = ImageGrid::load(p)?;
                let mask_path = p
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join("masks")
                    .join(p.file_name().unwrap_or_default());
                let mask = if mask_path.is_file() {
                    let m = BinaryMask::load(&mask_path)?;
                    let (h, w, _) = image.dims();
                    if m.dims() != (h, w) {
                        return Err(Error::shape(&[h, w], &[m.height(), m.width()]));
                    }
                    Some(m)
                } else {
                    None
                };
                Ok((image, mask))
            })
            .collect()
    }
}

pub(crate) fn build_vlm(cfg: &RunConfig) -> Result<Box<dyn VlmClient>> {
    let v = &cfg.adm.vlm;
    Ok(match v.backend {
        VlmBackend::Heuristic => Box::new(HeuristicVlm),
        VlmBackend::Fixture => {
            let path = v
                .fixture
                .as_ref()
                .ok_or_else(|| Error::Config("adm.vlm.fixture is not set".into()))?;
            require_file(path, "VLM fixture")?;
            Box::new(RecordedVlm::load(path)?)
        }
        VlmBackend::Http => {
            let endpoint = std::env::var(VLM_ENDPOINT_ENV).unwrap_or_else(|_| v.endpoint.clone());
            if endpoint.trim().is_empty() {
                return Err(Error::Config(format!(
                    "HTTP VLM needs adm.vlm.endpoint or the {VLM_ENDPOINT_ENV} environment variable"
                )));
            }
            Box::new(HttpVlm::new(endpoint, v.model.clone(), v.api_key_env.clone()))
        }
    })
}

pub(crate) fn backbone(cfg: &RunConfig) -> Result<Box<dyn TrainableBackbone>> {
    load_backbone(&cfg.backbone)
}

/// Backbone with the checkpoint's adapters attached, plus the dictionary
/// stored next to them if there is one.
pub(crate) fn backbone_with_checkpoint(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
) -> Result<(Box<dyn TrainableBackbone>, Option<AttributeDictionary>)> {
    let mut b = backbone(cfg)?;
    let mut dict = None;
    if let Some(dir) = checkpoint {
        load_checkpoint(dir, Some(&mut *b))?;
        let d = dir.join(DICTIONARY_FILE);
        if d.is_file() {
            dict = Some(AttributeDictionary::load(d)?);
        }
    }
    Ok((b, dict))
}

pub(crate) const DICTIONARY_FILE: &str = "dictionary.json";

/// Dictionary extraction, prompt composition and image synthesis. Writes
/// `dictionary.json`, `prompts.json` and `regset/` into the run directory.
pub(crate) fn build_adm_data(
    cfg: &RunConfig,
    run: &RunDir,
    images: &[ImageGrid],
    subject_class: &str,
    generator: &dyn Backbone,
) -> Result<(AttributeDictionary, RegularizationSet)> {
    let vlm = build_vlm(cfg)?;
    let dict = extract_dictionary(images, subject_class, vlm.as_ref())?;
    dict.save(run.join(DICTIONARY_FILE))?;
    run.log(format!(
        "dictionary: {} words from {}",
        dict.word_count(),
        dict.provenance.model
    ))?;
    let prompts = compose_prompts(&dict, cfg.adm.n_prompts, Some(vlm.as_ref()), cfg.seeds.compose)?;
    for p in &prompts {
        p.check_regularization(&dict)?;
    }
    write_json(&run.join("prompts.json"), &prompts)?;
    let schedule = cfg.schedule.build()?;
    let set = synthesize_regularization(
        &prompts,
        generator,
        cfg.adm.mask_policy,
        &schedule,
        cfg.schedule.guidance_scale,
        cfg.seeds.regularization,
    )?;
    set.save(run.join("regset"))?;
    run.log(format!(
        "regularization set: {} of {} samples",
        set.samples.len(),
        set.target_count
    ))?;
    Ok((dict, set))
}

#[derive(Debug, Clone, Serialize)]
pub(crate) struct ConditioningInfo {
    pub prompt: String,
    pub substituted: bool,
    pub matched_words: Vec<String>,
    pub eliminate_prompt: String,
    pub skipped: bool,
}

/// Encodes `prompt`, applying attribute substitution when it is enabled and
/// a dictionary is available.
pub(crate) fn conditioning(
    cfg: &RunConfig,
    backbone: &dyn Backbone,
    prompt: &str,
    dictionary: Option<&AttributeDictionary>,
) -> Result<(Conditioning, ConditioningInfo)> {
    let scale = cfg.schedule.guidance_scale;
    match dictionary.filter(|_| cfg.tas.enabled) {
        None => Ok((
            Conditioning::new(backbone.encode_text(prompt)?, scale)?,
            ConditioningInfo {
                prompt: prompt.to_string(),
                substituted: false,
                matched_words: vec![],
                eliminate_prompt: String::new(),
                skipped: false,
            },
        )),
        Some(dict) => {
            let vlm = match cfg.tas.matcher {
                MatcherKind::Keyword => None,
                MatcherKind::Vlm => Some(build_vlm(cfg)?),
            };
            let matcher = match &vlm {
                Some(v) => Matcher::Vlm(v.as_ref()),
                None => Matcher::Keyword,
            };
            let options = SubstituteOptions {
                mode: cfg.tas.mode,
                template: &cfg.tas.template,
                guidance_scale: scale,
            };
            let out = tas::substitute(prompt, dict, backbone, matcher, &options)?;
            let info = ConditioningInfo {
                prompt: prompt.to_string(),
                substituted: !out.matched.is_empty() && !out.skipped,
                matched_words: out.matched.matched_words.clone(),
                eliminate_prompt: out.matched.eliminate_prompt.clone(),
                skipped: out.skipped,
            };
            Ok((out.conditioning, info))
        }
    }
}

pub(crate) fn make_request(
    cfg: &RunConfig,
    background: ImageGrid,
    mask: BinaryMask,
    conditioning: Conditioning,
    seed: u64,
) -> Result<InpaintRequest> {
    let mut req = InpaintRequest::new(background, mask, conditioning, cfg.schedule.build()?, seed);
    req.enlarge_ratio = cfg.dif.enlarge_ratio;
    req.gch_scope = cfg.dif.gch_scope;
    Ok(req)
}

/// Two-stage sampling, or a single full-frame pass when it is disabled.
pub(crate) fn run_inpaint(
    cfg: &RunConfig,
    backbone: &dyn Backbone,
    request: &InpaintRequest,
) -> Result<(ImageGrid, Vec<StageTrace>)> {
    if cfg.dif.enabled {
        dif::inpaint_traced(backbone, request)
    } else {
        dif::inpaint_single_stage_traced(backbone, request)
    }
}
