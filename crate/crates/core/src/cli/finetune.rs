use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;

use super::common::{absolute, backbone, build_adm_data, require_dir, require_file, SubjectFiles, DICTIONARY_FILE};
use crate::adm::{extract_dictionary, AttributeDictionary, PromptRecord, RegularizationSet};
use crate::config::RunConfig;
use crate::error::Result;
use crate::grid::BinaryMask;
use crate::run::{RunDir, RunManifest};
use crate::text::IDENTITY_TOKEN;
use crate::training::{finetune, save_checkpoint, smoothed_loss, CheckpointMeta, SampleSource, TrainSample};

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    /// Directory of subject PNG images, with optional masks in `masks/`.
    #[arg(long)]
    pub subject: PathBuf,
    /// Subject class noun; defaults to `adm.subject_class`.
    #[arg(long)]
    pub class: Option<String>,
    /// Existing regularization set directory; built on the fly otherwise.
    #[arg(long)]
    pub regset: Option<PathBuf>,
    /// Existing attribute dictionary; extracted on the fly otherwise.
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Trains adapters and returns the checkpoint directory. The dictionary is
/// copied into the checkpoint so inference can apply substitution.
pub fn cmd_finetune(cfg: &RunConfig, args: &FinetuneArgs, run_dir: Option<&Path>) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    if let Some(c) = &args.class {
        cfg.adm.subject_class = c.clone();
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let files = SubjectFiles::scan(&args.subject)?;
    if let Some(r) = &args.regset {
        require_dir(r, "regularization set")?;
        require_file(&r.join("manifest.json"), "regularization manifest")?;
    }
    if let Some(d) = &args.dictionary {
        require_file(d, "dictionary")?;
    }
    let mut model = backbone(&cfg)?;
    let single_image = files.images.len() == 1;
    let manifest = RunManifest::new(
        "finetune",
        json!({
            "subject": absolute(&args.subject),
            "subject_images": files.images.len(),
            "regset": args.regset.as_deref().map(absolute),
            "dictionary": args.dictionary.as_deref().map(absolute),
        }),
        &cfg,
    )?;
    let run = RunDir::create(&manifest, run_dir)?;
    if single_image {
        run.log("single-image training")?;
    }

    let loaded = files.load()?;
    let originals: Vec<_> = loaded.iter().map(|(i, _)| i.clone()).collect();
    let class = cfg.adm.subject_class.clone();
    let (wh, ww) = model.working_size();

    let mut dictionary: Option<AttributeDictionary> = match &args.dictionary {
        Some(d) => Some(AttributeDictionary::load(d)?),
        None => None,
    };
    let mut reg_set: Option<RegularizationSet> = None;
    if cfg.adm.enabled {
        match &args.regset {
            Some(dir) => reg_set = Some(RegularizationSet::load(dir)?),
            None => {
                let (d, set) = build_adm_data(&cfg, &run, &originals, &class, model.as_ref())?;
                dictionary.get_or_insert(d);
                reg_set = Some(set);
            }
        }
    } else {
        run.log("ADM disabled: training on subject data only")?;
    }
    let dictionary = match dictionary {
        Some(d) => d,
        None => extract_dictionary(&originals, &class, super::common::build_vlm(&cfg)?.as_ref())?,
    };

    let subject_prompt = PromptRecord::new(format!("a {IDENTITY_TOKEN} {class}"), vec![]);
    let subjects = loaded
        .into_iter()
        .map(|(image, mask)| {
            let mask = mask.unwrap_or_else(|| BinaryMask::full(image.height(), image.width()));
            TrainSample::new(
                image.resize(wh, ww),
                mask.resize_nearest(wh, ww),
                subject_prompt.clone(),
                SampleSource::Subject,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let regs = reg_set
        .as_ref()
        .map(|set| {
            set.samples
                .iter()
                .map(|s| {
                    TrainSample::new(
                        s.image.resize(wh, ww),
                        s.mask.resize_nearest(wh, ww),
                        s.prompt.clone(),
                        SampleSource::Regularization,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;

    let schedule = cfg.schedule.build()?;
    let ft = cfg.finetune_config();
    let outcome = finetune(model.as_mut(), &subjects, regs.as_deref(), &schedule, &ft)?;
    if let Some((first, last)) = smoothed_loss(&outcome.log, 20) {
        run.log(format!("smoothed loss {first:.6} -> {last:.6}"))?;
    }
    let ckpt = run.join(CHECKPOINT_DIR);
    let meta = CheckpointMeta {
        backbone: model.id().to_string(),
        base_weight_hash: model.base_weight_hash(),
        adapter: ft.adapters.clone(),
        scales: Default::default(),
        weights: ft.weights,
        steps: ft.steps,
        lr: ft.lr,
        seed: ft.seed,
        tensors: vec![],
    };
    save_checkpoint(&ckpt, &outcome.adapters, meta, &outcome.log)?;
    dictionary.save(ckpt.join(DICTIONARY_FILE))?;
    run.log(format!("checkpoint written to {CHECKPOINT_DIR}/"))?;
    Ok(ckpt)
}
