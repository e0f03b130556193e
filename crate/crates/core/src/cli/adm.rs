use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;

use super::common::{absolute, backbone, build_adm_data, SubjectFiles};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::run::{RunDir, RunManifest};

#[derive(Debug, Clone, Args)]
pub struct AdmArgs {
    /// Directory of subject PNG images.
    #[arg(long)]
    pub subject: PathBuf,
    /// Subject class noun; defaults to `adm.subject_class`.
    #[arg(long)]
    pub class: Option<String>,
    /// Number of regularization samples; overrides `adm.n_prompts`.
    #[arg(long)]
    pub reg_count: Option<usize>,
}

/// Writes `dictionary.json`, `prompts.json` and `regset/` and returns the
/// run directory.
pub fn cmd_adm(cfg: &RunConfig, args: &AdmArgs, run_dir: Option<&Path>) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    if let Some(n) = args.reg_count {
        cfg.adm.n_prompts = n;
    }
    if let Some(c) = &args.class {
        cfg.adm.subject_class = c.clone();
    }
    cfg.validate()?;
    if !cfg.adm.enabled {
        return Err(Error::Config("the adm command cannot run with ADM disabled".into()));
    }
    let files = SubjectFiles::scan(&args.subject)?;
    let generator = backbone(&cfg)?;
    let manifest = RunManifest::new(
        "adm",
        json!({ "subject": absolute(&args.subject), "subject_images": files.images.len() }),
        &cfg,
    )?;
    let run = RunDir::create(&manifest, run_dir)?;
    let images: Vec<_> = files.load()?.into_iter().map(|(i, _)| i).collect();
    build_adm_data(&cfg, &run, &images, &cfg.adm.subject_class, generator.as_ref())?;
    Ok(run.path().to_path_buf())
}
