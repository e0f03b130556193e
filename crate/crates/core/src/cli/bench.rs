use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;

use super::common::{absolute, require_dir, require_file};
use crate::bench::{assemble, filter_backgrounds, load_annotations, BenchManifest, PromptSet, Subject};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::run::{RunDir, RunManifest};

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Annotation JSON: `[{"image": ..., "boxes": [[x, y, w, h], ...]}]`.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory the annotated image paths are relative to.
    #[arg(long)]
    pub images: PathBuf,
    /// Subject list JSON: `[{"id": ..., "class": ...}]`.
    #[arg(long)]
    pub subjects: PathBuf,
    /// Per-subject prompt sets JSON keyed by subject id; defaults are used
    /// for subjects not listed.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Overrides `bench.per_subject`.
    #[arg(long)]
    pub per_subject: Option<usize>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    require_file(path, what)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Writes `benchmark/benchmark.json` plus masks and returns the manifest path.
pub fn cmd_bench(cfg: &RunConfig, args: &BenchArgs, run_dir: Option<&Path>) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    if let Some(n) = args.per_subject {
        cfg.bench.per_subject = n;
    }
    cfg.validate()?;
    require_dir(&args.images, "image directory")?;
    require_file(&args.annotations, "annotation file")?;
    let annotations = load_annotations(&args.annotations).map_err(|e| Error::Config(e.to_string()))?;
    let subjects: Vec<Subject> = read_json(&args.subjects, "subject list")?;
    let prompt_sets: BTreeMap<String, PromptSet> = match &args.prompts {
        Some(p) => read_json(p, "prompt sets")?,
        None => BTreeMap::new(),
    };
    let manifest = RunManifest::new(
        "bench",
        json!({
            "annotations": absolute(&args.annotations),
            "images": absolute(&args.images),
            "subjects": absolute(&args.subjects),
            "prompts": args.prompts.as_deref().map(absolute),
        }),
        &cfg,
    )?;
    let run = RunDir::create(&manifest, run_dir)?;
    let backgrounds = filter_backgrounds(
        &args.images,
        &annotations,
        cfg.bench.min_resolution,
        cfg.bench.min_box_side,
    )?;
    run.log(format!(
        "{} of {} backgrounds kept",
        backgrounds.len(),
        annotations.len()
    ))?;
    let tuples = assemble(
        &subjects,
        &backgrounds,
        cfg.bench.per_subject,
        &prompt_sets,
        cfg.seeds.bench,
    )?;
    run.log(format!("{} tuples for {} subjects", tuples.len(), subjects.len()))?;
    let bench = BenchManifest {
        seed: cfg.seeds.bench,
        image_root: absolute(&args.images),
        tuples,
    };
    bench.save(run.join("benchmark"))
}
