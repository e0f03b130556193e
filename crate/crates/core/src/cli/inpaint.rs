use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::common::{
    absolute, backbone_with_checkpoint, conditioning, make_request, require_dir, require_file, run_inpaint, write_json,
};
use crate::adm::AttributeDictionary;
use crate::backbone::Backbone;
use crate::bench::BenchManifest;
use crate::config::RunConfig;
use crate::dif;
use crate::error::{Error, Result};
use crate::eval::Task;
use crate::grid::{BinaryMask, ImageGrid};
use crate::rng;
use crate::run::{RunDir, RunManifest};

#[derive(Debug, Clone, Default, Args)]
pub struct InpaintArgs {
    #[arg(long, required_unless_present_any = ["multi", "benchmark"])]
    pub background: Option<PathBuf>,
    /// Binary mask PNG (nonzero pixels are filled).
    #[arg(long, required_unless_present_any = ["multi", "benchmark"])]
    pub mask: Option<PathBuf>,
    #[arg(long, required_unless_present_any = ["multi", "benchmark"])]
    pub prompt: Option<String>,
    /// Fine-tuned adapter checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Attribute dictionary; defaults to the one stored with the checkpoint.
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
    /// Fraction of steps spent in the local stage; overrides `schedule.lambda`.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Dump the blended latent after every step.
    #[arg(long)]
    pub trace: bool,
    /// JSON file of ordered requests applied one after another.
    #[arg(long, conflicts_with = "benchmark")]
    pub multi: Option<PathBuf>,
    /// Benchmark manifest; inpaints every tuple into `results/`.
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    /// Only the first N benchmark tuples of each split.
    #[arg(long, requires = "benchmark")]
    pub limit: Option<usize>,
}

/// Ordered multi-subject requests; relative paths resolve against the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiSpec {
    pub background: PathBuf,
    pub requests: Vec<MultiEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiEntry {
    pub mask: PathBuf,
    pub prompt: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub dictionary: Option<PathBuf>,
}

/// What `results/prompts.json` records for each benchmark sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultPrompt {
    pub prompt: String,
    pub task: Task,
}

fn load_dictionary(
    explicit: Option<&Path>,
    from_checkpoint: Option<AttributeDictionary>,
) -> Result<Option<AttributeDictionary>> {
    match explicit {
        Some(p) => Ok(Some(AttributeDictionary::load(p)?)),
        None => Ok(from_checkpoint),
    }
}

fn check_optional(path: Option<&Path>, what: &str, dir: bool) -> Result<()> {
    match path {
        Some(p) if dir => require_dir(p, what),
        Some(p) => require_file(p, what),
        None => Ok(()),
    }
}

pub fn cmd_inpaint(cfg: &RunConfig, args: &InpaintArgs, run_dir: Option<&Path>) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    if let Some(l) = args.lambda {
        cfg.schedule.lambda = l;
    }
    cfg.validate()?;
    check_optional(args.checkpoint.as_deref(), "checkpoint", true)?;
    check_optional(args.dictionary.as_deref(), "dictionary", false)?;
    if let Some(path) = &args.multi {
        return inpaint_multi(&cfg, args, path, run_dir);
    }
    if let Some(path) = &args.benchmark {
        return inpaint_benchmark(&cfg, args, path, run_dir);
    }
    let (Some(bg_path), Some(mask_path), Some(prompt)) = (&args.background, &args.mask, &args.prompt) else {
        return Err(Error::Config("--background, --mask and --prompt are required".into()));
    };
    require_file(bg_path, "background")?;
    require_file(mask_path, "mask")?;
    let background = ImageGrid::load(bg_path)?;
    let mask = BinaryMask::load(mask_path)?;
    let (model, ckpt_dict) = backbone_with_checkpoint(&cfg, args.checkpoint.as_deref())?;
    let dictionary = load_dictionary(args.dictionary.as_deref(), ckpt_dict)?;

    let manifest = RunManifest::new(
        "inpaint",
        json!({
            "background": absolute(bg_path),
            "mask": absolute(mask_path),
            "prompt": prompt,
            "checkpoint": args.checkpoint.as_deref().map(absolute),
            "dictionary": args.dictionary.as_deref().map(absolute),
        }),
        &cfg,
    )?;
    let run = RunDir::create(&manifest, run_dir)?;
    let (cond, info) = conditioning(&cfg, model.as_ref(), prompt, dictionary.as_ref())?;
    write_json(&run.join("conditioning.json"), &info)?;
    let request = make_request(&cfg, background, mask, cond, cfg.seeds.inpaint)?;
    let (image, trace) = run_inpaint(&cfg, model.as_ref(), &request)?;
    if args.trace {
        dif::dump_trace(&trace, run.subdir("trace")?)?;
    }
    let out = run.join("output.png");
    image.save_png(&out)?;
    run.log(format!(
        "inpainted with {} sampler steps ({} local, {} global)",
        trace.len(),
        request.schedule.lcg_steps(),
        request.schedule.gch_steps()
    ))?;
    Ok(out)
}

fn inpaint_multi(cfg: &RunConfig, args: &InpaintArgs, path: &Path, run_dir: Option<&Path>) -> Result<PathBuf> {
    require_file(path, "multi-request file")?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: MultiSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if spec.requests.is_empty() {
        return Err(Error::Config("multi-request file has no requests".into()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let bg_path = resolve(&spec.background);
    require_file(&bg_path, "background")?;
    for r in &spec.requests {
        require_file(&resolve(&r.mask), "mask")?;
        check_optional(r.checkpoint.as_deref().map(resolve).as_deref(), "checkpoint", true)?;
        check_optional(r.dictionary.as_deref().map(resolve).as_deref(), "dictionary", false)?;
    }
    let mut models = Vec::with_capacity(spec.requests.len());
    for r in &spec.requests {
        let ckpt = r.checkpoint.as_deref().or(args.checkpoint.as_deref()).map(resolve);
        let (model, ckpt_dict) = backbone_with_checkpoint(cfg, ckpt.as_deref())?;
        let explicit = r.dictionary.as_deref().or(args.dictionary.as_deref()).map(resolve);
        models.push((model, load_dictionary(explicit.as_deref(), ckpt_dict)?));
    }
    let manifest = RunManifest::new("inpaint-multi", json!({ "multi": absolute(path), "spec": spec }), cfg)?;
    let run = RunDir::create(&manifest, run_dir)?;
    let mut current = ImageGrid::load(&bg_path)?;
    let mut infos = Vec::new();
    for (index, (r, (model, dict))) in spec.requests.iter().zip(&models).enumerate() {
        let mask = BinaryMask::load(resolve(&r.mask))?;
        let (cond, info) = conditioning(cfg, model.as_ref(), &r.prompt, dict.as_ref())?;
        infos.push(info);
        let seed = rng::stable_hash(format!("{}:{index}", cfg.seeds.inpaint).as_bytes());
        let request = make_request(cfg, current.clone(), mask, cond, seed)?;
        let (image, trace) = run_inpaint(cfg, model.as_ref(), &request).map_err(|e| Error::RequestFailed {
            index,
            source: Box::new(e),
        })?;
        if args.trace {
            dif::dump_trace(&trace, run.subdir(&format!("trace/{index:02}"))?)?;
        }
        image.save_png(run.join(format!("step-{index:02}.png")))?;
        current = image;
    }
    write_json(&run.join("conditioning.json"), &infos)?;
    let out = run.join("output.png");
    current.save_png(&out)?;
    run.log(format!("applied {} requests in order", spec.requests.len()))?;
    Ok(out)
}

fn inpaint_benchmark(cfg: &RunConfig, args: &InpaintArgs, path: &Path, run_dir: Option<&Path>) -> Result<PathBuf> {
    require_file(path, "benchmark manifest")?;
    let bench = BenchManifest::load(path)?;
    let mut taken: BTreeMap<Task, usize> = BTreeMap::new();
    let tuples: Vec<_> = bench
        .tuples
        .iter()
        .filter(|t| {
            let n = taken.entry(t.split).or_default();
            *n += 1;
            args.limit.is_none_or(|l| *n <= l)
        })
        .collect();
    for t in &tuples {
        require_file(&bench.image_root.join(&t.background_path), "benchmark background")?;
    }
    let (model, ckpt_dict) = backbone_with_checkpoint(cfg, args.checkpoint.as_deref())?;
    let dictionary = load_dictionary(args.dictionary.as_deref(), ckpt_dict)?;
    let manifest = RunManifest::new(
        "inpaint-benchmark",
        json!({
            "benchmark": absolute(path),
            "limit": args.limit,
            "checkpoint": args.checkpoint.as_deref().map(absolute),
            "dictionary": args.dictionary.as_deref().map(absolute),
        }),
        cfg,
    )?;
    let run = RunDir::create(&manifest, run_dir)?;
    let results = run.subdir("results")?;
    let mut prompts = BTreeMap::new();
    let mut infos = BTreeMap::new();
    for t in tuples {
        let background = ImageGrid::load(bench.image_root.join(&t.background_path))?;
        let prompt = &t.prompts[0].text;
        let (cond, info) = conditioning(cfg, model.as_ref() as &dyn Backbone, prompt, dictionary.as_ref())?;
        let seed = rng::stable_hash(format!("{}:{}", cfg.seeds.inpaint, t.id).as_bytes());
        let request = make_request(cfg, background, t.mask(), cond, seed)?;
        let (image, _) = run_inpaint(cfg, model.as_ref(), &request)?;
        image.save_png(results.join(format!("{}.png", t.id)))?;
        prompts.insert(
            t.id.clone(),
            ResultPrompt {
                prompt: prompt.clone(),
                task: t.split,
            },
        );
        infos.insert(t.id.clone(), info);
    }
    write_json(&results.join("prompts.json"), &prompts)?;
    write_json(&run.join("conditioning.json"), &infos)?;
    run.log(format!("inpainted {} benchmark tuples", prompts.len()))?;
    Ok(results)
}
