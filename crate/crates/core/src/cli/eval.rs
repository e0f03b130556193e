use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;

use super::common::{absolute, require_dir, require_file};
use super::inpaint::ResultPrompt;
use crate::bench::BenchManifest;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, write_judge_requests, EvalInputs, JudgeRequest, MockImageEmbedder, Task};
use crate::grid::ImageGrid;
use crate::run::{RunDir, RunManifest};

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Directory of `<sample id>.png` results, as written by `inpaint --benchmark`.
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub benchmark: PathBuf,
    /// Reference images: `<subject id>.png`, or the first PNG in `<subject id>/`.
    #[arg(long)]
    pub sources: PathBuf,
    #[arg(long, default_value = "identity")]
    pub task: Task,
    /// Also write judge requests for an external attribute scorer.
    #[arg(long)]
    pub judge_requests: bool,
}

fn source_image(dir: &Path, subject: &str) -> Result<Option<ImageGrid>> {
    let flat = dir.join(format!("{subject}.png"));
    if flat.is_file() {
        return ImageGrid::load(flat).map(Some);
    }
    let sub = dir.join(subject);
    if sub.is_dir() {
        let mut pngs: Vec<_> = std::fs::read_dir(&sub)
            .map_err(|e| Error::io(&sub, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        pngs.sort();
        if let Some(first) = pngs.first() {
            return ImageGrid::load(first).map(Some);
        }
    }
    Ok(None)
}

/// Scores the results of one split and returns the JSON report path.
pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, run_dir: Option<&Path>) -> Result<PathBuf> {
    require_dir(&args.results, "results directory")?;
    require_dir(&args.sources, "sources directory")?;
    require_file(&args.benchmark, "benchmark manifest")?;
    let bench = BenchManifest::load(&args.benchmark)?;
    let recorded: BTreeMap<String, ResultPrompt> = {
        let p = args.results.join("prompts.json");
        if p.is_file() {
            serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?
        } else {
            BTreeMap::new()
        }
    };
    let manifest = RunManifest::new(
        "eval",
        json!({
            "results": absolute(&args.results),
            "benchmark": absolute(&args.benchmark),
            "sources": absolute(&args.sources),
            "task": args.task,
            "embedders": ["mock-clip", "mock-dino"],
        }),
        cfg,
    )?;
    let run = RunDir::create(&manifest, run_dir)?;

    let mut inputs = EvalInputs::default();
    let mut sources: BTreeMap<String, Option<ImageGrid>> = BTreeMap::new();
    for t in bench.tuples.iter().filter(|t| t.split == args.task) {
        let result = args.results.join(format!("{}.png", t.id));
        if result.is_file() {
            inputs.results.insert(t.id.clone(), ImageGrid::load(result)?);
        }
        inputs.masks.insert(t.id.clone(), t.mask());
        if !sources.contains_key(&t.subject_id) {
            sources.insert(t.subject_id.clone(), source_image(&args.sources, &t.subject_id)?);
        }
        if let Some(Some(src)) = sources.get(&t.subject_id) {
            inputs.sources.insert(t.id.clone(), src.clone());
        }
        let prompt = recorded
            .get(&t.id)
            .map(|r| r.prompt.clone())
            .unwrap_or_else(|| t.prompts[0].text.clone());
        inputs.prompts.insert(t.id.clone(), (prompt, t.split));
    }
    let clip = MockImageEmbedder::clip_like();
    let dino = MockImageEmbedder::dino_like();
    let report = evaluate_run(&inputs, args.task, &clip, &dino, &cfg.eval)?;
    let path = report.save(run.path())?;
    if args.judge_requests {
        let requests: Vec<_> = inputs
            .prompts
            .iter()
            .map(|(id, (prompt, _))| {
                JudgeRequest::new(
                    id.clone(),
                    prompt.clone(),
                    absolute(&args.results.join(format!("{id}.png"))).display().to_string(),
                )
            })
            .collect();
        write_judge_requests(run.join("judge_requests.jsonl"), &requests)?;
    }
    run.log(format!(
        "{} {} samples: clip_t {:.4} clip_i {:.4} dino {:.4}",
        report.n,
        args.task.name(),
        report.means.clip_t,
        report.means.clip_i,
        report.means.dino
    ))?;
    Ok(path)
}
