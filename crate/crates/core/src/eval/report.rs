use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embed::{cosine, Embedder};
use crate::dif::{crop_region, enlarge_mask, DEFAULT_ENLARGE_RATIO};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ImageGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Identity,
    Editing,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Identity => "identity",
            Task::Editing => "editing",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Task::Identity),
            "editing" => Ok(Task::Editing),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    /// Metrics are taken on the enlarged mask crop rather than the frame.
    pub cropped: bool,
    pub crop_size: usize,
    pub enlarge_ratio: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            cropped: true,
            crop_size: 64,
            enlarge_ratio: DEFAULT_ENLARGE_RATIO,
        }
    }
}

/// Crop around the enlarged mask box, resized to `crop_size²`; the same
/// geometry the sampler uses for its local stage.
pub fn crop_metric_region(result: &ImageGrid, mask: &BinaryMask, ratio: f64, crop_size: usize) -> Result<ImageGrid> {
    let region = enlarge_mask(mask, ratio)?;
    Ok(crop_region(result, &region, (crop_size, crop_size))?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub task: Task,
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    pub n: usize,
    pub means: Means,
    pub records: Vec<EvalRecord>,
    pub protocol: EvalProtocol,
}

/// Inputs keyed by sample id. Every id must appear in all four maps.
#[derive(Debug, Clone, Default)]
pub struct EvalInputs {
    pub results: BTreeMap<String, ImageGrid>,
    pub masks: BTreeMap<String, BinaryMask>,
    pub sources: BTreeMap<String, ImageGrid>,
    pub prompts: BTreeMap<String, (String, Task)>,
}

impl EvalInputs {
    fn check_alignment(&self) -> Result<()> {
        let keys: [(&str, BTreeSet<&String>); 4] = [
            ("results", self.results.keys().collect()),
            ("masks", self.masks.keys().collect()),
            ("sources", self.sources.keys().collect()),
            ("prompts", self.prompts.keys().collect()),
        ];
        let all: BTreeSet<&String> = keys.iter().flat_map(|(_, k)| k.iter().copied()).collect();
        let mut missing = Vec::new();
        for id in all {
            for (name, set) in &keys {
                if !set.contains(id) {
                    missing.push(format!("{id} ({name})"));
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::IdMisalignment(missing))
        }
    }
}

/// Scores every sample of `task`: CLIP-T against its prompt, CLIP-I and DINO
/// against its source image, all on the metric crop.
pub fn evaluate_run(
    inputs: &EvalInputs,
    task: Task,
    clip: &dyn Embedder,
    dino: &dyn Embedder,
    protocol: &EvalProtocol,
) -> Result<TaskReport> {
    inputs.check_alignment()?;
    let mut records = Vec::new();
    for (id, (prompt, t)) in &inputs.prompts {
        if *t != task {
            continue;
        }
        let result = &inputs.results[id];
        let region = if protocol.cropped {
            crop_metric_region(result, &inputs.masks[id], protocol.enlarge_ratio, protocol.crop_size)?
        } else {
            result.resize(protocol.crop_size, protocol.crop_size)
        };
        let source = inputs.sources[id].resize(protocol.crop_size, protocol.crop_size);
        let clip_region = clip.embed_image(&region)?;
        let dino_region = dino.embed_image(&region)?;
        records.push(EvalRecord {
            sample_id: id.clone(),
            task,
            clip_t: cosine(&clip_region, &clip.embed_text(prompt)?)?,
            clip_i: cosine(&clip_region, &clip.embed_image(&source)?)?,
            dino: cosine(&dino_region, &dino.embed_image(&source)?)?,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyResults);
    }
    let n = records.len() as f64;
    let mean = |f: fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let means = Means {
        clip_t: mean(|r| r.clip_t),
        clip_i: mean(|r| r.clip_i),
        dino: mean(|r| r.dino),
    };
    Ok(TaskReport {
        task,
        n: records.len(),
        means,
        records,
        protocol: *protocol,
    })
}

impl TaskReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Task | n | CLIP-T | CLIP-I | DINO |\n|---|---|---|---|---|\n");
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {:.3} | {:.3} |",
            self.task.name(),
            self.n,
            self.means.clip_t,
            self.means.clip_i,
            self.means.dino
        );
        s
    }

    /// Writes `report-<task>.json` and `report-<task>.md` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
        let dir = dir.as_ref();
        let json = dir.join(format!("report-{}.json", self.task.name()));
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let md = dir.join(format!("report-{}.md", self.task.name()));
        std::fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))?;
        Ok(json)
    }
}
