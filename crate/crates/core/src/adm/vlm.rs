//! Request/response interface to a vision-language model plus offline stand-ins.

use std::cell::RefCell;
use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VlmTask {
    ExtractAttributes,
    MatchAttributes,
    ComposePrompts,
}

impl VlmTask {
    pub fn name(self) -> &'static str {
        match self {
            VlmTask::ExtractAttributes => "extract-attributes",
            VlmTask::MatchAttributes => "match-attributes",
            VlmTask::ComposePrompts => "compose-prompts",
        }
    }
}

/// A single exchange. Images travel as base64-encoded PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmRequest {
    pub id: String,
    pub task: VlmTask,
    pub prompt: String,
    pub images: Vec<String>,
}

impl VlmRequest {
    /// The id is a digest of the content so identical requests share an id.
    pub fn new(task: VlmTask, prompt: impl Into<String>, images: Vec<String>) -> Self {
        let prompt = prompt.into();
        let mut material = format!("{}\n{}", task.name(), prompt).into_bytes();
        for img in &images {
            material.push(b'\n');
            material.extend_from_slice(img.as_bytes());
        }
        Self {
            id: format!("{:016x}", rng::stable_hash(&material)),
            task,
            prompt,
            images,
        }
    }

    pub fn with_images(task: VlmTask, prompt: impl Into<String>, images: &[ImageGrid]) -> Result<Self> {
        let encoded = images
            .iter()
            .map(|img| {
                img.to_png_bytes()
                    .map(|b| base64::engine::general_purpose::STANDARD.encode(b))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(task, prompt, encoded))
    }

    pub fn decode_images(&self) -> Result<Vec<ImageGrid>> {
        self.images
            .iter()
            .map(|s| {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(s)
                    .map_err(|e| Error::MalformedVlmResponse(format!("bad image payload: {e}")))?;
                ImageGrid::from_png_bytes(&bytes)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmResponse {
    pub id: String,
    pub text: String,
}

pub trait VlmClient {
    fn model_id(&self) -> &str;

    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse>;
}

/// Replays queued responses per task. A task with an empty queue falls back
/// to its sticky response, if any, and is otherwise unavailable.
#[derive(Debug, Default)]
pub struct MockVlm {
    queued: RefCell<BTreeMap<VlmTask, VecDeque<String>>>,
    sticky: BTreeMap<VlmTask, String>,
    requests: RefCell<Vec<VlmRequest>>,
}

impl MockVlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn respond(self, task: VlmTask, text: impl Into<String>) -> Self {
        self.queued.borrow_mut().entry(task).or_default().push_back(text.into());
        self
    }

    pub fn always(mut self, task: VlmTask, text: impl Into<String>) -> Self {
        self.sticky.insert(task, text.into());
        self
    }

    pub fn requests(&self) -> Vec<VlmRequest> {
        self.requests.borrow().clone()
    }
}

impl VlmClient for MockVlm {
    fn model_id(&self) -> &str {
        "mock-vlm"
    }

    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse> {
        self.requests.borrow_mut().push(request.clone());
        let text = self
            .queued
            .borrow_mut()
            .get_mut(&request.task)
            .and_then(|q| q.pop_front())
            .or_else(|| self.sticky.get(&request.task).cloned())
            .ok_or_else(|| Error::VlmUnavailable(format!("mock has no response for {}", request.task.name())))?;
        Ok(VlmResponse {
            id: request.id.clone(),
            text,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordedEntry {
    task: VlmTask,
    #[serde(default)]
    id: Option<String>,
    text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordedFixture {
    model: String,
    records: Vec<RecordedEntry>,
}

/// Answers from a fixture file. Entries with an `id` match that request
/// exactly; entries without one answer any request of their task.
#[derive(Debug, Clone)]
pub struct RecordedVlm {
    fixture: RecordedFixture,
}

impl RecordedVlm {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            fixture: serde_json::from_str(&text)?,
        })
    }
}

impl VlmClient for RecordedVlm {
    fn model_id(&self) -> &str {
        &self.fixture.model
    }

    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse> {
        let records = &self.fixture.records;
        let exact = records
            .iter()
            .find(|r| r.task == request.task && r.id.as_deref() == Some(request.id.as_str()));
        let any = || records.iter().find(|r| r.task == request.task && r.id.is_none());
        let entry = exact.or_else(any).ok_or_else(|| {
            Error::VlmUnavailable(format!(
                "no recorded response for {} request {}",
                request.task.name(),
                request.id
            ))
        })?;
        Ok(VlmResponse {
            id: request.id.clone(),
            text: entry.text.clone(),
        })
    }
}

/// JSON-over-HTTP client. The endpoint receives the serialized
/// [`VlmRequest`] plus the model name and must answer with a [`VlmResponse`].
#[derive(Debug, Clone)]
pub struct HttpVlm {
    endpoint: String,
    model: String,
    api_key_env: String,
}

impl HttpVlm {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: api_key_env.into(),
        }
    }
}

#[derive(Serialize)]
struct HttpBody<'a> {
    model: &'a str,
    #[serde(flatten)]
    request: &'a VlmRequest,
}

impl VlmClient for HttpVlm {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse> {
        let mut call = ureq::post(&self.endpoint);
        if let Ok(key) = std::env::var(&self.api_key_env) {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let body = HttpBody {
            model: &self.model,
            request,
        };
        let mut response = call
            .send_json(&body)
            .map_err(|e| Error::VlmUnavailable(format!("{}: {e}", self.endpoint)))?;
        let parsed: VlmResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::MalformedVlmResponse(e.to_string()))?;
        if parsed.id != request.id {
            return Err(Error::MalformedVlmResponse(format!(
                "response id {} does not match request {}",
                parsed.id, request.id
            )));
        }
        Ok(parsed)
    }
}

const PALETTE: &[(&str, [f64; 3])] = &[
    ("black", [0.05, 0.05, 0.05]),
    ("white", [0.95, 0.95, 0.95]),
    ("gray", [0.5, 0.5, 0.5]),
    ("red", [0.8, 0.1, 0.1]),
    ("orange", [0.95, 0.55, 0.1]),
    ("yellow", [0.95, 0.9, 0.15]),
    ("green", [0.15, 0.65, 0.2]),
    ("blue", [0.15, 0.3, 0.85]),
    ("purple", [0.5, 0.2, 0.65]),
    ("pink", [0.95, 0.6, 0.75]),
    ("brown", [0.5, 0.3, 0.15]),
    ("beige", [0.85, 0.78, 0.62]),
];

/// Offline stand-in for attribute extraction: names the two palette colours
/// closest to the mean colour of the images' central region and lists a
/// fixed set of material, texture and shape words. Other tasks are
/// reported unavailable so callers take their deterministic fallbacks.
#[derive(Debug, Clone, Default)]
pub struct HeuristicVlm;

impl HeuristicVlm {
    pub fn describe_colors(images: &[ImageGrid]) -> Vec<String> {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for img in images {
            let (h, w, c) = img.dims();
            let a = img.array();
            for y in h / 4..(3 * h / 4).max(h / 4 + 1) {
                for x in w / 4..(3 * w / 4).max(w / 4 + 1) {
                    for (k, s) in sum.iter_mut().enumerate() {
                        *s += a[[y, x, k.min(c - 1)]];
                    }
                    n += 1;
                }
            }
        }
        let mean = sum.map(|s| s / n.max(1) as f64);
        let mut ranked: Vec<(f64, &str)> = PALETTE
            .iter()
            .map(|(name, rgb)| {
                let d: f64 = rgb.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
                (d, *name)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        ranked.iter().take(2).map(|(_, n)| n.to_string()).collect()
    }
}

impl VlmClient for HeuristicVlm {
    fn model_id(&self) -> &str {
        "heuristic-vlm"
    }

    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse> {
        if request.task != VlmTask::ExtractAttributes {
            return Err(Error::VlmUnavailable(format!(
                "heuristic stand-in does not support {}",
                request.task.name()
            )));
        }
        let colors = Self::describe_colors(&request.decode_images()?);
        let body = serde_json::json!({
            "categories": {
                "color": colors,
                "material": ["ceramic", "metal"],
                "texture": ["glossy", "matte"],
                "shape": ["round", "tall"],
            }
        });
        Ok(VlmResponse {
            id: request.id.clone(),
            text: body.to_string(),
        })
    }
}
