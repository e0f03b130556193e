//! Run configuration: one TOML document, every field defaulted, unknown keys
//! rejected, and dotted-key overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adm::{MaskPolicy, DEFAULT_COMPOSE_SEED};
use crate::backbone::{AdapterConfig, SamplerSchedule};
use crate::dif::{GchScope, DEFAULT_ENLARGE_RATIO};
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::tas::{DecomposeMode, DEFAULT_ELIMINATE_TEMPLATE};
use crate::training::{FinetuneConfig, LossWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub lambda: f64,
    pub alpha_end: f64,
    pub guidance_scale: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            lambda: 0.7,
            alpha_end: 0.1,
            guidance_scale: 1.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<SamplerSchedule> {
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(Error::Config(format!(
                "guidance scale must be a nonnegative finite number, got {}",
                self.guidance_scale
            )));
        }
        SamplerSchedule::linear(self.steps, self.lambda, self.alpha_end).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_inflation: (f64, f64),
}

impl Default for TrainSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self {
            steps: f.steps,
            lr: f.lr,
            batch_size: f.batch_size,
            mask_inflation: f.mask_inflation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VlmBackend {
    /// Offline colour-statistics extractor; composition falls back to the
    /// seeded template composer.
    #[default]
    Heuristic,
    Http,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlmSection {
    pub backend: VlmBackend,
    /// Overridden by the `SUBINPAINT_VLM_ENDPOINT` environment variable.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub fixture: Option<PathBuf>,
}

impl Default for VlmSection {
    fn default() -> Self {
        Self {
            backend: VlmBackend::Heuristic,
            endpoint: String::new(),
            model: "gpt-4o".into(),
            api_key_env: "SUBINPAINT_VLM_API_KEY".into(),
            fixture: None,
        }
    }
}

pub const VLM_ENDPOINT_ENV: &str = "SUBINPAINT_VLM_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmSection {
    pub enabled: bool,
    pub n_prompts: usize,
    pub subject_class: String,
    pub mask_policy: MaskPolicy,
    pub vlm: VlmSection,
}

impl Default for AdmSection {
    fn default() -> Self {
        Self {
            enabled: true,
            n_prompts: 30,
            subject_class: "object".into(),
            mask_policy: MaskPolicy::default(),
            vlm: VlmSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatcherKind {
    #[default]
    Keyword,
    Vlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasSection {
    pub enabled: bool,
    pub mode: DecomposeMode,
    pub template: String,
    pub matcher: MatcherKind,
}

impl Default for TasSection {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: DecomposeMode::default(),
            template: DEFAULT_ELIMINATE_TEMPLATE.into(),
            matcher: MatcherKind::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifSection {
    pub enabled: bool,
    pub enlarge_ratio: f64,
    pub gch_scope: GchScope,
}

impl Default for DifSection {
    fn default() -> Self {
        Self {
            enabled: true,
            enlarge_ratio: DEFAULT_ENLARGE_RATIO,
            gch_scope: GchScope::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub min_resolution: usize,
    pub min_box_side: usize,
    pub per_subject: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            min_resolution: crate::bench::DEFAULT_MIN_RESOLUTION,
            min_box_side: crate::bench::DEFAULT_MIN_BOX_SIDE,
            per_subject: 140,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub compose: u64,
    pub regularization: u64,
    pub train: u64,
    pub inpaint: u64,
    pub bench: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            compose: DEFAULT_COMPOSE_SEED,
            regularization: 0,
            train: 0,
            inpaint: 0,
            bench: 0,
        }
    }
}

impl Seeds {
    pub fn offset(&self, by: u64) -> Self {
        Self {
            compose: self.compose.wrapping_add(by),
            regularization: self.regularization.wrapping_add(by),
            train: self.train.wrapping_add(by),
            inpaint: self.inpaint.wrapping_add(by),
            bench: self.bench.wrapping_add(by),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub runs_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            runs_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: String,
    pub schedule: ScheduleConfig,
    pub loss: LossWeights,
    pub adapter: AdapterConfig,
    pub train: TrainSection,
    pub adm: AdmSection,
    pub tas: TasSection,
    pub dif: DifSection,
    pub eval: EvalProtocol,
    pub bench: BenchSection,
    pub seeds: Seeds,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: "toy".into(),
            schedule: ScheduleConfig::default(),
            loss: LossWeights::default(),
            adapter: AdapterConfig::default(),
            train: TrainSection::default(),
            adm: AdmSection::default(),
            tas: TasSection::default(),
            dif: DifSection::default(),
            eval: EvalProtocol::default(),
            bench: BenchSection::default(),
            seeds: Seeds::default(),
            paths: Paths::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key.path=value` overrides. Values are read as TOML literals,
    /// falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let parts: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = parts.split_last().expect("split yields at least one part");
            let mut table = &mut root;
            for p in parents {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override key {key:?}: {p:?} is not a section")))?;
            }
            table.insert(last.to_string(), parse_value(raw.trim()));
        }
        root.try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        crate::backbone::load_backbone(&self.backbone).map_err(wrap)?;
        self.schedule.build()?;
        self.finetune_config().validate().map_err(wrap)?;
        self.adm.mask_policy.validate().map_err(wrap)?;
        if self.adm.n_prompts == 0 {
            return Err(Error::Config("adm.n_prompts must be >= 1".into()));
        }
        if self.adm.subject_class.trim().is_empty() {
            return Err(Error::Config("adm.subject_class is empty".into()));
        }
        match self.adm.vlm.backend {
            VlmBackend::Fixture if self.adm.vlm.fixture.is_none() => {
                return Err(Error::Config(
                    "adm.vlm.fixture is required for the fixture backend".into(),
                ))
            }
            VlmBackend::Http if self.adm.vlm.model.trim().is_empty() => {
                return Err(Error::Config("adm.vlm.model is empty".into()))
            }
            _ => {}
        }
        if !self.tas.template.contains("{attributes}") {
            return Err(Error::Config("tas.template must contain {attributes}".into()));
        }
        if !(self.dif.enlarge_ratio >= 0.0 && self.dif.enlarge_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "dif.enlarge_ratio {} is invalid",
                self.dif.enlarge_ratio
            )));
        }
        if !(self.eval.enlarge_ratio >= 0.0 && self.eval.enlarge_ratio.is_finite()) || self.eval.crop_size == 0 {
            return Err(Error::Config(
                "eval protocol needs a nonnegative ratio and a positive crop size".into(),
            ));
        }
        if self.bench.per_subject == 0 {
            return Err(Error::Config("bench.per_subject must be >= 1".into()));
        }
        Ok(())
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            adapters: self.adapter.clone(),
            weights: self.loss,
            steps: self.train.steps,
            lr: self.train.lr,
            seed: self.seeds.train,
            batch_size: self.train.batch_size,
            mask_inflation: self.train.mask_inflation,
        }
    }

    /// Stable digest of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(crate::rng::sha256_hex(&json))
    }
}
