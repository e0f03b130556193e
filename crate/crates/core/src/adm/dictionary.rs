use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vlm::{VlmClient, VlmRequest, VlmTask};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::rng;

/// Declaration order is the canonical order used when rendering prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeCategory {
    Color,
    Material,
    Texture,
    Shape,
    Accessory,
    Other,
}

impl AttributeCategory {
    /// Order in which categories are considered when a prompt edits several.
    pub const PRIORITY: [AttributeCategory; 5] = [
        AttributeCategory::Color,
        AttributeCategory::Material,
        AttributeCategory::Texture,
        AttributeCategory::Shape,
        AttributeCategory::Accessory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttributeCategory::Color => "color",
            AttributeCategory::Material => "material",
            AttributeCategory::Texture => "texture",
            AttributeCategory::Shape => "shape",
            AttributeCategory::Accessory => "accessory",
            AttributeCategory::Other => "other",
        }
    }
}

impl fmt::Display for AttributeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub prompt_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDictionary {
    pub subject_class: String,
    pub categories: BTreeMap<AttributeCategory, Vec<String>>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl AttributeDictionary {
    pub fn new(subject_class: impl Into<String>) -> Self {
        Self {
            subject_class: subject_class.into(),
            categories: BTreeMap::new(),
            provenance: Provenance::default(),
        }
    }

    /// Adds a lowercased, trimmed word unless it is already listed.
    pub fn insert(&mut self, category: AttributeCategory, word: &str) {
        let word = word.trim().to_lowercase();
        if word.is_empty() {
            return;
        }
        let list = self.categories.entry(category).or_default();
        if !list.contains(&word) {
            list.push(word);
        }
    }

    pub fn words(&self, category: AttributeCategory) -> &[String] {
        self.categories.get(&category).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, category: AttributeCategory, word: &str) -> bool {
        self.words(category).iter().any(|w| w == word)
    }

    pub fn word_count(&self) -> usize {
        self.categories.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.word_count() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.subject_class.trim().is_empty() {
            return Err(Error::Config("dictionary subject class is empty".into()));
        }
        for (cat, words) in &self.categories {
            let mut seen = std::collections::BTreeSet::new();
            for w in words {
                if *w != w.to_lowercase() || !seen.insert(w) {
                    return Err(Error::Config(format!(
                        "dictionary list {cat} must be lowercase and deduplicated"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dict: Self = serde_json::from_str(&text)?;
        dict.validate()?;
        Ok(dict)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtractResponse {
    categories: BTreeMap<AttributeCategory, Vec<String>>,
}

fn extraction_prompt(subject_class: &str) -> String {
    format!(
        "List the visual attributes of the {subject_class} shown in the images. \
         Reply with JSON only, in the form \
         {{\"categories\": {{\"color\": [...], \"material\": [...], \"texture\": [...], \
         \"shape\": [...], \"accessory\": [...]}}}} using single lowercase words."
    )
}

/// Queries the VLM for the subject's attributes. A response that fails the
/// schema is retried once before giving up.
pub fn extract_dictionary(
    subject_images: &[ImageGrid],
    subject_class: &str,
    vlm: &dyn VlmClient,
) -> Result<AttributeDictionary> {
    if subject_images.is_empty() {
        return Err(Error::Config("attribute extraction needs at least one image".into()));
    }
    if subject_class.trim().is_empty() {
        return Err(Error::Config("subject class is empty".into()));
    }
    let prompt = extraction_prompt(subject_class);
    let request = VlmRequest::with_images(VlmTask::ExtractAttributes, prompt.clone(), subject_images)?;
    let mut last_error = None;
    for attempt in 0..2 {
        let response = vlm.complete(&request)?;
        match serde_json::from_str::<ExtractResponse>(&response.text) {
            Ok(parsed) => {
                let mut dict = AttributeDictionary::new(subject_class.trim());
                for (cat, words) in parsed.categories {
                    for w in words {
                        dict.insert(cat, &w);
                    }
                }
                dict.provenance = Provenance {
                    model: vlm.model_id().to_string(),
                    prompt_hash: rng::sha256_hex(prompt.as_bytes())[..16].to_string(),
                };
                return Ok(dict);
            }
            Err(e) => {
                tracing::warn!(attempt, "attribute extraction response rejected: {e}");
                last_error = Some(e.to_string());
            }
        }
    }
    Err(Error::MalformedVlmResponse(last_error.unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adm::MockVlm;

    fn images() -> Vec<ImageGrid> {
        vec![ImageGrid::filled(8, 8, 3, 0.4)]
    }

    #[test]
    fn fixture_passes_through() {
        let vlm = MockVlm::new().respond(
            VlmTask::ExtractAttributes,
            r#"{"categories":{"color":["brown"],"material":["clay"]}}"#,
        );
        let d = extract_dictionary(&images(), "teapot", &vlm).unwrap();
        assert_eq!(d.words(AttributeCategory::Color), ["brown"]);
        assert_eq!(d.words(AttributeCategory::Material), ["clay"]);
        assert_eq!(d.subject_class, "teapot");
        assert_eq!(d.provenance.model, "mock-vlm");
    }

    #[test]
    fn duplicates_and_case_are_normalised() {
        let vlm = MockVlm::new().respond(
            VlmTask::ExtractAttributes,
            r#"{"categories":{"color":["Brown","brown"," BROWN "]}}"#,
        );
        let d = extract_dictionary(&images(), "teapot", &vlm).unwrap();
        assert_eq!(d.words(AttributeCategory::Color), ["brown"]);
        d.validate().unwrap();
    }

    #[test]
    fn malformed_response_retried_once() {
        let ok = r#"{"categories":{"color":["brown"]}}"#;
        let vlm = MockVlm::new()
            .respond(VlmTask::ExtractAttributes, "not json")
            .respond(VlmTask::ExtractAttributes, ok);
        assert!(extract_dictionary(&images(), "teapot", &vlm).is_ok());

        let vlm = MockVlm::new()
            .respond(VlmTask::ExtractAttributes, "not json")
            .respond(VlmTask::ExtractAttributes, r#"{"colours":[]}"#)
            .respond(VlmTask::ExtractAttributes, ok);
        assert!(matches!(
            extract_dictionary(&images(), "teapot", &vlm),
            Err(Error::MalformedVlmResponse(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = AttributeDictionary::new("teapot");
        d.insert(AttributeCategory::Color, "brown");
        d.insert(AttributeCategory::Accessory, "lid");
        let path = dir.path().join("dict.json");
        d.save(&path).unwrap();
        assert_eq!(AttributeDictionary::load(&path).unwrap(), d);
    }
}
