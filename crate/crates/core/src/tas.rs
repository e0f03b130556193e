//! Attribute substitution on prompt embeddings.
//!
//! The original subject's attribute (e.g. its colour) is located in the
//! attribute dictionary, encoded on its own, and its direction is projected
//! out of the user's prompt embedding:
//! `p_dec = p_raw − ⟨p_raw, u⟩ u` with `u = p_eli / ‖p_eli‖`.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::adm::{AttributeCategory, AttributeDictionary, VlmClient, VlmRequest, VlmTask};
use crate::backbone::Conditioning;
use crate::error::{Error, Result};
use crate::text::{tokenize, TextEmbedding, TextEncoder};

pub const DEFAULT_ELIMINATE_TEMPLATE: &str = "a {attributes} [class]";

/// Below this norm the eliminate direction is treated as degenerate.
pub const MIN_ELIMINATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecomposeMode {
    /// Every token row of `p_raw` is projected against the pooled `p_eli`.
    #[default]
    PooledPerToken,
    /// Both embeddings are flattened into single vectors (equal L required).
    Flattened,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMatch {
    pub matched_words: Vec<String>,
    pub category: AttributeCategory,
    pub eliminate_prompt: String,
}

impl AttributeMatch {
    pub fn none() -> Self {
        Self {
            matched_words: Vec::new(),
            category: AttributeCategory::Other,
            eliminate_prompt: String::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.matched_words.is_empty()
    }
}

/// Built-in vocabulary used to recognise which attribute category a prompt edits.
pub fn category_keywords(category: AttributeCategory) -> &'static [&'static str] {
    match category {
        AttributeCategory::Color => &[
            "red",
            "orange",
            "yellow",
            "green",
            "blue",
            "purple",
            "violet",
            "pink",
            "brown",
            "black",
            "white",
            "gray",
            "grey",
            "silver",
            "gold",
            "golden",
            "beige",
            "cyan",
            "magenta",
            "teal",
            "navy",
            "maroon",
            "turquoise",
            "cream",
            "tan",
        ],
        AttributeCategory::Material => &[
            "glass",
            "wood",
            "wooden",
            "metal",
            "metallic",
            "steel",
            "iron",
            "clay",
            "ceramic",
            "porcelain",
            "plastic",
            "stone",
            "marble",
            "paper",
            "leather",
            "fabric",
            "cotton",
            "wool",
            "rubber",
            "gold",
            "silver",
            "bronze",
            "copper",
            "crystal",
            "ice",
        ],
        AttributeCategory::Texture => &[
            "smooth",
            "rough",
            "glossy",
            "matte",
            "shiny",
            "fluffy",
            "furry",
            "striped",
            "spotted",
            "dotted",
            "checkered",
            "plaid",
            "polka",
            "scaly",
            "wrinkled",
            "velvety",
            "sparkly",
            "bumpy",
            "textured",
        ],
        AttributeCategory::Shape => &[
            "round",
            "square",
            "cubic",
            "cube",
            "spherical",
            "tall",
            "short",
            "flat",
            "long",
            "wide",
            "narrow",
            "oval",
            "triangular",
            "cylindrical",
            "curved",
            "angular",
            "heart-shaped",
            "star-shaped",
        ],
        AttributeCategory::Accessory => &[
            "hat",
            "cap",
            "scarf",
            "glasses",
            "sunglasses",
            "bow",
            "ribbon",
            "collar",
            "tie",
            "necklace",
            "crown",
            "helmet",
            "backpack",
            "lid",
            "handle",
            "sticker",
            "flower",
        ],
        AttributeCategory::Other => &[],
    }
}

fn contains_phrase(tokens: &[String], phrase: &str) -> bool {
    let needle = tokenize(phrase);
    !needle.is_empty() && tokens.windows(needle.len()).any(|w| w == needle.as_slice())
}

/// Deterministic keyword matcher.
///
/// Categories are scanned in priority order color > material > texture >
/// shape > accessory. A category is being edited when the prompt names one
/// of its keywords that is not already a dictionary word for that category;
/// the dictionary words of the first edited category are the match.
pub fn keyword_match(user_prompt: &str, dictionary: &AttributeDictionary, template: &str) -> AttributeMatch {
    let tokens = tokenize(user_prompt);
    for category in AttributeCategory::PRIORITY {
        let known = dictionary.words(category);
        if known.is_empty() {
            continue;
        }
        let edits = category_keywords(category)
            .iter()
            .any(|kw| contains_phrase(&tokens, kw) && !known.iter().any(|k| k == kw));
        if edits {
            let matched_words = known.to_vec();
            let eliminate_prompt = eliminate_prompt(template, &matched_words, dictionary);
            return AttributeMatch {
                matched_words,
                category,
                eliminate_prompt,
            };
        }
    }
    AttributeMatch::none()
}

pub fn eliminate_prompt(template: &str, words: &[String], dictionary: &AttributeDictionary) -> String {
    template
        .replace("{attributes}", &words.join(" "))
        .replace("[class]", &dictionary.subject_class)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VlmMatchResponse {
    category: Option<AttributeCategory>,
    words: Vec<String>,
}

/// Asks the VLM which dictionary attributes the prompt is editing. The reply
/// must be `{"category": <name>|null, "words": [...]}` with words drawn from
/// the dictionary.
pub fn match_attributes(
    user_prompt: &str,
    dictionary: &AttributeDictionary,
    vlm: &dyn VlmClient,
    template: &str,
) -> Result<AttributeMatch> {
    let prompt = format!(
        "Attribute dictionary: {}\nUser prompt: {user_prompt:?}\n\
         Which attribute category does the prompt change for this subject? \
         Reply with JSON {{\"category\": <category or null>, \"words\": [<dictionary words of that category>]}}.",
        serde_json::to_string(&dictionary.categories)?
    );
    let response = vlm.complete(&VlmRequest::new(VlmTask::MatchAttributes, prompt, Vec::new()))?;
    let parsed: VlmMatchResponse =
        serde_json::from_str(&response.text).map_err(|e| Error::MalformedVlmResponse(e.to_string()))?;
    let Some(category) = parsed.category else {
        return Ok(AttributeMatch::none());
    };
    for w in &parsed.words {
        if !dictionary.words(category).iter().any(|k| k == w) {
            return Err(Error::UnknownAttribute {
                category: category.to_string(),
                word: w.clone(),
            });
        }
    }
    if parsed.words.is_empty() {
        return Ok(AttributeMatch::none());
    }
    Ok(AttributeMatch {
        eliminate_prompt: eliminate_prompt(template, &parsed.words, dictionary),
        matched_words: parsed.words,
        category,
    })
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

fn unit(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = dot(v, v).sqrt();
    if norm.is_nan() || norm < MIN_ELIMINATE_NORM {
        return Err(Error::ZeroEliminateDirection { norm });
    }
    Ok(v.mapv(|x| x / norm))
}

fn reject(v: ArrayView1<f64>, u: &Array1<f64>) -> Array1<f64> {
    let c = dot(v, u.view());
    &v - &(u * c)
}

/// Removes the eliminate direction from `p_raw`.
pub fn decompose(p_raw: &TextEmbedding, p_eli: &TextEmbedding, mode: DecomposeMode) -> Result<TextEmbedding> {
    if p_raw.dim() != p_eli.dim() {
        return Err(Error::shape(&[p_eli.dim()], &[p_raw.dim()]));
    }
    match mode {
        DecomposeMode::PooledPerToken => {
            let u = unit(p_eli.pooled().view())?;
            let mut tokens = p_raw.tokens().clone();
            for mut row in tokens.rows_mut() {
                let projected = reject(row.view(), &u);
                row.assign(&projected);
            }
            rebuild(p_raw, tokens, &u)
        }
        DecomposeMode::Flattened => {
            if p_raw.tokens().dim() != p_eli.tokens().dim() {
                let (a, b) = p_eli.tokens().dim();
                let (c, d) = p_raw.tokens().dim();
                return Err(Error::shape(&[a, b], &[c, d]));
            }
            let flat_eli = Array1::from_iter(p_eli.tokens().iter().copied());
            let flat_raw = Array1::from_iter(p_raw.tokens().iter().copied());
            let u = unit(flat_eli.view())?;
            let projected = reject(flat_raw.view(), &u);
            let tokens =
                Array2::from_shape_vec(p_raw.tokens().raw_dim(), projected.to_vec()).expect("same element count");
            let pooled_u = unit(p_eli.pooled().view())?;
            rebuild(p_raw, tokens, &pooled_u)
        }
    }
}

fn rebuild(p_raw: &TextEmbedding, tokens: Array2<f64>, pooled_u: &Array1<f64>) -> Result<TextEmbedding> {
    match p_raw.pooling() {
        crate::text::Pooling::Mean => TextEmbedding::from_tokens(tokens),
        crate::text::Pooling::Supplied => TextEmbedding::with_pooled(tokens, reject(p_raw.pooled().view(), pooled_u)),
    }
}

/// How attribute matches are found at inference time.
pub enum Matcher<'a> {
    Keyword,
    /// Falls back to the keyword matcher when the VLM is unreachable.
    Vlm(&'a dyn VlmClient),
}

#[derive(Debug, Clone)]
pub struct SubstitutionOutcome {
    pub conditioning: Conditioning,
    pub matched: AttributeMatch,
    /// Set when a match existed but its direction was degenerate.
    pub skipped: bool,
}

pub struct SubstituteOptions<'a> {
    pub mode: DecomposeMode,
    pub template: &'a str,
    pub guidance_scale: f64,
}

impl Default for SubstituteOptions<'_> {
    fn default() -> Self {
        Self {
            mode: DecomposeMode::PooledPerToken,
            template: DEFAULT_ELIMINATE_TEMPLATE,
            guidance_scale: 1.0,
        }
    }
}

/// Encodes the user prompt and, when it edits a dictionary attribute, removes
/// that attribute's direction.
pub fn substitute(
    user_prompt: &str,
    dictionary: &AttributeDictionary,
    encoder: &dyn TextEncoder,
    matcher: Matcher<'_>,
    options: &SubstituteOptions<'_>,
) -> Result<SubstitutionOutcome> {
    let p_raw = encoder.encode_text(user_prompt)?;
    let matched = match matcher {
        Matcher::Keyword => keyword_match(user_prompt, dictionary, options.template),
        Matcher::Vlm(vlm) => match match_attributes(user_prompt, dictionary, vlm, options.template) {
            Err(Error::VlmUnavailable(reason)) => {
                tracing::warn!("VLM unavailable ({reason}); using keyword matcher");
                keyword_match(user_prompt, dictionary, options.template)
            }
            other => other?,
        },
    };
    let mut skipped = false;
    let embedding = if matched.is_empty() {
        p_raw
    } else {
        let p_eli = encoder.encode_text(&matched.eliminate_prompt)?;
        match decompose(&p_raw, &p_eli, options.mode) {
            Ok(dec) => dec,
            Err(Error::ZeroEliminateDirection { norm }) => {
                tracing::warn!("eliminate direction norm {norm:e}; skipping substitution");
                skipped = true;
                p_raw
            }
            Err(e) => return Err(e),
        }
    };
    Ok(SubstitutionOutcome {
        conditioning: Conditioning::new(embedding, options.guidance_scale)?,
        matched,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adm::MockVlm;
    use crate::text::HashTextEncoder;
    use ndarray::array;
    use proptest::prelude::*;

    fn dict(pairs: &[(AttributeCategory, &[&str])]) -> AttributeDictionary {
        let mut d = AttributeDictionary::new("teapot");
        for (c, ws) in pairs {
            for w in *ws {
                d.insert(*c, w);
            }
        }
        d
    }

    fn emb(rows: Array2<f64>) -> TextEmbedding {
        TextEmbedding::from_tokens(rows).unwrap()
    }

    #[test]
    fn colour_edit_matches_original_colour() {
        let d = dict(&[
            (AttributeCategory::Color, &["brown"]),
            (AttributeCategory::Material, &["clay"]),
        ]);
        let m = keyword_match("a red [sks] teapot", &d, DEFAULT_ELIMINATE_TEMPLATE);
        assert_eq!(m.matched_words, vec!["brown"]);
        assert_eq!(m.category, AttributeCategory::Color);
        assert_eq!(m.eliminate_prompt, "a brown teapot");
    }

    #[test]
    fn material_edit_matches_original_material() {
        let d = dict(&[(AttributeCategory::Material, &["clay"])]);
        let m = keyword_match("a glass [sks] teapot", &d, DEFAULT_ELIMINATE_TEMPLATE);
        assert_eq!(m.matched_words, vec!["clay"]);
        assert_eq!(m.category, AttributeCategory::Material);
    }

    #[test]
    fn no_edit_no_match() {
        let d = dict(&[
            (AttributeCategory::Color, &["brown"]),
            (AttributeCategory::Material, &["clay"]),
        ]);
        assert!(keyword_match("a [sks] teapot on a table", &d, DEFAULT_ELIMINATE_TEMPLATE).is_empty());
        // restating the original attribute is not an edit
        assert!(keyword_match("a brown [sks] teapot", &d, DEFAULT_ELIMINATE_TEMPLATE).is_empty());
        // substrings inside other words do not count
        assert!(keyword_match("a [sks] teapot standing", &d, DEFAULT_ELIMINATE_TEMPLATE).is_empty());
    }

    #[test]
    fn priority_prefers_colour_over_material() {
        let d = dict(&[
            (AttributeCategory::Color, &["brown"]),
            (AttributeCategory::Material, &["clay"]),
        ]);
        let m = keyword_match("a red glass [sks] teapot", &d, DEFAULT_ELIMINATE_TEMPLATE);
        assert_eq!(m.category, AttributeCategory::Color);
    }

    #[test]
    fn vlm_match_validates_against_dictionary() {
        let d = dict(&[(AttributeCategory::Color, &["brown"])]);
        let vlm = MockVlm::new()
            .respond(VlmTask::MatchAttributes, r#"{"category":"color","words":["brown"]}"#)
            .respond(VlmTask::MatchAttributes, r#"{"category":"color","words":["green"]}"#);
        let m = match_attributes("a red [sks] teapot", &d, &vlm, DEFAULT_ELIMINATE_TEMPLATE).unwrap();
        assert_eq!(m.matched_words, vec!["brown"]);
        assert!(matches!(
            match_attributes("a red [sks] teapot", &d, &vlm, DEFAULT_ELIMINATE_TEMPLATE),
            Err(Error::UnknownAttribute { .. })
        ));
    }

    #[test]
    fn orthogonal_inputs_unchanged() {
        let raw = emb(array![[1.0, 0.0, 0.0, 0.0]]);
        let eli = emb(array![[0.0, 1.0, 0.0, 0.0]]);
        assert_eq!(decompose(&raw, &eli, DecomposeMode::PooledPerToken).unwrap(), raw);
        assert_eq!(decompose(&raw, &eli, DecomposeMode::Flattened).unwrap(), raw);
    }

    #[test]
    fn parallel_inputs_annihilated() {
        let eli = emb(array![[0.5, -1.0, 2.0, 0.25]]);
        let raw = emb(eli.tokens() * 3.0);
        let dec = decompose(&raw, &eli, DecomposeMode::PooledPerToken).unwrap();
        assert!(dec.tokens().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn degenerate_direction_rejected() {
        let raw = emb(array![[1.0, 2.0]]);
        let eli = emb(array![[0.0, 0.0]]);
        assert!(matches!(
            decompose(&raw, &eli, DecomposeMode::PooledPerToken),
            Err(Error::ZeroEliminateDirection { .. })
        ));
    }

    #[test]
    fn flattened_mode_requires_equal_length() {
        let raw = emb(array![[1.0, 2.0], [3.0, 4.0]]);
        let eli = emb(array![[1.0, 0.0]]);
        assert!(matches!(
            decompose(&raw, &eli, DecomposeMode::Flattened),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn substitute_identity_path_is_bit_identical() {
        let enc = HashTextEncoder::new(16);
        let d = dict(&[(AttributeCategory::Color, &["brown"])]);
        let out = substitute(
            "a [sks] teapot on a table",
            &d,
            &enc,
            Matcher::Keyword,
            &SubstituteOptions::default(),
        )
        .unwrap();
        assert!(out.matched.is_empty());
        assert_eq!(
            out.conditioning.embedding,
            enc.encode_text("a [sks] teapot on a table").unwrap()
        );
    }

    #[test]
    fn substitute_removes_pooled_direction() {
        let enc = HashTextEncoder::new(16);
        let d = dict(&[(AttributeCategory::Color, &["brown"])]);
        let out = substitute(
            "a red [sks] teapot",
            &d,
            &enc,
            Matcher::Keyword,
            &SubstituteOptions::default(),
        )
        .unwrap();
        let p_eli = enc.encode_text("a brown teapot").unwrap();
        let ip = out.conditioning.embedding.pooled().dot(p_eli.pooled());
        assert!(ip.abs() <= 1e-9, "inner product {ip}");
    }

    #[test]
    fn substitute_falls_back_when_vlm_unavailable() {
        let enc = HashTextEncoder::new(16);
        let d = dict(&[(AttributeCategory::Color, &["brown"])]);
        let vlm = MockVlm::new();
        let out = substitute(
            "a red [sks] teapot",
            &d,
            &enc,
            Matcher::Vlm(&vlm),
            &SubstituteOptions::default(),
        )
        .unwrap();
        assert_eq!(out.matched.matched_words, vec!["brown"]);
    }

    fn arb_embedding(rows: usize, d: usize) -> impl Strategy<Value = TextEmbedding> {
        proptest::collection::vec(-3.0f64..3.0, rows * d)
            .prop_map(move |v| emb(Array2::from_shape_vec((rows, d), v).unwrap()))
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_contracting(
            raw in arb_embedding(3, 8),
            eli in arb_embedding(3, 8),
        ) {
            prop_assume!(eli.pooled().dot(eli.pooled()).sqrt() > 1e-3);
            for mode in [DecomposeMode::PooledPerToken, DecomposeMode::Flattened] {
                let once = decompose(&raw, &eli, mode).unwrap();
                let twice = decompose(&once, &eli, mode).unwrap();
                for (a, b) in once.tokens().iter().zip(twice.tokens().iter()) {
                    prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
                }
                let n_raw: f64 = raw.tokens().iter().map(|v| v * v).sum();
                let n_dec: f64 = once.tokens().iter().map(|v| v * v).sum();
                prop_assert!(n_dec <= n_raw * (1.0 + 1e-12));
            }
        }

        #[test]
        fn projection_is_linear(
            p1 in arb_embedding(2, 6),
            p2 in arb_embedding(2, 6),
            q in arb_embedding(2, 6),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            prop_assume!(q.pooled().dot(q.pooled()).sqrt() > 1e-3);
            let mix = emb(p1.tokens() * a + p2.tokens() * b);
            let lhs = decompose(&mix, &q, DecomposeMode::PooledPerToken).unwrap();
            let d1 = decompose(&p1, &q, DecomposeMode::PooledPerToken).unwrap();
            let d2 = decompose(&p2, &q, DecomposeMode::PooledPerToken).unwrap();
            let rhs = d1.tokens() * a + d2.tokens() * b;
            for (x, y) in lhs.tokens().iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }
    }
}
