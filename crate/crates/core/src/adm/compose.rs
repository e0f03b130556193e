use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dictionary::{AttributeCategory, AttributeDictionary};
use super::vlm::{VlmClient, VlmRequest, VlmTask};
use crate::error::{Error, Result};
use crate::rng;

/// Seed of the deterministic composer used when the config does not set one.
pub const DEFAULT_COMPOSE_SEED: u64 = 5;

const MAX_ATTRIBUTES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub text: String,
    pub has_identity_token: bool,
    pub attributes_used: Vec<(AttributeCategory, String)>,
}

impl PromptRecord {
    pub fn new(text: impl Into<String>, attributes_used: Vec<(AttributeCategory, String)>) -> Self {
        let text = text.into();
        Self {
            has_identity_token: mentions_identity(&text),
            text,
            attributes_used,
        }
    }

    /// Rejects identity-token leaks and attributes missing from `dictionary`.
    pub fn check_regularization(&self, dictionary: &AttributeDictionary) -> Result<()> {
        if self.has_identity_token || mentions_identity(&self.text) {
            return Err(Error::IdentityTokenLeak(self.text.clone()));
        }
        for (cat, word) in &self.attributes_used {
            if !dictionary.contains(*cat, word) {
                return Err(Error::UnknownAttribute {
                    category: cat.to_string(),
                    word: word.clone(),
                });
            }
        }
        Ok(())
    }
}

fn mentions_identity(text: &str) -> bool {
    text.to_lowercase().contains("sks")
}

fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Adjectives in canonical category order before the class noun,
/// accessories after it as "with ...".
pub fn render_prompt(combo: &[(AttributeCategory, String)], subject_class: &str) -> String {
    let mut adjectives: Vec<&str> = Vec::new();
    let mut accessories: Vec<&str> = Vec::new();
    let mut sorted: Vec<&(AttributeCategory, String)> = combo.iter().collect();
    sorted.sort_by_key(|(c, _)| *c);
    for (cat, word) in sorted {
        if *cat == AttributeCategory::Accessory {
            accessories.push(word);
        } else {
            adjectives.push(word);
        }
    }
    let mut body = adjectives;
    body.push(subject_class);
    let mut text = format!("{} {}", article(body[0]), body.join(" "));
    for acc in accessories {
        text.push_str(&format!(" with {} {acc}", article(acc)));
    }
    text
}

/// Every combination of 1 to 3 distinct categories with one word each,
/// grouped by the number of attributes (index 0 holds single attributes).
pub fn enumerate_combinations(dictionary: &AttributeDictionary) -> Vec<Vec<Vec<(AttributeCategory, String)>>> {
    let cats: Vec<(AttributeCategory, &Vec<String>)> = dictionary
        .categories
        .iter()
        .filter(|(_, words)| !words.is_empty())
        .map(|(c, w)| (*c, w))
        .collect();
    let mut by_size = vec![Vec::new(); MAX_ATTRIBUTES];
    let n = cats.len();
    for subset in 1u32..(1 << n) {
        let chosen: Vec<usize> = (0..n).filter(|i| subset & (1 << i) != 0).collect();
        if chosen.len() > MAX_ATTRIBUTES {
            continue;
        }
        let mut partial: Vec<Vec<(AttributeCategory, String)>> = vec![Vec::new()];
        for &i in &chosen {
            let (cat, words) = cats[i];
            partial = partial
                .into_iter()
                .flat_map(|p| {
                    words.iter().map(move |w| {
                        let mut next = p.clone();
                        next.push((cat, w.clone()));
                        next
                    })
                })
                .collect();
        }
        by_size[chosen.len() - 1].extend(partial);
    }
    for group in &mut by_size {
        group.sort();
    }
    by_size
}

/// Seeded composer. Each prompt first draws an attribute count uniformly
/// among the counts that still have unused combinations, then draws one of
/// those combinations uniformly.
pub fn fallback_compose(dictionary: &AttributeDictionary, n: usize, seed: u64) -> Result<Vec<PromptRecord>> {
    if n == 0 {
        return Err(Error::Config("prompt count must be >= 1".into()));
    }
    let mut pool = enumerate_combinations(dictionary);
    let distinct: BTreeSet<String> = pool
        .iter()
        .flatten()
        .map(|c| render_prompt(c, &dictionary.subject_class))
        .collect();
    if distinct.len() < n {
        return Err(Error::InsufficientCombinations {
            available: distinct.len(),
            requested: n,
        });
    }
    let mut r = rng::seeded(seed, 0);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let sizes: Vec<usize> = (0..pool.len()).filter(|&k| !pool[k].is_empty()).collect();
        let k = sizes[r.random_range(0..sizes.len())];
        let pick = r.random_range(0..pool[k].len());
        let combo = pool[k].remove(pick);
        let text = render_prompt(&combo, &dictionary.subject_class);
        if seen.insert(text.clone()) {
            let record = PromptRecord::new(text, combo);
            record.check_regularization(dictionary)?;
            out.push(record);
        }
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComposeResponse {
    prompts: Vec<ComposedPrompt>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComposedPrompt {
    text: String,
    attributes: Vec<(AttributeCategory, String)>,
}

fn parse_composed(text: &str, dictionary: &AttributeDictionary, n: usize) -> Result<Vec<PromptRecord>> {
    let parsed: ComposeResponse = serde_json::from_str(text).map_err(|e| Error::MalformedVlmResponse(e.to_string()))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for p in parsed.prompts {
        let record = PromptRecord::new(p.text.trim(), p.attributes);
        record.check_regularization(dictionary)?;
        if seen.insert(record.text.clone()) {
            out.push(record);
        }
        if out.len() == n {
            return Ok(out);
        }
    }
    Err(Error::InsufficientCombinations {
        available: out.len(),
        requested: n,
    })
}

/// Composes `n` distinct regularization prompts. With a VLM the prompts are
/// requested from it (malformed output is retried once); without one, or
/// when it is unreachable, the seeded fallback composer is used.
pub fn compose_prompts(
    dictionary: &AttributeDictionary,
    n: usize,
    vlm: Option<&dyn VlmClient>,
    seed: u64,
) -> Result<Vec<PromptRecord>> {
    if dictionary.is_empty() {
        return Err(Error::InsufficientCombinations {
            available: 0,
            requested: n,
        });
    }
    let Some(vlm) = vlm else {
        return fallback_compose(dictionary, n, seed);
    };
    let prompt = format!(
        "Attribute dictionary for a {}: {}\nWrite {n} distinct short prompts, each naming the {} \
         with one to three of these attributes. Never use an identity token. Reply with JSON \
         {{\"prompts\": [{{\"text\": ..., \"attributes\": [[category, word], ...]}}]}}.",
        dictionary.subject_class,
        serde_json::to_string(&dictionary.categories)?,
        dictionary.subject_class,
    );
    let request = VlmRequest::new(VlmTask::ComposePrompts, prompt, Vec::new());
    let mut last = None;
    for _ in 0..2 {
        let response = match vlm.complete(&request) {
            Ok(r) => r,
            Err(Error::VlmUnavailable(reason)) => {
                tracing::warn!("VLM unavailable ({reason}); using the seeded composer");
                return fallback_compose(dictionary, n, seed);
            }
            Err(e) => return Err(e),
        };
        match parse_composed(&response.text, dictionary, n) {
            Err(Error::MalformedVlmResponse(e)) => last = Some(e),
            other => return other,
        }
    }
    Err(Error::MalformedVlmResponse(last.unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adm::MockVlm;
    use proptest::prelude::*;

    fn brown_clay() -> AttributeDictionary {
        let mut d = AttributeDictionary::new("teapot");
        d.insert(AttributeCategory::Color, "brown");
        d.insert(AttributeCategory::Material, "clay");
        d
    }

    fn rich() -> AttributeDictionary {
        let mut d = AttributeDictionary::new("teapot");
        for (c, ws) in [
            (AttributeCategory::Color, ["brown", "orange"]),
            (AttributeCategory::Material, ["ceramic", "metal"]),
            (AttributeCategory::Texture, ["glossy", "matte"]),
            (AttributeCategory::Shape, ["round", "tall"]),
        ] {
            for w in ws {
                d.insert(c, w);
            }
        }
        d
    }

    #[test]
    fn rendering_follows_canonical_order() {
        let combo = vec![
            (AttributeCategory::Accessory, "lid".to_string()),
            (AttributeCategory::Material, "clay".to_string()),
            (AttributeCategory::Color, "brown".to_string()),
        ];
        assert_eq!(render_prompt(&combo, "teapot"), "a brown clay teapot with a lid");
        assert_eq!(
            render_prompt(&[(AttributeCategory::Color, "orange".into())], "cat"),
            "an orange cat"
        );
    }

    #[test]
    fn combination_pool_sizes() {
        let pool = enumerate_combinations(&brown_clay());
        assert_eq!(pool.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 1, 0]);
        // 4 categories with 2 words: 8 + 6*4 + 4*8
        let pool = enumerate_combinations(&rich());
        assert_eq!(pool.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 24, 32]);
    }

    #[test]
    fn default_seed_on_brown_clay() {
        let texts: Vec<String> = fallback_compose(&brown_clay(), 2, DEFAULT_COMPOSE_SEED)
            .unwrap()
            .into_iter()
            .map(|p| p.text)
            .collect();
        assert_eq!(texts, ["a brown teapot", "a clay teapot"]);
    }

    #[test]
    fn too_many_prompts_requested() {
        assert!(matches!(
            fallback_compose(&brown_clay(), 4, 1),
            Err(Error::InsufficientCombinations {
                available: 3,
                requested: 4
            })
        ));
    }

    #[test]
    fn identity_token_rejected() {
        let d = brown_clay();
        let leaked = PromptRecord::new("a sks teapot", vec![]);
        assert!(matches!(
            leaked.check_regularization(&d),
            Err(Error::IdentityTokenLeak(_))
        ));
        let vlm = MockVlm::new().respond(
            VlmTask::ComposePrompts,
            r#"{"prompts":[{"text":"a brown [sks] teapot","attributes":[["color","brown"]]}]}"#,
        );
        assert!(matches!(
            compose_prompts(&d, 1, Some(&vlm), 0),
            Err(Error::IdentityTokenLeak(_))
        ));
    }

    #[test]
    fn vlm_prompts_are_validated_and_fallback_used_when_offline() {
        let d = brown_clay();
        let vlm = MockVlm::new().respond(
            VlmTask::ComposePrompts,
            r#"{"prompts":[{"text":"a clay teapot","attributes":[["material","clay"]]},
                           {"text":"a brown clay teapot","attributes":[["color","brown"],["material","clay"]]}]}"#,
        );
        let got = compose_prompts(&d, 2, Some(&vlm), 0).unwrap();
        assert_eq!(got[1].text, "a brown clay teapot");
        let offline = MockVlm::new();
        assert_eq!(
            compose_prompts(&d, 2, Some(&offline), 0).unwrap(),
            fallback_compose(&d, 2, 0).unwrap()
        );
    }

    proptest! {
        #[test]
        fn composer_invariants(seed in any::<u64>(), n in 1usize..=64) {
            let d = rich();
            let prompts = fallback_compose(&d, n, seed).unwrap();
            prop_assert_eq!(prompts.len(), n);
            let distinct: BTreeSet<_> = prompts.iter().map(|p| &p.text).collect();
            prop_assert_eq!(distinct.len(), n);
            for p in &prompts {
                prop_assert!(!p.has_identity_token);
                prop_assert!(!p.text.contains("sks"));
                prop_assert!((1..=3).contains(&p.attributes_used.len()));
                for (c, w) in &p.attributes_used {
                    prop_assert!(d.contains(*c, w));
                }
            }
            prop_assert_eq!(prompts, fallback_compose(&d, n, seed).unwrap());
        }
    }
}
