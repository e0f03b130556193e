//! Attribute-decoupled regularization data: a per-subject attribute
//! dictionary, attribute-rich prompts without the identity token, and the
//! images generated from them.

mod compose;
mod dictionary;
mod regset;
mod vlm;

pub use compose::{
    compose_prompts, enumerate_combinations, fallback_compose, render_prompt, PromptRecord, DEFAULT_COMPOSE_SEED,
};
pub use dictionary::{extract_dictionary, AttributeCategory, AttributeDictionary, Provenance};
pub use regset::{synthesize_regularization, MaskPolicy, RegSample, RegularizationSet, MAX_FAILURE_FRACTION};
pub use vlm::{HeuristicVlm, HttpVlm, MockVlm, RecordedVlm, VlmClient, VlmRequest, VlmResponse, VlmTask};
