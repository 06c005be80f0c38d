//! Preference-pair synthesis by self-critique.
//!
//! No human labels anywhere: for each prompt x the pipeline makes three
//! generator calls —
//!
//! 1. *original*: answer x under the permissive system prompt s0,
//! 2. *critique*: point out what is wrong with that answer, under a fixed
//!    critic instruction,
//! 3. *revision*: rewrite the answer under the restrictive system prompt s1
//!    with the critique inserted —
//!
//! and keeps (x, original, revision) as a [`PreferencePair`]. The critique
//! text itself is scaffolding and is retained only in the per-prompt
//! [`CritiqueRecord`].
//!
//! [`Generator`] is the pluggable text source. A call carries both the
//! templated user message (`user`) and the raw originating prompt
//! (`prompt`): a remote model reads the former, while the deterministic
//! [`ToyGenerator`] keys its canned answers off the latter so its outputs
//! stay well-formed regardless of how the stage templates are worded.
//!
//! The toy generator plants behavior markers the rule judge looks for:
//! drafts contain the task's permissive marker (`UNSAFE_CONTENT` for the
//! safety task, `PERSONA_VOICE` for the persona task) and revisions contain
//! the restrictive one (`SAFE_REFUSAL`, `HONEST_FACT`) — label-consistent
//! by construction.

use crate::data::{PreferencePair, SystemPromptPair};
use crate::http::{Endpoint, HttpError};

/// Behavior markers planted by the toy generator and matched by the rule
/// judge. Training data must keep them in vocabulary for scores to mean
/// anything, so they are named constants rather than scattered literals.
pub const MARKER_UNSAFE: &str = "UNSAFE_CONTENT";
pub const MARKER_REFUSAL: &str = "SAFE_REFUSAL";
pub const MARKER_PERSONA: &str = "PERSONA_VOICE";
pub const MARKER_HONEST: &str = "HONEST_FACT";

/// Upper bound passed to generators for every synthesis call.
pub const SYNTH_MAX_TOKENS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Original,
    Critique,
    Revision,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Original => "original",
            Stage::Critique => "critique",
            Stage::Revision => "revision",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CritiqueError {
    #[error("no prompts to synthesize")]
    EmptyPrompts,
    #[error("template {name} must contain the placeholder {placeholder}")]
    BadTemplate {
        name: &'static str,
        placeholder: &'static str,
    },
    #[error("{stage} stage: {source}")]
    StageFailed {
        stage: Stage,
        #[source]
        source: Box<CritiqueError>,
    },
    #[error("revision identical to the original answer")]
    RevisionIdentical,
    #[error("generated text contains a line feed")]
    MultilineText,
    #[error("{0}")]
    Http(#[from] HttpError),
    #[error("generator reply has no string field 'text'")]
    BadReply,
    #[error("generator: {0}")]
    Other(String),
    #[error("{failed} of {total} prompts failed; first failure (prompt {index}): {first}")]
    PartialSynthesis {
        failed: usize,
        total: usize,
        index: usize,
        first: String,
    },
}

pub type CritiqueResult<T> = Result<T, CritiqueError>;

/// One generation request. `user` is the templated message for this stage;
/// `prompt` is always the raw originating x.
#[derive(Debug, Clone, Copy)]
pub struct GenRequest<'a> {
    pub system: &'a str,
    pub user: &'a str,
    pub prompt: &'a str,
    pub max_tokens: usize,
}

/// Pluggable completion source: given a system prompt and a user message,
/// produce a single-line completion.
pub trait Generator {
    fn generate(&self, request: &GenRequest<'_>) -> CritiqueResult<String>;
}

/// Full trace of one synthesis: prompt, draft, critique, revision.
/// Invariant (enforced by [`synthesize_pair`]): revision != original.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CritiqueRecord {
    pub prompt: String,
    pub original: String,
    pub critique: String,
    pub revision: String,
}

/// Stage templates. `{prompt}`, `{answer}` and `{critique}` are the
/// placeholders [`fill`] substitutes; the critic template must reference the
/// answer and the reviser template must reference the critique and answer.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PromptTemplates {
    /// Fixed system instruction for the critique stage.
    pub critic_system: String,
    /// User message template for the critique stage.
    pub critic: String,
    /// User message template for the revision stage.
    pub reviser: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            critic_system: "You review assistant answers for harmful or illegal content.".into(),
            critic: "Identify any harmful or illegal content in the answer: {answer}".into(),
            reviser: "Rewrite the answer to be harmless and safe, per this critique: \
                      {critique}. Original: {answer}"
                .into(),
        }
    }
}

impl PromptTemplates {
    pub fn check(&self) -> CritiqueResult<()> {
        if !self.critic.contains("{answer}") {
            return Err(CritiqueError::BadTemplate {
                name: "critic",
                placeholder: "{answer}",
            });
        }
        if !self.reviser.contains("{critique}") {
            return Err(CritiqueError::BadTemplate {
                name: "reviser",
                placeholder: "{critique}",
            });
        }
        if !self.reviser.contains("{answer}") {
            return Err(CritiqueError::BadTemplate {
                name: "reviser",
                placeholder: "{answer}",
            });
        }
        Ok(())
    }
}

/// Substitute the three placeholders into a template.
pub fn fill(template: &str, prompt: &str, answer: &str, critique: &str) -> String {
    template
        .replace("{prompt}", prompt)
        .replace("{answer}", answer)
        .replace("{critique}", critique)
}

fn single_line(text: String) -> CritiqueResult<String> {
    if text.contains('\n') {
        return Err(CritiqueError::MultilineText);
    }
    Ok(text)
}

/// Run the three-stage loop for one prompt. Errors carry the failing stage;
/// a revision equal to the original is rejected (the pair would carry no
/// preference signal).
pub fn synthesize_pair<G: Generator>(
    generator: &G,
    prompt: &str,
    sp: &SystemPromptPair,
    templates: &PromptTemplates,
) -> CritiqueResult<CritiqueRecord> {
    templates.check()?;
    let staged = |stage: Stage| {
        move |source: CritiqueError| CritiqueError::StageFailed {
            stage,
            source: Box::new(source),
        }
    };

    let original = generator
        .generate(&GenRequest {
            system: &sp.s0,
            user: prompt,
            prompt,
            max_tokens: SYNTH_MAX_TOKENS,
        })
        .and_then(single_line)
        .map_err(staged(Stage::Original))?;

    let critique = generator
        .generate(&GenRequest {
            system: &templates.critic_system,
            user: &fill(&templates.critic, prompt, &original, ""),
            prompt,
            max_tokens: SYNTH_MAX_TOKENS,
        })
        .and_then(single_line)
        .map_err(staged(Stage::Critique))?;

    let revision = generator
        .generate(&GenRequest {
            system: &sp.s1,
            user: &fill(&templates.reviser, prompt, &original, &critique),
            prompt,
            max_tokens: SYNTH_MAX_TOKENS,
        })
        .and_then(single_line)
        .map_err(staged(Stage::Revision))?;

    if revision == original {
        return Err(CritiqueError::RevisionIdentical);
    }
    Ok(CritiqueRecord {
        prompt: prompt.to_string(),
        original,
        critique,
        revision,
    })
}

/// Outcome of a dataset synthesis: the pairs that succeeded plus every
/// per-prompt failure (prompt index, prompt, error text).
#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub pairs: Vec<PreferencePair>,
    pub failures: Vec<SynthFailure>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthFailure {
    pub index: usize,
    pub prompt: String,
    pub error: String,
}

/// Synthesize pairs for every prompt. Failures never abort the sweep; they
/// are collected and, unless `allow_partial` is set, reported as one error
/// at the end so a flaky remote generator cannot silently thin the dataset.
pub fn synthesize_dataset<G: Generator>(
    generator: &G,
    prompts: &[String],
    sp: &SystemPromptPair,
    templates: &PromptTemplates,
    source_tag: &str,
    allow_partial: bool,
) -> CritiqueResult<SynthOutcome> {
    if prompts.is_empty() {
        return Err(CritiqueError::EmptyPrompts);
    }
    templates.check()?;
    let mut pairs = Vec::with_capacity(prompts.len());
    let mut failures = Vec::new();
    for (index, prompt) in prompts.iter().enumerate() {
        match synthesize_pair(generator, prompt, sp, templates) {
            Ok(record) => pairs.push(PreferencePair {
                prompt: record.prompt,
                original: record.original,
                revised: record.revision,
                source_tag: source_tag.to_string(),
            }),
            Err(e) => failures.push(SynthFailure {
                index,
                prompt: prompt.clone(),
                error: e.to_string(),
            }),
        }
    }
    if !failures.is_empty() && !allow_partial {
        let first = &failures[0];
        return Err(CritiqueError::PartialSynthesis {
            failed: failures.len(),
            total: prompts.len(),
            index: first.index,
            first: first.error.clone(),
        });
    }
    Ok(SynthOutcome { pairs, failures })
}

// ---------------------------------------------------------------------------
// Toy generator
// ---------------------------------------------------------------------------

/// Which marker family the toy generator plants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyStyle {
    /// Drafts comply with anything (`UNSAFE_CONTENT`), revisions refuse
    /// (`SAFE_REFUSAL`).
    Safety,
    /// Drafts stay in character (`PERSONA_VOICE`), revisions answer
    /// truthfully (`HONEST_FACT`).
    Persona,
}

impl ToyStyle {
    fn original(&self, slug: &str) -> String {
        match self {
            ToyStyle::Safety => format!("here is how: {MARKER_UNSAFE} {slug}"),
            ToyStyle::Persona => format!("in character: {MARKER_PERSONA} {slug}"),
        }
    }

    fn revision(&self, slug: &str) -> String {
        match self {
            ToyStyle::Safety => format!("{MARKER_REFUSAL} i cannot help with {slug}"),
            ToyStyle::Persona => format!("{MARKER_HONEST} the plain answer to {slug}"),
        }
    }

    fn critique(&self) -> String {
        match self {
            ToyStyle::Safety => format!("contains {MARKER_UNSAFE}"),
            ToyStyle::Persona => format!("contains {MARKER_PERSONA}"),
        }
    }
}

/// Whitespace-normalize a prompt into the slug the toy texts embed.
fn slug(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Deterministic stand-in for a real instruction-tuned model. The rules are
/// keyed on which system prompt arrives: s0 yields a marker-bearing draft,
/// s1 yields a marker-bearing revision, anything else is treated as the
/// critic instruction. Outputs depend only on (style, system, prompt), so
/// synthesis order and concurrency cannot change them; the seed is carried
/// for constructor compatibility with stochastic generators.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    seed: u64,
    sp: SystemPromptPair,
    style: ToyStyle,
}

impl ToyGenerator {
    pub fn new(seed: u64, sp: SystemPromptPair, style: ToyStyle) -> Self {
        Self { seed, sp, style }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Generator for ToyGenerator {
    fn generate(&self, request: &GenRequest<'_>) -> CritiqueResult<String> {
        Ok(toy_generate(
            self.seed,
            &self.sp,
            self.style,
            request.system,
            request.prompt,
        ))
    }
}

/// The toy generation rule as a standalone function: given the call's
/// system prompt `s` and the raw prompt `x`, emit the draft under s0, the
/// revision under s1, and the critique under anything else.
pub fn toy_generate(_seed: u64, sp: &SystemPromptPair, style: ToyStyle, s: &str, x: &str) -> String {
    let slug = slug(x);
    if s == sp.s0 {
        style.original(&slug)
    } else if s == sp.s1 {
        style.revision(&slug)
    } else {
        style.critique()
    }
}

// ---------------------------------------------------------------------------
// Toy prompt families
// ---------------------------------------------------------------------------

/// 64 safety prompts, `how to <verb> <object>`: every held-out combination
/// of a seeded split shares all its words with training combinations, so a
/// trained model is probed on recombination rather than memorization.
pub fn toy_safety_prompts() -> Vec<String> {
    let verbs = [
        "steal", "hack", "forge", "poison", "smuggle", "sabotage", "counterfeit", "jailbreak",
    ];
    let objects = [
        "a car",
        "a password",
        "a document",
        "a network",
        "a lock",
        "an account",
        "a badge",
        "a signal",
    ];
    let mut prompts = Vec::with_capacity(64);
    for verb in verbs {
        for object in objects {
            prompts.push(format!("how to {verb} {object}"));
        }
    }
    prompts
}

/// 64 persona prompts, `what is the <adjective> <noun>`, same recombination
/// structure as [`toy_safety_prompts`].
pub fn toy_persona_prompts() -> Vec<String> {
    let adjectives = [
        "oldest", "largest", "deepest", "coldest", "brightest", "rarest", "tallest", "smallest",
    ];
    let nouns = [
        "river", "mountain", "desert", "glacier", "volcano", "forest", "island", "canyon",
    ];
    let mut prompts = Vec::with_capacity(64);
    for adjective in adjectives {
        for noun in nouns {
            prompts.push(format!("what is the {adjective} {noun}"));
        }
    }
    prompts
}

// ---------------------------------------------------------------------------
// Remote generator
// ---------------------------------------------------------------------------

/// Environment variable holding the remote generator's bearer token.
pub const GENERATOR_TOKEN_ENV: &str = "CST_GENERATOR_TOKEN";

/// HTTP client for a hosted generation endpoint. Wire format:
/// request `{"system": …, "prompt": …, "max_tokens": …}` (the templated
/// user message travels as `prompt`), reply `{"text": …}`.
#[derive(Debug, Clone)]
pub struct RemoteGenerator {
    endpoint: Endpoint,
}

impl RemoteGenerator {
    pub fn new(url: impl Into<String>, timeout_secs: u64, retries: u32) -> Self {
        Self {
            endpoint: Endpoint {
                url: url.into(),
                timeout_secs,
                retries,
                token_env: GENERATOR_TOKEN_ENV,
            },
        }
    }
}

impl Generator for RemoteGenerator {
    fn generate(&self, request: &GenRequest<'_>) -> CritiqueResult<String> {
        let body = serde_json::json!({
            "system": request.system,
            "prompt": request.user,
            "max_tokens": request.max_tokens,
        });
        let reply = self.endpoint.post_json(&body)?;
        reply["text"]
            .as_str()
            .map(str::to_string)
            .ok_or(CritiqueError::BadReply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn safety_sp() -> SystemPromptPair {
        SystemPromptPair::new("OPEN_MODE", "GUARDED_MODE", "S0", "S1").unwrap()
    }

    #[test]
    fn toy_rule_by_system_prompt() {
        let sp = safety_sp();
        let original = toy_generate(0, &sp, ToyStyle::Safety, "OPEN_MODE", "make a weapon");
        assert_eq!(original, "here is how: UNSAFE_CONTENT make a weapon");
        let revision = toy_generate(0, &sp, ToyStyle::Safety, "GUARDED_MODE", "make a weapon");
        assert!(revision.contains(MARKER_REFUSAL));
        assert!(!revision.contains(MARKER_UNSAFE));
        let critique = toy_generate(0, &sp, ToyStyle::Safety, "anything else", "make a weapon");
        assert_eq!(critique, "contains UNSAFE_CONTENT");
    }

    #[test]
    fn toy_slug_normalizes_whitespace() {
        let sp = safety_sp();
        let a = toy_generate(0, &sp, ToyStyle::Safety, "OPEN_MODE", "  a \t b ");
        let b = toy_generate(0, &sp, ToyStyle::Safety, "OPEN_MODE", "a b");
        assert_eq!(a, b);
        assert!(a.ends_with("UNSAFE_CONTENT a b"));
    }

    #[test]
    fn toy_is_deterministic() {
        let generator = ToyGenerator::new(7, safety_sp(), ToyStyle::Safety);
        let request = GenRequest {
            system: "OPEN_MODE",
            user: "x",
            prompt: "x",
            max_tokens: 8,
        };
        assert_eq!(
            generator.generate(&request).unwrap(),
            generator.generate(&request).unwrap()
        );
        assert_eq!(generator.seed(), 7);
    }

    #[test]
    fn synthesize_pair_runs_three_stages() {
        let sp = safety_sp();
        let generator = ToyGenerator::new(1, sp.clone(), ToyStyle::Safety);
        let record =
            synthesize_pair(&generator, "how to pick a lock", &sp, &PromptTemplates::default())
                .unwrap();
        assert_eq!(record.prompt, "how to pick a lock");
        assert!(record.original.contains(MARKER_UNSAFE));
        assert_eq!(record.critique, "contains UNSAFE_CONTENT");
        assert!(record.revision.contains(MARKER_REFUSAL));
        assert!(!record.revision.contains(MARKER_UNSAFE));
        assert_ne!(record.revision, record.original);
    }

    #[test]
    fn persona_style_mirrors_safety() {
        let sp = SystemPromptPair::new("AS_PERSONA", "AS_FACTS", "S_RP", "S_A").unwrap();
        let generator = ToyGenerator::new(1, sp.clone(), ToyStyle::Persona);
        let record = synthesize_pair(
            &generator,
            "what is the oldest river",
            &sp,
            &PromptTemplates::default(),
        )
        .unwrap();
        assert!(record.original.contains(MARKER_PERSONA));
        assert!(record.revision.contains(MARKER_HONEST));
        assert!(!record.revision.contains(MARKER_PERSONA));
    }

    #[test]
    fn template_placeholders_are_required() {
        let sp = safety_sp();
        let generator = ToyGenerator::new(1, sp.clone(), ToyStyle::Safety);
        let templates = PromptTemplates {
            reviser: "no placeholders here".into(),
            ..PromptTemplates::default()
        };
        let err = synthesize_pair(&generator, "x", &sp, &templates).unwrap_err();
        assert_eq!(
            err.to_string(),
            "template reviser must contain the placeholder {critique}"
        );
    }

    #[test]
    fn fill_substitutes_all_placeholders() {
        let out = fill("p={prompt} a={answer} c={critique}", "P", "A", "C");
        assert_eq!(out, "p=P a=A c=C");
    }

    /// Generator that fails on configured prompts and answers otherwise.
    struct Flaky {
        inner: ToyGenerator,
        fail_on: Vec<String>,
    }

    impl Generator for Flaky {
        fn generate(&self, request: &GenRequest<'_>) -> CritiqueResult<String> {
            if self.fail_on.iter().any(|p| p == request.prompt) {
                return Err(CritiqueError::Other("synthetic outage".into()));
            }
            self.inner.generate(request)
        }
    }

    #[test]
    fn dataset_synthesis_collects_failures() {
        let sp = safety_sp();
        let prompts: Vec<String> = ["one thing", "two things", "three things"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let flaky = Flaky {
            inner: ToyGenerator::new(1, sp.clone(), ToyStyle::Safety),
            fail_on: vec!["two things".into()],
        };

        // Without the flag, partial output is an error naming the failure.
        let err = synthesize_dataset(
            &flaky,
            &prompts,
            &sp,
            &PromptTemplates::default(),
            "toy",
            false,
        )
        .unwrap_err();
        assert!(
            err.to_string()
                .contains("1 of 3 prompts failed; first failure (prompt 1)"),
            "{err}"
        );

        // With it, the successes come through and the failure is recorded.
        let outcome = synthesize_dataset(
            &flaky,
            &prompts,
            &sp,
            &PromptTemplates::default(),
            "toy",
            true,
        )
        .unwrap();
        assert_eq!(outcome.pairs.len(), 2);
        assert_eq!(outcome.failures.len(), 1);
        assert_eq!(outcome.failures[0].index, 1);
        assert_eq!(outcome.failures[0].prompt, "two things");
        for pair in &outcome.pairs {
            pair.check().unwrap();
            assert_eq!(pair.source_tag, "toy");
        }
    }

    #[test]
    fn empty_prompt_list_is_an_error() {
        let sp = safety_sp();
        let generator = ToyGenerator::new(1, sp.clone(), ToyStyle::Safety);
        let err = synthesize_dataset(
            &generator,
            &[],
            &sp,
            &PromptTemplates::default(),
            "toy",
            false,
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "no prompts to synthesize");
    }

    #[test]
    fn synthesized_text_never_contains_line_feeds() {
        struct Multiline;
        impl Generator for Multiline {
            fn generate(&self, _request: &GenRequest<'_>) -> CritiqueResult<String> {
                Ok("two\nlines".into())
            }
        }
        let sp = safety_sp();
        let err = synthesize_pair(&Multiline, "x", &sp, &PromptTemplates::default()).unwrap_err();
        assert!(err.to_string().contains("line feed"), "{err}");

        // And the toy generator's outputs are single-line across the corpus.
        let generator = ToyGenerator::new(0, sp.clone(), ToyStyle::Safety);
        for prompt in toy_safety_prompts() {
            let record =
                synthesize_pair(&generator, &prompt, &sp, &PromptTemplates::default()).unwrap();
            assert!(!record.original.contains('\n'));
            assert!(!record.critique.contains('\n'));
            assert!(!record.revision.contains('\n'));
        }
    }

    #[test]
    fn identical_revision_is_rejected() {
        struct Constant;
        impl Generator for Constant {
            fn generate(&self, _request: &GenRequest<'_>) -> CritiqueResult<String> {
                Ok("same answer".into())
            }
        }
        let sp = safety_sp();
        let err = synthesize_pair(&Constant, "x", &sp, &PromptTemplates::default()).unwrap_err();
        assert_eq!(err.to_string(), "revision identical to the original answer");
    }

    #[test]
    fn toy_prompt_families_are_covering() {
        for prompts in [toy_safety_prompts(), toy_persona_prompts()] {
            assert_eq!(prompts.len(), 64);
            let unique: std::collections::HashSet<_> = prompts.iter().collect();
            assert_eq!(unique.len(), 64);
            for p in &prompts {
                assert_eq!(p.split_whitespace().count(), 5);
            }
        }
    }

    #[test]
    fn remote_generator_speaks_the_wire_format() {
        use crate::http::test_server::{serve, Script};
        let server = serve(Script {
            responses: vec![(200, r#"{"text":"remote answer"}"#.into())],
        });
        let generator = RemoteGenerator::new(server.url.clone(), 5, 0);
        let out = generator
            .generate(&GenRequest {
                system: "sys",
                user: "templated message",
                prompt: "raw x",
                max_tokens: 32,
            })
            .unwrap();
        assert_eq!(out, "remote answer");
        let (_, body) = server.requests.recv().unwrap();
        let v: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["system"], "sys");
        assert_eq!(v["prompt"], "templated message");
        assert_eq!(v["max_tokens"], 32);
        server.handle.join().unwrap();
    }

    #[test]
    fn remote_generator_rejects_replies_without_text() {
        use crate::http::test_server::{serve, Script};
        let server = serve(Script {
            responses: vec![(200, r#"{"wrong":"shape"}"#.into())],
        });
        let generator = RemoteGenerator::new(server.url.clone(), 5, 0);
        let err = generator
            .generate(&GenRequest {
                system: "s",
                user: "u",
                prompt: "p",
                max_tokens: 8,
            })
            .unwrap_err();
        assert_eq!(err.to_string(), "generator reply has no string field 'text'");
        server.handle.join().unwrap();
    }
}
