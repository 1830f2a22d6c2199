//! Salient-subject extraction through an instruction-following LLM, the
//! caption-rewrite baseline, and alignment of subject phrases to encoder
//! token spans.

pub mod llm;
pub mod parse;

pub use llm::{
    send_with_retry, ChatRequest, HttpChatClient, LlmClient, RecordedLlmClient, ResponseCache,
    RetryPolicy, API_KEY_ENV,
};
pub use parse::{parse_list, parse_structured, ParsedSubjects};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::TokenSpan;
use crate::corpus::Verdict;
use crate::text::{sha256_hex, NormalizedText};
use crate::zoo::Tokenizer;
use crate::{Error, Result};

pub const CAPTION_PLACEHOLDER: &str = "<insert-caption-text>";
pub const SYSTEM_PROMPT: &str =
    "You are an AI assistant that follows instructions extremely well. Help as much as you can.";
pub const STRUCTURED_PROMPT: &str = "Use only the information provided in the prompt for answering the question. \
List the main topic word and additional topic words from the given image caption in the format: \
{\"main_topic_word\": <insert-topic-word-string>, \"additional_topic_words\": [<insert-topic-word1>, ...]}. \
Caption Text: <insert-caption-text>";
pub const LIST_PROMPT: &str =
    "User: List only the main objects from the sentence: <insert-caption-text>";
pub const REWRITE_PROMPT: &str =
    "Rewrite the following news image caption as a single-sentence instruction for an \
image generator. Begin with \"Generate an image\" and describe only what should be visible. \
Caption: <insert-caption-text>";
pub const REWRITE_PREFIX: &str = "Generate an image";
pub const REWRITE_FALLBACK_PREFIX: &str = "Generate an image of: ";

pub const VERDICT_NOT_IN_CAPTION: &str = "not_caption_substring";
pub const VERDICT_UNALIGNABLE: &str = "unalignable_phrase";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlmFamily {
    StructuredJson,
    ListStyle,
}

impl std::str::FromStr for LlmFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "structured-json" => Ok(LlmFamily::StructuredJson),
            "list-style" => Ok(LlmFamily::ListStyle),
            other => Err(Error::InvalidArgument(format!(
                "unknown template family {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for LlmFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LlmFamily::StructuredJson => "structured-json",
            LlmFamily::ListStyle => "list-style",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_prompt: String,
    pub user_prompt_format: String,
    pub llm_family: LlmFamily,
}

impl PromptTemplate {
    pub fn new(
        system_prompt: &str,
        user_prompt_format: &str,
        llm_family: LlmFamily,
    ) -> Result<Self> {
        let n = user_prompt_format.matches(CAPTION_PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::InvalidArgument(format!(
                "user prompt must contain exactly one {CAPTION_PLACEHOLDER}, found {n}"
            )));
        }
        Ok(PromptTemplate {
            system_prompt: system_prompt.to_string(),
            user_prompt_format: user_prompt_format.to_string(),
            llm_family,
        })
    }

    pub fn for_family(family: LlmFamily) -> Self {
        let user = match family {
            LlmFamily::StructuredJson => STRUCTURED_PROMPT,
            LlmFamily::ListStyle => LIST_PROMPT,
        };
        PromptTemplate::new(SYSTEM_PROMPT, user, family)
            .expect("built-in template has one placeholder")
    }

    pub fn render(&self, caption: &str) -> String {
        self.user_prompt_format
            .replacen(CAPTION_PLACEHOLDER, caption, 1)
    }

    pub fn request(&self, caption: &str) -> ChatRequest {
        ChatRequest {
            system: self.system_prompt.clone(),
            user: self.render(caption),
            temperature: 0.0,
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(format!(
            "{}\u{0}{}\u{0}{}",
            self.llm_family, self.system_prompt, self.user_prompt_format
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscardedPhrase {
    pub phrase: String,
    pub verdict: Verdict,
}

/// One line of the subject sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectAnnotation {
    pub record_id: String,
    pub main_subject: Option<String>,
    pub additional_subjects: Vec<String>,
    pub raw_response: String,
    pub llm_id: String,
    pub fallback_used: bool,
    #[serde(default = "default_family")]
    pub llm_family: LlmFamily,
    #[serde(default)]
    pub discarded: Vec<DiscardedPhrase>,
}

fn default_family() -> LlmFamily {
    LlmFamily::StructuredJson
}

impl SubjectAnnotation {
    pub fn fallback(record_id: &str, llm_id: &str, family: LlmFamily, raw: &str) -> Self {
        SubjectAnnotation {
            record_id: record_id.to_string(),
            main_subject: None,
            additional_subjects: Vec::new(),
            raw_response: raw.to_string(),
            llm_id: llm_id.to_string(),
            fallback_used: true,
            llm_family: family,
            discarded: Vec::new(),
        }
    }

    /// Main subject first, then additional ones; all weighted alike downstream.
    pub fn phrases(&self) -> Vec<String> {
        self.main_subject
            .iter()
            .chain(&self.additional_subjects)
            .cloned()
            .collect()
    }
}

/// Builds the annotation from a raw response: parse by family, keep only
/// phrases found in the caption (case/whitespace-insensitive), dedupe.
/// A pure function of its inputs, so stored raw responses replay exactly.
pub fn annotate(
    record_id: &str,
    caption: &str,
    raw: &str,
    llm_id: &str,
    family: LlmFamily,
) -> SubjectAnnotation {
    let parsed = match family {
        LlmFamily::StructuredJson => parse_structured(raw),
        LlmFamily::ListStyle => {
            let mut items = parse_list(raw).into_iter();
            ParsedSubjects {
                main: items.next(),
                additional: items.collect(),
            }
        }
    };
    let hay = NormalizedText::new(caption);
    let mut seen: Vec<String> = Vec::new();
    let mut discarded = Vec::new();
    let mut keep = |p: String, seen: &mut Vec<String>| -> Option<String> {
        let norm = NormalizedText::new(&p);
        if norm.is_empty() || !hay.contains(&norm) {
            discarded.push(DiscardedPhrase {
                verdict: Verdict::with_detail(
                    VERDICT_NOT_IN_CAPTION,
                    false,
                    "phrase is not a caption substring",
                ),
                phrase: p,
            });
            return None;
        }
        let key = norm.as_string();
        if seen.contains(&key) {
            return None;
        }
        seen.push(key);
        Some(p)
    };
    let mut main = parsed.main.and_then(|p| keep(p, &mut seen));
    let mut additional: Vec<String> = parsed
        .additional
        .into_iter()
        .filter_map(|p| keep(p, &mut seen))
        .collect();
    if main.is_none() && !additional.is_empty() && family == LlmFamily::ListStyle {
        main = Some(additional.remove(0));
    }
    let fallback_used = main.is_none() && additional.is_empty();
    SubjectAnnotation {
        record_id: record_id.to_string(),
        main_subject: main,
        additional_subjects: additional,
        raw_response: raw.to_string(),
        llm_id: llm_id.to_string(),
        fallback_used,
        llm_family: family,
        discarded,
    }
}

/// Client plus retry policy and optional response cache.
pub struct SubjectExtractor<'a> {
    pub client: &'a dyn LlmClient,
    pub retry: RetryPolicy,
    pub cache: Option<&'a ResponseCache>,
}

impl<'a> SubjectExtractor<'a> {
    pub fn new(client: &'a dyn LlmClient) -> Self {
        SubjectExtractor {
            client,
            retry: RetryPolicy::default(),
            cache: None,
        }
    }

    fn ask(&self, template_hash: &str, caption: &str, request: &ChatRequest) -> Result<String> {
        let key = ResponseCache::key(self.client.id(), template_hash, caption);
        if let Some(hit) = self.cache.and_then(|c| c.get(&key)) {
            return Ok(hit);
        }
        let response = send_with_retry(self.client, request, &self.retry)?;
        if let Some(cache) = self.cache {
            cache.put(&key, self.client.id(), &response)?;
        }
        Ok(response)
    }

    pub fn extract(
        &self,
        record_id: &str,
        caption: &str,
        template: &PromptTemplate,
    ) -> Result<SubjectAnnotation> {
        if caption.trim().is_empty() {
            return Err(Error::EmptyCaption);
        }
        let raw = self.ask(&template.hash(), caption, &template.request(caption))?;
        Ok(annotate(
            record_id,
            caption,
            &raw,
            self.client.id(),
            template.llm_family,
        ))
    }

    pub fn rewrite(&self, caption: &str) -> Result<RewriteResult> {
        if caption.trim().is_empty() {
            return Err(Error::EmptyCaption);
        }
        let template = rewrite_template();
        let raw = self.ask(&template.hash(), caption, &template.request(caption))?;
        Ok(RewriteResult {
            prompt: parse_rewrite(caption, &raw),
            raw_response: raw,
        })
    }

    /// Extracts for many records with at most `parallelism` requests in
    /// flight; results keep input order.
    pub fn extract_batch(
        &self,
        items: &[(String, String)],
        template: &PromptTemplate,
        parallelism: usize,
    ) -> Vec<Result<SubjectAnnotation>> {
        let workers = parallelism.clamp(1, items.len().max(1));
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<SubjectAnnotation>>>> =
            items.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    let (id, caption) = &items[i];
                    *slots[i].lock().unwrap_or_else(|e| e.into_inner()) =
                        Some(self.extract(id, caption, template));
                });
            }
        });
        slots
            .into_iter()
            .map(|m| {
                m.into_inner()
                    .unwrap_or_else(|e| e.into_inner())
                    .expect("every slot filled")
            })
            .collect()
    }
}

pub fn extract_subjects(
    caption: &str,
    template: &PromptTemplate,
    client: &dyn LlmClient,
) -> Result<SubjectAnnotation> {
    SubjectExtractor::new(client).extract("", caption, template)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteResult {
    pub prompt: String,
    pub raw_response: String,
}

pub fn rewrite_template() -> PromptTemplate {
    PromptTemplate::new(SYSTEM_PROMPT, REWRITE_PROMPT, LlmFamily::ListStyle)
        .expect("one placeholder")
}

/// The first line containing "Generate an image", cut to start there;
/// without one, the first non-empty line gets a prefix. Empty responses fall
/// back to the prefixed caption.
pub fn parse_rewrite(caption: &str, raw: &str) -> String {
    let lines: Vec<&str> = raw
        .lines()
        .map(|l| {
            l.trim()
                .trim_matches(|c| c == '"' || c == '“' || c == '”')
                .trim()
        })
        .filter(|l| !l.is_empty())
        .collect();
    let prefix = REWRITE_PREFIX.to_lowercase();
    let line = lines
        .iter()
        .find(|l| l.to_lowercase().contains(&prefix))
        .or(lines.first())
        .copied();
    let collapse = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
    match line {
        None => format!("{REWRITE_FALLBACK_PREFIX}{}", collapse(caption)),
        Some(l) => {
            let lower = l.to_lowercase();
            match lower.find(&prefix) {
                // the prefix is ASCII, so byte offsets agree between `l` and `lower`
                Some(pos) if l.is_char_boundary(pos) => {
                    let rest = collapse(&l[pos + REWRITE_PREFIX.len()..]);
                    if rest.is_empty() || rest.starts_with([',', '.', ':', ';']) {
                        format!("{REWRITE_PREFIX}{rest}")
                    } else {
                        format!("{REWRITE_PREFIX} {rest}")
                    }
                }
                _ => format!("{REWRITE_FALLBACK_PREFIX}{}", collapse(l)),
            }
        }
    }
}

pub fn rewrite_caption(caption: &str, client: &dyn LlmClient) -> Result<String> {
    Ok(SubjectExtractor::new(client).rewrite(caption)?.prompt)
}

/// Token spans (inclusive, offset by the leading begin marker) for every
/// occurrence of every phrase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Alignment {
    pub spans: Vec<(String, TokenSpan)>,
    pub dropped: Vec<DiscardedPhrase>,
}

impl Alignment {
    pub fn token_spans(&self) -> Vec<TokenSpan> {
        self.spans.iter().map(|(_, s)| *s).collect()
    }
}

pub fn align_phrases_to_tokens(
    caption: &str,
    phrases: &[String],
    tokenizer: &dyn Tokenizer,
) -> Alignment {
    let tokens = tokenizer.tokenize(caption);
    let hay = NormalizedText::new(caption);
    let mut out = Alignment::default();
    for phrase in phrases {
        let needle = NormalizedText::new(phrase);
        let mut found = false;
        for (start, end) in hay.find_all(&needle) {
            let covered: Vec<usize> = tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| t.start < end && t.end > start)
                .map(|(i, _)| i)
                .collect();
            if let (Some(first), Some(last)) = (covered.first(), covered.last()) {
                out.spans.push((phrase.clone(), (first + 1, last + 1)));
                found = true;
            }
        }
        if !found {
            out.dropped.push(DiscardedPhrase {
                phrase: phrase.clone(),
                verdict: Verdict::with_detail(
                    VERDICT_UNALIGNABLE,
                    false,
                    "no token span covers the phrase",
                ),
            });
        }
    }
    out
}

/// Caption text covered by an (offset) token span.
pub fn detokenize_span(caption: &str, tokenizer: &dyn Tokenizer, span: TokenSpan) -> String {
    let tokens = tokenizer.tokenize(caption);
    match (
        tokens.get(span.0.wrapping_sub(1)),
        tokens.get(span.1.wrapping_sub(1)),
    ) {
        (Some(a), Some(b)) => crate::text::char_slice(caption, a.start, b.end),
        _ => String::new(),
    }
}

pub fn write_sidecar(path: &Path, annotations: &[SubjectAnnotation]) -> Result<()> {
    let mut out = Vec::new();
    for a in annotations {
        writeln!(out, "{}", serde_json::to_string(a)?)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<BTreeMap<String, SubjectAnnotation>> {
    let mut map = BTreeMap::new();
    for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let a: SubjectAnnotation = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        map.insert(a.record_id.clone(), a);
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRecord {
    pub record_id: String,
    pub rewrite: String,
    pub llm_id: String,
    pub raw_response: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::WordTokenizer;

    #[test]
    fn template_placeholder_count() {
        assert!(PromptTemplate::new("s", "no placeholder", LlmFamily::ListStyle).is_err());
        assert!(PromptTemplate::new(
            "s",
            "<insert-caption-text> <insert-caption-text>",
            LlmFamily::ListStyle
        )
        .is_err());
        let t = PromptTemplate::for_family(LlmFamily::StructuredJson);
        assert!(t.render("a tiger").ends_with("Caption Text: a tiger"));
        assert_ne!(
            t.hash(),
            PromptTemplate::for_family(LlmFamily::ListStyle).hash()
        );
    }

    #[test]
    fn annotate_example_and_fallback() {
        let caption = "A bronze tiger guards a stack of books at the library";
        let raw = r#"{"main_topic_word": "tiger", "additional_topic_words": ["books"]}"#;
        let a = annotate("r1", caption, raw, "m", LlmFamily::StructuredJson);
        assert_eq!(a.main_subject.as_deref(), Some("tiger"));
        assert_eq!(a.additional_subjects, vec!["books"]);
        assert!(!a.fallback_used);
        let g = annotate(
            "r1",
            caption,
            "\u{1}garbage",
            "m",
            LlmFamily::StructuredJson,
        );
        assert!(g.fallback_used && g.phrases().is_empty());
        let h = annotate(
            "r1",
            caption,
            r#"{"main_topic_word": "lion"}"#,
            "m",
            LlmFamily::StructuredJson,
        );
        assert!(h.fallback_used);
        assert_eq!(h.discarded[0].verdict.rule, VERDICT_NOT_IN_CAPTION);
    }

    #[test]
    fn rewrite_parsing() {
        assert_eq!(
            parse_rewrite("Crowds at dawn.", ""),
            "Generate an image of: Crowds at dawn."
        );
        assert_eq!(
            parse_rewrite("x", "Generate an image of a crowd at dawn."),
            "Generate an image of a crowd at dawn."
        );
        assert_eq!(
            parse_rewrite("x", "Prompt: generate an image of a dog"),
            "Generate an image of a dog"
        );
        assert!(parse_rewrite("x", "A dog on a beach").starts_with("Generate an image"));
    }

    #[test]
    fn alignment_spans() {
        let tok = WordTokenizer::default();
        let caption = "a bronze tiger near a tiger";
        let al = align_phrases_to_tokens(caption, &["bronze tiger".into(), "tiger".into()], &tok);
        assert_eq!(al.spans[0].1, (2, 3));
        assert_eq!(al.token_spans()[1..], [(3, 3), (6, 6)]);
        assert_eq!(detokenize_span(caption, &tok, (2, 3)), "bronze tiger");
        let missing = align_phrases_to_tokens(caption, &["lion".into()], &tok);
        assert_eq!(missing.dropped[0].verdict.rule, VERDICT_UNALIGNABLE);
    }
}
