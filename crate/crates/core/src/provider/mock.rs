//! Deterministic offline providers for tests and desk-scale dry runs.
//!
//! Every mock counts its invocations so cache contracts ("warm rerun makes
//! zero calls") are directly observable.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::provider::{ChatProvider, ChatRequest, EmbeddingProvider};

/// Chat provider backed by an arbitrary closure over the request.
pub struct FnChatProvider<F> {
    provider_id: String,
    model_id: String,
    f: F,
    calls: AtomicU64,
}

impl<F> FnChatProvider<F>
where
    F: Fn(&ChatRequest) -> Result<String> + Send + Sync,
{
    pub fn new(provider_id: impl Into<String>, model_id: impl Into<String>, f: F) -> Self {
        FnChatProvider {
            provider_id: provider_id.into(),
            model_id: model_id.into(),
            f,
            calls: AtomicU64::new(0),
        }
    }
}

impl<F> ChatProvider for FnChatProvider<F>
where
    F: Fn(&ChatRequest) -> Result<String> + Send + Sync,
{
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        (self.f)(request)
    }

    fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

const SYNONYMS: &[(&str, &str)] = &[
    ("what", "which"),
    ("is", "constitutes"),
    ("are", "constitute"),
    ("best", "finest"),
    ("first", "initial"),
    ("largest", "biggest"),
    ("smallest", "tiniest"),
    ("number", "count"),
    ("many", "numerous"),
    ("method", "approach"),
    ("main", "primary"),
    ("name", "term"),
    ("correct", "right"),
    ("following", "listed"),
    ("between", "among"),
];

/// Word-level synonym substitution preserving punctuation and casing of
/// unswapped words. Deterministic, so the same question always produces
/// the same rephrasing.
pub fn synonym_swap(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if word.is_empty() {
            return;
        }
        let lower = word.to_lowercase();
        match SYNONYMS.iter().find(|(k, _)| *k == lower) {
            Some((_, replacement)) => {
                if word.chars().next().is_some_and(|c| c.is_uppercase()) {
                    let mut chars = replacement.chars();
                    if let Some(first) = chars.next() {
                        out.extend(first.to_uppercase());
                        out.push_str(chars.as_str());
                    }
                } else {
                    out.push_str(replacement);
                }
            }
            None => out.push_str(word),
        }
        word.clear();
    };
    for c in text.chars() {
        if c.is_alphanumeric() || c == '\'' {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(c);
        }
    }
    flush(&mut word, &mut out);
    if out == text {
        format!("Put differently: {}", out)
    } else {
        out
    }
}

/// Extracts the text following the rephrase template's final marker line.
fn rephrase_target(request: &ChatRequest) -> Option<&str> {
    let user = request.messages.iter().rev().find(|m| m.role == "user")?;
    let idx = user.content.rfind("TEXT to rephrase: ")?;
    Some(&user.content[idx + "TEXT to rephrase: ".len()..])
}

/// Mock rephraser: applies [`synonym_swap`] to the question in the request.
pub fn synonym_swap_rephraser() -> impl ChatProvider {
    FnChatProvider::new("mock-rephrase", "synonym-swap", |req: &ChatRequest| {
        let target = rephrase_target(req).ok_or_else(|| Error::Provider {
            provider: "mock-rephrase".into(),
            message: "request does not carry a rephrase target".into(),
        })?;
        Ok(synonym_swap(target))
    })
}

/// Mock judge that declares every pair semantically equivalent.
pub fn always_equivalent_judge() -> impl ChatProvider {
    FnChatProvider::new("mock-judge", "always-equivalent", |_req: &ChatRequest| {
        Ok(r#"{"judgment": "EQUIVALENT", "reasoning": "Both versions ask for the same fact."}"#.to_string())
    })
}

/// Deterministic bag-of-words embedder: each lowercased token hashes to a
/// coordinate. Texts sharing most tokens get high cosine similarity.
pub struct HashEmbedder {
    dim: usize,
    calls: AtomicU64,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim, calls: AtomicU64::new(0) }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider for HashEmbedder {
    fn provider_id(&self) -> &str {
        "mock-embed"
    }

    fn model_id(&self) -> &str {
        "hash-bow"
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Err(Error::InvalidArgument("cannot embed empty text".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut v = vec![0.0; self.dim];
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = fnv1a(token.to_lowercase().as_bytes());
            v[(h % self.dim as u64) as usize] += 1.0;
        }
        Ok(v)
    }

    fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Arm {
    Original,
    Perturbed,
}

/// Scripted respondent: answers the fixed query prompt, correct with
/// probability `p_original` on original questions and `p_perturbed` on
/// their synonym-swapped counterparts. Correctness per (sample, arm) is a
/// pure function of the seed, so reruns reproduce the same outcome vector.
pub struct ScriptedRespondent {
    lookup: HashMap<String, (String, usize, usize, Arm)>,
    p_original: f64,
    p_perturbed: f64,
    seed: u64,
    calls: AtomicU64,
}

impl ScriptedRespondent {
    pub fn new(dataset: &Dataset, p_original: f64, p_perturbed: f64, seed: u64) -> Self {
        let mut lookup = HashMap::new();
        for s in &dataset.samples {
            lookup.insert(
                s.question.clone(),
                (s.id.clone(), s.answer_key, s.options.len(), Arm::Original),
            );
            lookup.insert(
                synonym_swap(&s.question),
                (s.id.clone(), s.answer_key, s.options.len(), Arm::Perturbed),
            );
        }
        ScriptedRespondent { lookup, p_original, p_perturbed, seed, calls: AtomicU64::new(0) }
    }

    fn uniform(&self, id: &str, arm: Arm) -> f64 {
        let tag = match arm {
            Arm::Original => "orig",
            Arm::Perturbed => "pert",
        };
        let mut h = fnv1a(format!("{}|{}|{}", self.seed, id, tag).as_bytes());
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
        (h >> 11) as f64 / (1u64 << 53) as f64
    }
}

impl ChatProvider for ScriptedRespondent {
    fn provider_id(&self) -> &str {
        "mock-respondent"
    }

    fn model_id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let user = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .ok_or_else(|| Error::Provider {
                provider: "mock-respondent".into(),
                message: "no user message".into(),
            })?;
        let start = user.content.find("Question: ").map(|i| i + "Question: ".len());
        let question = start
            .map(|i| &user.content[i..])
            .and_then(|rest| rest.find("\nA.").map(|end| rest[..end].trim()))
            .ok_or_else(|| Error::Provider {
                provider: "mock-respondent".into(),
                message: "prompt does not match the fixed query template".into(),
            })?;
        let (id, key, n_options, arm) =
            self.lookup.get(question).cloned().ok_or_else(|| Error::Provider {
                provider: "mock-respondent".into(),
                message: format!("unknown question: {}", question),
            })?;
        let p = match arm {
            Arm::Original => self.p_original,
            Arm::Perturbed => self.p_perturbed,
        };
        let answer = if self.uniform(&id, arm) < p {
            key
        } else {
            (key + 1) % n_options
        };
        Ok(crate::dataset::option_letter(answer).to_string())
    }

    fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::ChatMessage;

    #[test]
    fn synonym_swap_changes_text_deterministically() {
        let q = "What is the best method for counting stars?";
        let a = synonym_swap(q);
        let b = synonym_swap(q);
        assert_eq!(a, b);
        assert_ne!(a, q);
        assert!(a.contains("finest"));
    }

    #[test]
    fn synonym_swap_falls_back_when_nothing_matches() {
        let q = "Zebras gallop quickly.";
        assert!(synonym_swap(q).starts_with("Put differently: "));
    }

    #[test]
    fn hash_embedder_is_high_similarity_for_near_identical_text() {
        let e = HashEmbedder::new(256);
        let a = e.embed("the quick brown fox jumps over the lazy dog near town").unwrap();
        let b = e.embed("the rapid brown fox jumps over the lazy dog near town").unwrap();
        let cos = crate::quality::cosine_similarity(&a, &b).unwrap();
        assert!(cos > 0.7, "cosine {}", cos);
    }

    #[test]
    fn rephraser_extracts_target_text() {
        let p = synonym_swap_rephraser();
        let req = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user("...\nTEXT to rephrase: What is gravity?")],
            temperature: Some(1.0),
            max_tokens: None,
        };
        let out = p.complete(&req).unwrap();
        assert!(out.contains("gravity"));
        assert_eq!(p.call_count(), 1);
    }
}
