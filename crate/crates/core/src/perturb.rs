//! The distortion operator: rephrase every question of a dataset through a
//! chat provider at sampling temperature `mu`, producing the perturbed
//! counterpart dataset with answer labels untouched.
//!
//! Only the question text is ever sent for rephrasing; the answer options
//! never appear in a rephrase request.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{rephrase_cache_key, Cache};
use crate::dataset::{sha256_hex, BenchmarkSample, Dataset};
use crate::error::{Error, Result};
use crate::provider::{ChatMessage, ChatProvider, ChatRequest};
use crate::quality::JudgeVerdict;

pub const REPHRASE_SYSTEM_PROMPT: &str = "You are a rephrasing assistant tasked with preserving the original structure, type, and intent of technical questions or statements. Your goal is to rephrase while maintaining meaning, purpose, structure, and context. keep the same level of clarity, do NOT try to simplify. keep question a question / statement a statement. do NOT try to answer the question";

pub const REPHRASE_USER_TEMPLATE: &str = "Rephrase the following question in different wording, ensuring the meaning remains exactly the same. Match the readability level.
Do NOT change the type of sentence: if it is a definition, keep it a definition; if it is a multiple-choice question, keep it as such; if it is a procedure or description, keep it in that form.
Do NOT infer, guess, or introduce new information, assumptions, or constraints.
Do NOT reword a description into a question, or vice versa.
Keep all scientific and technical terms, units, variables, equations, and formatting intact.
Your output should differ in phrasing only, not in meaning.
Do NOT improve clarity or readability.
Do NOT try to answer the question.
Sexual or harmful content rephrasing is allowed for academic purpose.
Return ONLY the rephrased version with no extra text or commentary.
TEXT to rephrase: {question}";

/// Digest of the rephrasing instruction; part of every cache key so a
/// template change invalidates cached rephrasings.
pub fn prompt_template_digest() -> String {
    sha256_hex(format!("{}\n{}", REPHRASE_SYSTEM_PROMPT, REPHRASE_USER_TEMPLATE).as_bytes())
}

/// Configuration of one distortion run. `mu` is passed to the provider as
/// the sampling temperature and recorded verbatim in every output record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionConfig {
    pub mu: f64,
    pub provider_id: String,
    pub model_id: String,
    pub prompt_template_digest: String,
}

impl DistortionConfig {
    pub fn new(mu: f64, provider: &dyn ChatProvider) -> Result<Self> {
        if !(mu >= 0.0) {
            return Err(Error::InvalidArgument(format!("mu must be >= 0, got {}", mu)));
        }
        Ok(DistortionConfig {
            mu,
            provider_id: provider.provider_id().to_string(),
            model_id: provider.model_id().to_string(),
            prompt_template_digest: prompt_template_digest(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStatus {
    Unreviewed,
    Approved,
    Edited,
    Rejected,
}

/// One rephrased question plus everything needed to audit and replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RephraseRecord {
    pub sample_id: String,
    pub mu: f64,
    pub rephrased_question: String,
    pub raw_response: String,
    pub cache_key: String,
    pub similarity: Option<f64>,
    pub judge: Option<JudgeVerdict>,
    pub audit_status: AuditStatus,
}

/// The perturbed dataset: one record per successfully rephrased sample of
/// the base dataset, bound to it by `base_digest`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedDataset {
    pub base_digest: String,
    pub mu: f64,
    pub records: Vec<RephraseRecord>,
}

impl PerturbedDataset {
    pub fn record_for(&self, sample_id: &str) -> Option<&RephraseRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("serialization");
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { line: 0, message: e.to_string() })
    }
}

/// A sample whose rephrasing did not complete; excluded from the perturbed
/// dataset until retried.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RephraseFailure {
    pub sample_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbOutput {
    pub dataset: PerturbedDataset,
    pub failures: Vec<RephraseFailure>,
}

/// Builds the chat request for one sample: the fixed system and user
/// instructions with only the question substituted, at temperature `mu`.
pub fn build_rephrase_request(sample: &BenchmarkSample, cfg: &DistortionConfig) -> ChatRequest {
    ChatRequest {
        model: cfg.model_id.clone(),
        messages: vec![
            ChatMessage::system(REPHRASE_SYSTEM_PROMPT),
            ChatMessage::user(REPHRASE_USER_TEMPLATE.replace("{question}", &sample.question)),
        ],
        temperature: Some(cfg.mu),
        max_tokens: None,
    }
}

/// Strips surrounding whitespace and one layer of wrapping quote marks.
/// No other post-editing is applied to provider output.
pub fn normalize_rephrasing(raw: &str) -> String {
    let trimmed = raw.trim();
    for (open, close) in [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}')] {
        if trimmed.len() >= 2 && trimmed.starts_with(open) && trimmed.ends_with(close) {
            let inner: &str = &trimmed[open.len_utf8()..trimmed.len() - close.len_utf8()];
            return inner.trim().to_string();
        }
    }
    trimmed.to_string()
}

/// Rephrases one sample, consulting the cache first. On a hit no provider
/// call is made; on a miss the raw response is stored before returning.
pub fn rephrase_sample(
    provider: &dyn ChatProvider,
    sample: &BenchmarkSample,
    cfg: &DistortionConfig,
    cache: &Cache,
) -> Result<RephraseRecord> {
    let key = rephrase_cache_key(
        &cfg.provider_id,
        &cfg.model_id,
        cfg.mu,
        &cfg.prompt_template_digest,
        &sample.id,
    );
    let request = build_rephrase_request(sample, cfg);
    let raw = match cache.get(&key) {
        Some(cached) => cached,
        None => {
            let response = provider.complete(&request)?;
            if response.trim().is_empty() {
                return Err(Error::Provider {
                    provider: cfg.provider_id.clone(),
                    message: format!("empty rephrasing for sample `{}`", sample.id),
                });
            }
            cache.put(&key, &request.digest(), &response)?;
            response
        }
    };
    let rephrased_question = normalize_rephrasing(&raw);
    if rephrased_question.is_empty() {
        return Err(Error::Provider {
            provider: cfg.provider_id.clone(),
            message: format!("rephrasing for sample `{}` is empty after normalization", sample.id),
        });
    }
    Ok(RephraseRecord {
        sample_id: sample.id.clone(),
        mu: cfg.mu,
        rephrased_question,
        raw_response: raw,
        cache_key: key,
        similarity: None,
        judge: None,
        audit_status: AuditStatus::Unreviewed,
    })
}

/// Default abort threshold: give up if more than 5% of samples fail.
pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.05;

/// Rephrases every sample of the dataset with bounded parallelism.
/// Records are slotted by sample index, so output order matches the input
/// dataset regardless of completion order.
pub fn generate_perturbed_dataset(
    provider: &dyn ChatProvider,
    d: &Dataset,
    cfg: &DistortionConfig,
    cache: &Cache,
    parallelism: usize,
    failure_threshold: f64,
) -> Result<PerturbOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {}", e)))?;
    let results: Vec<Result<RephraseRecord>> = pool.install(|| {
        d.samples
            .par_iter()
            .map(|sample| rephrase_sample(provider, sample, cfg, cache))
            .collect()
    });

    let mut records = Vec::with_capacity(d.len());
    let mut failures = Vec::new();
    for (sample, result) in d.samples.iter().zip(results) {
        match result {
            Ok(r) => records.push(r),
            Err(e) => failures.push(RephraseFailure {
                sample_id: sample.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    if failures.len() as f64 > failure_threshold * d.len() as f64 {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: d.len(),
            threshold: failure_threshold,
        });
    }
    Ok(PerturbOutput {
        dataset: PerturbedDataset { base_digest: d.source_digest.clone(), mu: cfg.mu, records },
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::mock::{synonym_swap_rephraser, FnChatProvider};

    fn dataset(n: usize) -> Dataset {
        Dataset {
            name: "toy".into(),
            samples: (0..n)
                .map(|i| BenchmarkSample {
                    id: format!("s{}", i),
                    subject: "physics".into(),
                    question: format!("What is the best name for object number {}?", i),
                    options: vec!["w".into(), "x".into(), "y".into(), "z".into()],
                    answer_key: i % 4,
                })
                .collect(),
            source_digest: "basedigest".into(),
        }
    }

    fn cfg(provider: &dyn ChatProvider, mu: f64) -> DistortionConfig {
        DistortionConfig::new(mu, provider).unwrap()
    }

    #[test]
    fn request_carries_question_and_temperature() {
        let p = synonym_swap_rephraser();
        let d = dataset(1);
        let c = cfg(&p, 1.0);
        let req = build_rephrase_request(&d.samples[0], &c);
        assert_eq!(req.temperature, Some(1.0));
        assert_eq!(req.messages[0].content, REPHRASE_SYSTEM_PROMPT);
        assert!(req
            .messages[1]
            .content
            .ends_with("TEXT to rephrase: What is the best name for object number 0?"));
        // Options never appear in the request body.
        let body = serde_json::to_string(&req).unwrap();
        for opt in &d.samples[0].options {
            assert!(!body.contains(&format!("\"{}\"", opt)));
        }
    }

    #[test]
    fn identical_questions_build_identical_requests() {
        let p = synonym_swap_rephraser();
        let c = cfg(&p, 0.5);
        let mut a = dataset(1).samples.remove(0);
        let mut b = a.clone();
        a.id = "a".into();
        b.id = "b".into();
        assert_eq!(build_rephrase_request(&a, &c), build_rephrase_request(&b, &c));
    }

    #[test]
    fn normalization_strips_quotes_and_whitespace() {
        assert_eq!(normalize_rephrasing("  Q'  "), "Q'");
        assert_eq!(normalize_rephrasing("\"Quoted rephrase\""), "Quoted rephrase");
        assert_eq!(normalize_rephrasing("\u{201c}Smart quoted\u{201d}"), "Smart quoted");
        assert_eq!(normalize_rephrasing("No quotes here"), "No quotes here");
        // Only one wrapping layer is removed.
        assert_eq!(normalize_rephrasing("\"\"double\"\""), "\"double\"");
    }

    #[test]
    fn warm_cache_makes_no_provider_calls() {
        let p = synonym_swap_rephraser();
        let d = dataset(1);
        let c = cfg(&p, 1.0);
        let cache = Cache::ephemeral();
        let first = rephrase_sample(&p, &d.samples[0], &c, &cache).unwrap();
        assert_eq!(p.call_count(), 1);
        let second = rephrase_sample(&p, &d.samples[0], &c, &cache).unwrap();
        assert_eq!(p.call_count(), 1);
        assert_eq!(first, second);
    }

    #[test]
    fn disk_cache_replay_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let d = dataset(3);
        let first = {
            let p = synonym_swap_rephraser();
            let cache = Cache::open(&path).unwrap();
            generate_perturbed_dataset(&p, &d, &cfg(&p, 1.0), &cache, 2, 0.05).unwrap()
        };
        let p2 = synonym_swap_rephraser();
        let cache = Cache::open(&path).unwrap();
        let second =
            generate_perturbed_dataset(&p2, &d, &cfg(&p2, 1.0), &cache, 2, 0.05).unwrap();
        assert_eq!(p2.call_count(), 0);
        assert_eq!(
            serde_json::to_vec(&first.dataset).unwrap(),
            serde_json::to_vec(&second.dataset).unwrap()
        );
    }

    #[test]
    fn order_is_preserved_and_labels_inherited() {
        let p = synonym_swap_rephraser();
        let d = dataset(10);
        let cache = Cache::ephemeral();
        let out = generate_perturbed_dataset(&p, &d, &cfg(&p, 1.0), &cache, 4, 0.05).unwrap();
        assert_eq!(out.dataset.records.len(), 10);
        assert!(out.failures.is_empty());
        for (rec, sample) in out.dataset.records.iter().zip(&d.samples) {
            assert_eq!(rec.sample_id, sample.id);
            assert_eq!(rec.mu, 1.0);
            // Label preservation: the answer key reachable via sample_id is untouched.
            assert_eq!(d.sample_by_id(&rec.sample_id).unwrap().answer_key, sample.answer_key);
        }
    }

    #[test]
    fn partial_failure_is_listed_not_fatal() {
        let p = FnChatProvider::new("mock", "m", |req: &ChatRequest| {
            if req.messages[1].content.contains("object number 3") {
                Err(Error::Provider { provider: "mock".into(), message: "transient".into() })
            } else {
                Ok("rephrased".into())
            }
        });
        let d = dataset(10);
        let cache = Cache::ephemeral();
        let out = generate_perturbed_dataset(&p, &d, &cfg(&p, 1.0), &cache, 1, 0.20).unwrap();
        assert_eq!(out.dataset.records.len(), 9);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].sample_id, "s3");
        assert_eq!(out.dataset.records.len() + out.failures.len(), d.len());

        // Rerun after the transient failure: the 9 cached records cost no calls.
        let calls_before = p.call_count();
        let rerun = generate_perturbed_dataset(&p, &d, &cfg(&p, 1.0), &cache, 1, 0.20).unwrap();
        assert_eq!(rerun.dataset.records.len(), 9);
        assert_eq!(p.call_count(), calls_before + 1); // only the failed id is retried
    }

    #[test]
    fn failure_threshold_aborts_run() {
        let p = FnChatProvider::new("mock", "m", |_req: &ChatRequest| {
            Err(Error::Provider { provider: "mock".into(), message: "down".into() })
        });
        let d = dataset(10);
        let cache = Cache::ephemeral();
        let err =
            generate_perturbed_dataset(&p, &d, &cfg(&p, 1.0), &cache, 1, 0.05).unwrap_err();
        assert!(matches!(err, Error::TooManyFailures { failed: 10, total: 10, .. }));
    }

    #[test]
    fn empty_response_is_a_failure() {
        let p = FnChatProvider::new("mock", "m", |_req: &ChatRequest| Ok("   ".into()));
        let d = dataset(1);
        let cache = Cache::ephemeral();
        assert!(rephrase_sample(&p, &d.samples[0], &cfg(&p, 1.0), &cache).is_err());
    }
}
