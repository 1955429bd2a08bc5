//! Rephrasing quality gates: embedding cosine similarity, judge-model
//! semantic equivalence, and the human audit queue fed by both.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cache::{embed_cache_key, judge_cache_key, Cache};
use crate::error::{Error, Result};
use crate::perturb::{AuditStatus, PerturbedDataset, RephraseRecord};
use crate::provider::{ChatMessage, ChatProvider, ChatRequest, EmbeddingProvider};

/// Audit trigger threshold for cosine similarity.
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.7;

pub const JUDGE_SYSTEM_PROMPT: &str = r#"You will be given two versions of a question: an `original_question` and a `rephrased_question`. Your task is to evaluate if they have the exact same meaning. "Semantically equivalent" means that a person with the required domain knowledge would provide the exact same answer to both questions.

Respond with a single JSON object containing two keys:
1.  `"judgment"`: Your verdict, which must be either "EQUIVALENT" or "NOT_EQUIVALENT".
2.  `"reasoning"`: A brief, one-sentence explanation for your judgment.


Judgment Criteria:

A rephrased question is NOT_EQUIVALENT if it meets any of the following conditions:

A. Logical Alteration
* Reverses Logic: The rephrase swaps the subject and object or reverses the direction of an implication.
* Changes Logical Operator: The rephrase changes a one-way implication (if/then) to a two-way bi-conditional (if and only if).

B. Change in Scope or Precision
* Loss of Specificity: The rephrase replaces a precise technical term with a vague or overly general one.
* Incorrect Substitution: The rephrase swaps a key term with another, related but incorrect, term (e.g., "mass" for "weight").
* Incorrect Expansion of Acronym: The rephrase incorrectly defines an acronym for the given context.

C. Structural Failure
* Answers the Question: The rephrase provides the definition or answer to the original question, especially in fill-in-the-blank scenarios.
* Fails to Rephrase: The output is an error message, a refusal, or otherwise not a good-faith attempt at rephrasing.

A rephrased question is EQUIVALENT only if it avoids all the errors above. Stylistic changes, synonym swaps, and sentence restructuring are acceptable as long as the core meaning remains identical."#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Judgment {
    #[serde(rename = "EQUIVALENT")]
    Equivalent,
    #[serde(rename = "NOT_EQUIVALENT")]
    NotEquivalent,
    /// The provider's response could not be parsed into the closed
    /// vocabulary even after one re-ask; routed to audit, never auto-rejected.
    #[serde(rename = "PARSE_FAILURE")]
    ParseFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub judgment: Judgment,
    pub reasoning: String,
    pub raw: String,
}

/// Aggregate similarity statistics over a set of (original, rephrased) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
    pub below_threshold_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub stats: SimilarityStats,
    /// Per-pair cosine scores keyed by sample id.
    pub scores: BTreeMap<String, f64>,
    /// Pairs excluded because embedding failed; reported, not fatal.
    pub failed_ids: Vec<String>,
    pub threshold: f64,
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of zero vector".into()));
    }
    Ok(dot / (nu * nv))
}

/// Embeds text through the provider, caching by (provider, model, text digest).
pub fn embed(provider: &dyn EmbeddingProvider, cache: &Cache, text: &str) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Err(Error::InvalidArgument("cannot embed empty text".into()));
    }
    let key = embed_cache_key(provider.provider_id(), provider.model_id(), text);
    if let Some(cached) = cache.get(&key) {
        return serde_json::from_str(&cached)
            .map_err(|e| Error::Parse { line: 0, message: format!("cached embedding: {}", e) });
    }
    let vector = provider.embed(text)?;
    cache.put(&key, &crate::dataset::sha256_hex(text.as_bytes()), &serde_json::to_string(&vector).unwrap())?;
    Ok(vector)
}

/// Scores every (original, rephrased) pair, collecting ids whose cosine
/// falls strictly below the threshold.
pub fn similarity_report(
    pairs: &[(String, String, String)], // (sample_id, original, rephrased)
    provider: &dyn EmbeddingProvider,
    cache: &Cache,
    threshold: f64,
) -> Result<SimilarityReport> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {} outside [-1, 1]", threshold)));
    }
    let mut scores = BTreeMap::new();
    let mut failed_ids = Vec::new();
    for (id, original, rephrased) in pairs {
        let score = embed(provider, cache, original).and_then(|u| {
            embed(provider, cache, rephrased).and_then(|v| cosine_similarity(&u, &v))
        });
        match score {
            Ok(s) => {
                scores.insert(id.clone(), s);
            }
            Err(_) => failed_ids.push(id.clone()),
        }
    }
    let mut sorted: Vec<f64> = scores.values().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let count = sorted.len();
    let mean = if count == 0 { 0.0 } else { sorted.iter().sum::<f64>() / count as f64 };
    let median = if count == 0 {
        0.0
    } else if count % 2 == 1 {
        sorted[count / 2]
    } else {
        (sorted[count / 2 - 1] + sorted[count / 2]) / 2.0
    };
    let mut below_threshold_ids: Vec<String> = scores
        .iter()
        .filter(|(_, &s)| s < threshold)
        .map(|(id, _)| id.clone())
        .collect();
    below_threshold_ids.sort();
    Ok(SimilarityReport {
        stats: SimilarityStats { mean, median, count, below_threshold_ids },
        scores,
        failed_ids,
        threshold,
    })
}

/// Extracts the first balanced JSON object from text that may wrap it in
/// prose or code fences.
pub fn extract_first_json_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVerdict {
    judgment: String,
    reasoning: String,
}

fn parse_verdict(raw: &str) -> Option<JudgeVerdict> {
    let object = extract_first_json_object(raw)?;
    let parsed: RawVerdict = serde_json::from_str(object).ok()?;
    let judgment = match parsed.judgment.as_str() {
        "EQUIVALENT" => Judgment::Equivalent,
        "NOT_EQUIVALENT" => Judgment::NotEquivalent,
        _ => return None,
    };
    Some(JudgeVerdict { judgment, reasoning: parsed.reasoning, raw: raw.to_string() })
}

pub fn build_judge_request(model: &str, original: &str, rephrased: &str) -> ChatRequest {
    ChatRequest {
        model: model.to_string(),
        messages: vec![
            ChatMessage::system(JUDGE_SYSTEM_PROMPT),
            ChatMessage::user(format!(
                "original_question: {}\nrephrased_question: {}",
                original, rephrased
            )),
        ],
        temperature: Some(0.0),
        max_tokens: None,
    }
}

/// Asks the judge model whether the pair is semantically equivalent.
/// Unparseable output triggers exactly one re-ask; a second failure is
/// recorded as a parse-failure verdict (which routes the pair to audit).
pub fn judge_equivalence(
    provider: &dyn ChatProvider,
    cache: &Cache,
    original: &str,
    rephrased: &str,
) -> Result<JudgeVerdict> {
    let key = judge_cache_key(provider.provider_id(), provider.model_id(), original, rephrased);
    if let Some(cached) = cache.get(&key) {
        return Ok(parse_verdict(&cached).unwrap_or(JudgeVerdict {
            judgment: Judgment::ParseFailure,
            reasoning: String::new(),
            raw: cached,
        }));
    }
    let request = build_judge_request(provider.model_id(), original, rephrased);
    let mut raw = provider.complete(&request)?;
    if parse_verdict(&raw).is_none() {
        raw = provider.complete(&request)?;
    }
    let verdict = parse_verdict(&raw).unwrap_or(JudgeVerdict {
        judgment: Judgment::ParseFailure,
        reasoning: String::new(),
        raw: raw.clone(),
    });
    // Cache only clean verdicts so a parse-failure can be retried later.
    if verdict.judgment != Judgment::ParseFailure {
        cache.put(&key, &request.digest(), &raw)?;
    }
    Ok(verdict)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionKind {
    Approve,
    Edit,
    Reject,
}

/// One pending audit item: a rephrasing that failed either quality gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditItem {
    pub sample_id: String,
    pub original: String,
    pub rephrased: String,
    pub similarity: Option<f64>,
    pub judge: Option<JudgeVerdict>,
}

/// One reviewer decision, replayable from a decisions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditDecision {
    pub sample_id: String,
    pub action: ResolutionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_text: Option<String>,
}

/// True when the record has passed the automated gates or been explicitly
/// approved/edited by a human. Rejected records are never eligible.
pub fn passes_gate(record: &RephraseRecord, threshold: f64) -> bool {
    match record.audit_status {
        AuditStatus::Rejected => false,
        AuditStatus::Approved | AuditStatus::Edited => true,
        AuditStatus::Unreviewed => {
            record.similarity.is_some_and(|s| s >= threshold)
                && record
                    .judge
                    .as_ref()
                    .is_some_and(|j| j.judgment == Judgment::Equivalent)
        }
    }
}

/// Collects exactly the records failing either gate, ordered by ascending
/// similarity (unscored records first).
pub fn build_audit_queue(
    perturbed: &PerturbedDataset,
    originals: &BTreeMap<String, String>,
    threshold: f64,
) -> Vec<AuditItem> {
    let mut items: Vec<AuditItem> = perturbed
        .records
        .iter()
        .filter(|r| r.audit_status == AuditStatus::Unreviewed && !passes_gate(r, threshold))
        .map(|r| AuditItem {
            sample_id: r.sample_id.clone(),
            original: originals.get(&r.sample_id).cloned().unwrap_or_default(),
            rephrased: r.rephrased_question.clone(),
            similarity: r.similarity,
            judge: r.judge.clone(),
        })
        .collect();
    items.sort_by(|a, b| {
        let ka = a.similarity.unwrap_or(f64::NEG_INFINITY);
        let kb = b.similarity.unwrap_or(f64::NEG_INFINITY);
        ka.partial_cmp(&kb).unwrap().then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    items
}

/// Applies reviewer decisions. Edited items get the replacement text and
/// their similarity/judge fields cleared for re-validation; rejected items
/// stay in the dataset but are excluded from evaluation. Returns the
/// applied decisions in order, as the audit log.
pub fn apply_audit_decisions(
    perturbed: &mut PerturbedDataset,
    decisions: &[AuditDecision],
) -> Result<Vec<AuditDecision>> {
    let mut log = Vec::with_capacity(decisions.len());
    for decision in decisions {
        let record = perturbed
            .records
            .iter_mut()
            .find(|r| r.sample_id == decision.sample_id)
            .ok_or_else(|| Error::UnknownDecisionId(decision.sample_id.clone()))?;
        match decision.action {
            ResolutionKind::Approve => record.audit_status = AuditStatus::Approved,
            ResolutionKind::Reject => record.audit_status = AuditStatus::Rejected,
            ResolutionKind::Edit => {
                let new_text = decision.new_text.clone().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "edit decision for `{}` carries no replacement text",
                        decision.sample_id
                    ))
                })?;
                record.rephrased_question = new_text;
                record.similarity = None;
                record.judge = None;
                record.audit_status = AuditStatus::Edited;
            }
        }
        log.push(decision.clone());
    }
    Ok(log)
}

/// Writes similarity scores and judge verdicts back onto the perturbed
/// dataset records.
pub fn annotate_records(
    perturbed: &mut PerturbedDataset,
    report: &SimilarityReport,
    verdicts: &BTreeMap<String, JudgeVerdict>,
) {
    for record in &mut perturbed.records {
        if let Some(&s) = report.scores.get(&record.sample_id) {
            record.similarity = Some(s);
        }
        if let Some(v) = verdicts.get(&record.sample_id) {
            record.judge = Some(v.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::mock::{FnChatProvider, HashEmbedder};
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_fixtures() {
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_similarity(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-6
        );
    }

    #[test]
    fn cosine_rejects_bad_inputs() {
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn embed_caches_by_text() {
        let e = HashEmbedder::new(8);
        let cache = Cache::ephemeral();
        let a = embed(&e, &cache, "same text").unwrap();
        let b = embed(&e, &cache, "same text").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        assert_eq!(e.call_count(), 1);
        assert!(embed(&e, &cache, "").is_err());
    }

    fn pairs(items: &[(&str, &str, &str)]) -> Vec<(String, String, String)> {
        items.iter().map(|(a, b, c)| (a.to_string(), b.to_string(), c.to_string())).collect()
    }

    #[test]
    fn similarity_report_statistics() {
        let e = HashEmbedder::new(64);
        let cache = Cache::ephemeral();
        // Identical texts give cosine exactly 1.0.
        let report = similarity_report(
            &pairs(&[("a", "alpha beta gamma", "alpha beta gamma"), ("b", "one two", "one two")]),
            &e,
            &cache,
            0.7,
        )
        .unwrap();
        assert_abs_diff_eq!(report.stats.mean, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.stats.median, 1.0, epsilon = 1e-12);
        assert!(report.stats.below_threshold_ids.is_empty());
    }

    #[test]
    fn below_threshold_ids_are_exactly_the_low_scores() {
        let e = HashEmbedder::new(512);
        let cache = Cache::ephemeral();
        let report = similarity_report(
            &pairs(&[
                ("hi", "red green blue yellow purple", "red green blue yellow orange"),
                ("lo", "red green blue yellow purple", "sound waves travel through air"),
            ]),
            &e,
            &cache,
            0.7,
        )
        .unwrap();
        assert_eq!(report.stats.below_threshold_ids, vec!["lo".to_string()]);
        assert!(report.scores["hi"] >= 0.7);
        assert!(report.scores["lo"] < 0.7);
    }

    #[test]
    fn judge_parses_plain_and_fenced_json() {
        let cache = Cache::ephemeral();
        let p = FnChatProvider::new("judge", "j", |_: &ChatRequest| {
            Ok(r#"{"judgment":"EQUIVALENT","reasoning":"same meaning"}"#.into())
        });
        let v = judge_equivalence(&p, &cache, "q", "q2").unwrap();
        assert_eq!(v.judgment, Judgment::Equivalent);
        assert_eq!(v.reasoning, "same meaning");

        let fenced = FnChatProvider::new("judge2", "j", |_: &ChatRequest| {
            Ok("Here is my verdict:\n```json\n{\"judgment\": \"NOT_EQUIVALENT\", \"reasoning\": \"scope changed\"}\n```\n".into())
        });
        let v = judge_equivalence(&fenced, &cache, "q", "q2").unwrap();
        assert_eq!(v.judgment, Judgment::NotEquivalent);
    }

    #[test]
    fn judge_rejects_open_vocabulary_after_reask() {
        let cache = Cache::ephemeral();
        let p = FnChatProvider::new("judge", "j", |_: &ChatRequest| {
            Ok(r#"{"judgment":"MAYBE","reasoning":"unsure"}"#.into())
        });
        let v = judge_equivalence(&p, &cache, "q", "q2").unwrap();
        assert_eq!(v.judgment, Judgment::ParseFailure);
        assert_eq!(p.call_count(), 2); // one re-ask
    }

    #[test]
    fn judge_reask_recovers_from_transient_garbage() {
        let cache = Cache::ephemeral();
        let hits = std::sync::atomic::AtomicU64::new(0);
        let p = FnChatProvider::new("judge", "j", move |_: &ChatRequest| {
            if hits.fetch_add(1, std::sync::atomic::Ordering::Relaxed) == 0 {
                Ok("no json here".into())
            } else {
                Ok(r#"{"judgment":"EQUIVALENT","reasoning":"ok"}"#.into())
            }
        });
        let v = judge_equivalence(&p, &cache, "q", "q2").unwrap();
        assert_eq!(v.judgment, Judgment::Equivalent);
    }

    fn record(id: &str, similarity: Option<f64>, judgment: Option<Judgment>) -> RephraseRecord {
        RephraseRecord {
            sample_id: id.into(),
            mu: 1.0,
            rephrased_question: format!("rephrased {}", id),
            raw_response: String::new(),
            cache_key: String::new(),
            similarity,
            judge: judgment.map(|j| JudgeVerdict {
                judgment: j,
                reasoning: String::new(),
                raw: String::new(),
            }),
            audit_status: AuditStatus::Unreviewed,
        }
    }

    fn perturbed(records: Vec<RephraseRecord>) -> PerturbedDataset {
        PerturbedDataset { base_digest: "d".into(), mu: 1.0, records }
    }

    #[test]
    fn audit_queue_is_disjunctive_and_sorted() {
        let d = perturbed(vec![
            record("pass", Some(0.9), Some(Judgment::Equivalent)),
            record("lowsim", Some(0.5), Some(Judgment::Equivalent)),
            record("badjudge", Some(0.99), Some(Judgment::NotEquivalent)),
            record("lowersim", Some(0.4), Some(Judgment::Equivalent)),
        ]);
        let originals = BTreeMap::new();
        let queue = build_audit_queue(&d, &originals, 0.7);
        let ids: Vec<&str> = queue.iter().map(|i| i.sample_id.as_str()).collect();
        assert_eq!(ids, vec!["lowersim", "lowsim", "badjudge"]);
    }

    #[test]
    fn all_passing_records_mean_empty_queue() {
        let d = perturbed(vec![record("a", Some(0.8), Some(Judgment::Equivalent))]);
        assert!(build_audit_queue(&d, &BTreeMap::new(), 0.7).is_empty());
    }

    #[test]
    fn parse_failure_routes_to_audit() {
        let d = perturbed(vec![record("pf", Some(0.95), Some(Judgment::ParseFailure))]);
        assert_eq!(build_audit_queue(&d, &BTreeMap::new(), 0.7).len(), 1);
    }

    #[test]
    fn decisions_update_records() {
        let mut d = perturbed(vec![
            record("a", Some(0.5), Some(Judgment::Equivalent)),
            record("b", Some(0.6), Some(Judgment::Equivalent)),
            record("c", Some(0.65), Some(Judgment::Equivalent)),
        ]);
        let log = apply_audit_decisions(
            &mut d,
            &[
                AuditDecision { sample_id: "a".into(), action: ResolutionKind::Approve, new_text: None },
                AuditDecision {
                    sample_id: "b".into(),
                    action: ResolutionKind::Edit,
                    new_text: Some("better text".into()),
                },
                AuditDecision { sample_id: "c".into(), action: ResolutionKind::Reject, new_text: None },
            ],
        )
        .unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(d.records[0].audit_status, AuditStatus::Approved);
        assert_eq!(d.records[1].rephrased_question, "better text");
        assert_eq!(d.records[1].similarity, None);
        assert_eq!(d.records[1].audit_status, AuditStatus::Edited);
        assert!(!passes_gate(&d.records[2], 0.7));
        assert!(passes_gate(&d.records[0], 0.7));
    }

    #[test]
    fn unknown_decision_id_is_an_error() {
        let mut d = perturbed(vec![record("a", Some(0.5), None)]);
        let err = apply_audit_decisions(
            &mut d,
            &[AuditDecision { sample_id: "zz".into(), action: ResolutionKind::Approve, new_text: None }],
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownDecisionId(_)));
    }
}
