//! Paired evaluation of a respondent model on original and rephrased
//! questions under the fixed multiple-choice query prompt.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{query_cache_key, Cache};
use crate::dataset::{option_letter, Dataset};
use crate::error::{Error, Result};
use crate::perturb::PerturbedDataset;
use crate::provider::{ChatMessage, ChatProvider, ChatRequest};
use crate::quality::passes_gate;

pub const QUERY_INSTRUCTION: &str = "Select the best answer from the given options. Respond with only the letter corresponding to the correct choice.  Question: {question}";

/// Respondent queries always decode at temperature 0 with a small token
/// budget; determinism keeps pairing and caching exact.
pub const QUERY_TEMPERATURE: f64 = 0.0;
pub const QUERY_MAX_TOKENS: u32 = 16;

/// The model under evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Respondent {
    pub provider_id: String,
    pub model_id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter_count: Option<f64>,
}

/// Per-sample correctness on the original and perturbed question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedOutcome {
    pub sample_id: String,
    pub original_correct: bool,
    pub perturbed_correct: bool,
    pub original_raw: String,
    pub perturbed_raw: String,
}

/// The 2x2 table of paired correctness counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    /// both correct
    pub n11: u64,
    /// original-only correct
    pub b: u64,
    /// perturbed-only correct
    pub c: u64,
    /// both wrong
    pub n00: u64,
    pub n: u64,
}

/// A sample left out of the paired outcomes and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub outcomes: Vec<PairedOutcome>,
    pub exclusions: Vec<Exclusion>,
}

/// Renders the fixed instruction with the question substituted, followed by
/// the lettered options in stored order. Option lines are identical between
/// the original and rephrased arms by construction.
pub fn build_query_prompt(question: &str, options: &[String]) -> String {
    let mut prompt = QUERY_INSTRUCTION.replace("{question}", question);
    for (i, option) in options.iter().enumerate() {
        prompt.push('\n');
        prompt.push(option_letter(i));
        prompt.push_str(". ");
        prompt.push_str(option);
    }
    prompt
}

/// Finds the first standalone letter token within A..(A+n_options-1),
/// case-insensitive, ignoring punctuation and markup. Returns the option
/// index, or None when no in-range letter appears.
pub fn extract_answer_letter(response: &str, n_options: usize) -> Option<usize> {
    debug_assert!((2..=26).contains(&n_options));
    response
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .find_map(|token| {
            let mut chars = token.chars();
            let c = chars.next()?;
            if chars.next().is_some() {
                return None; // multi-character token
            }
            let upper = c.to_ascii_uppercase();
            if upper.is_ascii_uppercase() {
                let idx = (upper as u8 - b'A') as usize;
                (idx < n_options).then_some(idx)
            } else {
                None
            }
        })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredResponse {
    pub correct: bool,
    pub raw: String,
    pub unparseable: bool,
}

/// Queries the respondent (or replays the cache) and scores the response
/// against the answer key. Unparseable responses score incorrect and are
/// flagged rather than excluded.
pub fn score_sample(
    provider: &dyn ChatProvider,
    cache: &Cache,
    prompt: &str,
    answer_key: usize,
    n_options: usize,
) -> Result<ScoredResponse> {
    let key = query_cache_key(
        provider.provider_id(),
        provider.model_id(),
        prompt,
        QUERY_TEMPERATURE,
    );
    let raw = match cache.get(&key) {
        Some(cached) => cached,
        None => {
            let request = ChatRequest {
                model: provider.model_id().to_string(),
                messages: vec![ChatMessage::user(prompt.to_string())],
                temperature: Some(QUERY_TEMPERATURE),
                max_tokens: Some(QUERY_MAX_TOKENS),
            };
            let response = provider.complete(&request)?;
            cache.put(&key, &request.digest(), &response)?;
            response
        }
    };
    let extracted = extract_answer_letter(&raw, n_options);
    Ok(ScoredResponse {
        correct: extracted == Some(answer_key),
        unparseable: extracted.is_none(),
        raw,
    })
}

/// Evaluates the respondent on every eligible (original, perturbed) pair.
/// Rejected rephrasings and failed queries are enumerated as exclusions.
pub fn paired_evaluate(
    provider: &dyn ChatProvider,
    d: &Dataset,
    dmu: &PerturbedDataset,
    cache: &Cache,
    similarity_threshold: f64,
    parallelism: usize,
) -> Result<EvalOutput> {
    if dmu.base_digest != d.source_digest {
        return Err(Error::DigestMismatch {
            expected: d.source_digest.clone(),
            actual: dmu.base_digest.clone(),
        });
    }

    enum Slot {
        Outcome(PairedOutcome),
        Excluded(Exclusion),
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {}", e)))?;
    let slots: Vec<Slot> = pool.install(|| {
        d.samples
            .par_iter()
            .map(|sample| {
                let record = match dmu.record_for(&sample.id) {
                    Some(r) => r,
                    None => {
                        return Slot::Excluded(Exclusion {
                            sample_id: sample.id.clone(),
                            reason: "no rephrasing record".into(),
                        })
                    }
                };
                if !passes_gate(record, similarity_threshold) {
                    return Slot::Excluded(Exclusion {
                        sample_id: sample.id.clone(),
                        reason: "rephrasing failed quality gate".into(),
                    });
                }
                let original_prompt = build_query_prompt(&sample.question, &sample.options);
                let perturbed_prompt =
                    build_query_prompt(&record.rephrased_question, &sample.options);
                let original = score_sample(
                    provider,
                    cache,
                    &original_prompt,
                    sample.answer_key,
                    sample.options.len(),
                );
                let perturbed = score_sample(
                    provider,
                    cache,
                    &perturbed_prompt,
                    sample.answer_key,
                    sample.options.len(),
                );
                match (original, perturbed) {
                    (Ok(o), Ok(p)) => Slot::Outcome(PairedOutcome {
                        sample_id: sample.id.clone(),
                        original_correct: o.correct,
                        perturbed_correct: p.correct,
                        original_raw: o.raw,
                        perturbed_raw: p.raw,
                    }),
                    (Err(e), _) | (_, Err(e)) => Slot::Excluded(Exclusion {
                        sample_id: sample.id.clone(),
                        reason: format!("query failed: {}", e),
                    }),
                }
            })
            .collect()
    });

    let mut outcomes = Vec::new();
    let mut exclusions = Vec::new();
    for slot in slots {
        match slot {
            Slot::Outcome(o) => outcomes.push(o),
            Slot::Excluded(e) => exclusions.push(e),
        }
    }
    Ok(EvalOutput { outcomes, exclusions })
}

/// Aggregates paired outcomes into the 2x2 contingency table.
pub fn contingency(outcomes: &[PairedOutcome]) -> ContingencyTable {
    let mut t = ContingencyTable { n11: 0, b: 0, c: 0, n00: 0, n: outcomes.len() as u64 };
    for o in outcomes {
        match (o.original_correct, o.perturbed_correct) {
            (true, true) => t.n11 += 1,
            (true, false) => t.b += 1,
            (false, true) => t.c += 1,
            (false, false) => t.n00 += 1,
        }
    }
    t
}

/// Writes outcomes as JSONL, one object per line.
pub fn write_outcomes(outcomes: &[PairedOutcome], path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    for o in outcomes {
        out.push_str(&serde_json::to_string(o).expect("outcome serialization"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_outcomes(path: &std::path::Path) -> Result<Vec<PairedOutcome>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BenchmarkSample;
    use crate::perturb::{AuditStatus, RephraseRecord};
    use crate::provider::mock::FnChatProvider;
    use crate::quality::{JudgeVerdict, Judgment};

    #[test]
    fn prompt_contains_question_then_lettered_options() {
        let prompt = build_query_prompt("Q", &["a".into(), "b".into()]);
        assert!(prompt.contains("Question: Q"));
        let q_pos = prompt.find("Question: Q").unwrap();
        let a_pos = prompt.find("\nA. a").unwrap();
        let b_pos = prompt.find("\nB. b").unwrap();
        assert!(q_pos < a_pos && a_pos < b_pos);
    }

    #[test]
    fn original_and_rephrased_prompts_share_option_lines() {
        let options: Vec<String> = vec!["first".into(), "second".into()];
        let p1 = build_query_prompt("What is X?", &options);
        let p2 = build_query_prompt("Which thing constitutes X?", &options);
        let tail1 = &p1[p1.find("\nA.").unwrap()..];
        let tail2 = &p2[p2.find("\nA.").unwrap()..];
        assert_eq!(tail1, tail2);
    }

    #[test]
    fn letter_extraction_policy() {
        assert_eq!(extract_answer_letter("B", 4), Some(1));
        assert_eq!(extract_answer_letter("The answer is (C).", 4), Some(2));
        assert_eq!(extract_answer_letter("E", 4), None);
        assert_eq!(extract_answer_letter("**d**", 4), Some(3));
        assert_eq!(extract_answer_letter("Answer: A", 4), Some(0));
        assert_eq!(extract_answer_letter("I don't know", 4), None);
        assert_eq!(extract_answer_letter("", 4), None);
        // Multi-character tokens never match, so words are not misread.
        assert_eq!(extract_answer_letter("Be careful", 4), None);
    }

    fn echo_letter_provider(letter: &'static str) -> impl ChatProvider {
        FnChatProvider::new("resp", "echo", move |_: &ChatRequest| Ok(letter.to_string()))
    }

    #[test]
    fn score_sample_uses_cache_and_flags_unparseable() {
        let cache = Cache::ephemeral();
        let p = echo_letter_provider("B");
        let s = score_sample(&p, &cache, "prompt", 1, 4).unwrap();
        assert!(s.correct && !s.unparseable);
        score_sample(&p, &cache, "prompt", 1, 4).unwrap();
        assert_eq!(p.call_count(), 1);

        let vague = echo_letter_provider("I don't know");
        let s = score_sample(&vague, &cache, "other prompt", 1, 4).unwrap();
        assert!(!s.correct && s.unparseable);
    }

    fn toy_dataset() -> Dataset {
        Dataset {
            name: "toy".into(),
            samples: (0..4)
                .map(|i| BenchmarkSample {
                    id: format!("s{}", i),
                    subject: "s".into(),
                    question: format!("Original question number {}?", i),
                    options: vec!["w".into(), "x".into(), "y".into(), "z".into()],
                    answer_key: 0,
                })
                .collect(),
            source_digest: "digest".into(),
        }
    }

    fn passing_record(id: &str, text: &str) -> RephraseRecord {
        RephraseRecord {
            sample_id: id.into(),
            mu: 1.0,
            rephrased_question: text.into(),
            raw_response: text.into(),
            cache_key: String::new(),
            similarity: Some(0.95),
            judge: Some(JudgeVerdict {
                judgment: Judgment::Equivalent,
                reasoning: String::new(),
                raw: String::new(),
            }),
            audit_status: AuditStatus::Unreviewed,
        }
    }

    fn toy_perturbed(d: &Dataset) -> PerturbedDataset {
        PerturbedDataset {
            base_digest: d.source_digest.clone(),
            mu: 1.0,
            records: d
                .samples
                .iter()
                .map(|s| passing_record(&s.id, &format!("Rephrased question number {}?", &s.id[1..])))
                .collect(),
        }
    }

    #[test]
    fn paired_evaluation_splits_by_arm() {
        let d = toy_dataset();
        let dmu = toy_perturbed(&d);
        // Correct (answer A) on originals, wrong on rephrased prompts.
        let p = FnChatProvider::new("resp", "m", |req: &ChatRequest| {
            if req.messages[0].content.contains("Original") {
                Ok("A".into())
            } else {
                Ok("B".into())
            }
        });
        let cache = Cache::ephemeral();
        let out = paired_evaluate(&p, &d, &dmu, &cache, 0.7, 2).unwrap();
        assert_eq!(out.outcomes.len(), 4);
        assert!(out
            .outcomes
            .iter()
            .all(|o| o.original_correct && !o.perturbed_correct));
        let t = contingency(&out.outcomes);
        assert_eq!((t.n11, t.b, t.c, t.n00, t.n), (0, 4, 0, 0, 4));
    }

    #[test]
    fn digest_mismatch_is_fatal() {
        let d = toy_dataset();
        let mut dmu = toy_perturbed(&d);
        dmu.base_digest = "different".into();
        let p = echo_letter_provider("A");
        let cache = Cache::ephemeral();
        assert!(matches!(
            paired_evaluate(&p, &d, &dmu, &cache, 0.7, 1),
            Err(Error::DigestMismatch { .. })
        ));
    }

    #[test]
    fn rejected_rephrasing_is_excluded() {
        let d = toy_dataset();
        let mut dmu = toy_perturbed(&d);
        dmu.records[2].audit_status = AuditStatus::Rejected;
        let p = echo_letter_provider("A");
        let cache = Cache::ephemeral();
        let out = paired_evaluate(&p, &d, &dmu, &cache, 0.7, 1).unwrap();
        assert_eq!(out.outcomes.len(), 3);
        assert_eq!(out.exclusions.len(), 1);
        assert_eq!(out.exclusions[0].sample_id, "s2");
    }

    #[test]
    fn contingency_counts_each_cell() {
        let outcome = |o: bool, p: bool| PairedOutcome {
            sample_id: "x".into(),
            original_correct: o,
            perturbed_correct: p,
            original_raw: String::new(),
            perturbed_raw: String::new(),
        };
        let t = contingency(&[
            outcome(true, true),
            outcome(true, false),
            outcome(false, true),
            outcome(false, false),
        ]);
        assert_eq!((t.n11, t.b, t.c, t.n00, t.n), (1, 1, 1, 1, 4));
        assert_eq!(contingency(&[]).n, 0);
        let t3 = contingency(&[outcome(true, false), outcome(true, false), outcome(true, false)]);
        assert_eq!((t3.b, t3.n), (3, 3));
    }

    #[test]
    fn accuracy_difference_equals_net_discordance() {
        // (b - c) / n == acc_orig - acc_pert, exactly, for any outcome vector.
        let outcomes: Vec<PairedOutcome> = (0..32)
            .map(|i| PairedOutcome {
                sample_id: format!("s{}", i),
                original_correct: i % 3 != 0,
                perturbed_correct: i % 4 != 0,
                original_raw: String::new(),
                perturbed_raw: String::new(),
            })
            .collect();
        let t = contingency(&outcomes);
        let acc_orig = (t.n11 + t.b) as f64 / t.n as f64;
        let acc_pert = (t.n11 + t.c) as f64 / t.n as f64;
        let net = (t.b as f64 - t.c as f64) / t.n as f64;
        assert!((acc_orig - acc_pert - net).abs() < 1e-15);
    }

    #[test]
    fn outcomes_round_trip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("outcomes.jsonl");
        let outcomes = vec![PairedOutcome {
            sample_id: "s0".into(),
            original_correct: true,
            perturbed_correct: false,
            original_raw: "A".into(),
            perturbed_raw: "B".into(),
        }];
        write_outcomes(&outcomes, &path).unwrap();
        assert_eq!(read_outcomes(&path).unwrap(), outcomes);
    }
}
