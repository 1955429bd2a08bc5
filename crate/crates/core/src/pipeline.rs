//! End-to-end orchestration: ingest, perturb per mu, quality gates, audit,
//! paired evaluation per respondent, analysis, and report rendering, with a
//! reproducibility manifest binding every artifact digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cache::Cache;
use crate::dataset::{self, Dataset, Format};
use crate::error::{Error, Result};
use crate::eval::{self, Respondent};
use crate::perturb::{self, DistortionConfig, PerturbedDataset};
use crate::provider::mock::{
    always_equivalent_judge, synonym_swap_rephraser, HashEmbedder, ScriptedRespondent,
};
use crate::provider::{ChatProvider, EmbeddingProvider, HttpChatProvider, HttpEmbeddingProvider};
use crate::quality::{self, AuditDecision, AuditItem, ResolutionKind};
use crate::report::{MuCell, ResultRow, TableFormat};
use crate::stats::{self, MethodPolicy};

/// One provider endpoint in the run config. Secrets never live in the
/// file; `api_key_env` names the environment variable holding the key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    /// `http`, `http-embed`, `mock-rephrase`, `mock-judge`, `mock-embed`,
    /// or `mock-respondent`.
    pub kind: String,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub rate_limit: Option<f64>,
    /// Mock embedder dimension.
    #[serde(default)]
    pub dim: Option<usize>,
    /// Mock respondent parameters.
    #[serde(default)]
    pub p_original: Option<f64>,
    #[serde(default)]
    pub p_perturbed: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespondentSpec {
    pub label: String,
    #[serde(default)]
    pub parameter_count: Option<f64>,
    #[serde(flatten)]
    pub provider: ProviderSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: String,
    /// Optional seeded subsample for desk-scale runs.
    #[serde(default)]
    pub subsample_n: Option<usize>,
    #[serde(default)]
    pub subsample_seed: Option<u64>,
}

fn default_format() -> String {
    "jsonl".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditPolicy {
    /// Accept every queued rephrasing unchanged (CI mode).
    ApproveAll,
    /// Abort with a resumable error when the queue is non-empty.
    Fail,
    /// Resolve via an interactive session or a decisions file.
    Interactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub mus: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_threshold")]
    pub similarity_threshold: f64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_failure_threshold")]
    pub failure_threshold: f64,
    pub cache_path: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_audit_policy")]
    pub audit_policy: AuditPolicy,
    /// Let the judge share the rephrasing provider (self-grading); off by default.
    #[serde(default)]
    pub allow_same_judge: bool,
    pub rephraser: ProviderSpec,
    pub judge: ProviderSpec,
    pub embedder: ProviderSpec,
    pub respondents: Vec<RespondentSpec>,
}

fn default_alpha() -> f64 {
    stats::DEFAULT_ALPHA
}

fn default_threshold() -> f64 {
    quality::DEFAULT_SIMILARITY_THRESHOLD
}

fn default_parallelism() -> usize {
    4
}

fn default_failure_threshold() -> f64 {
    perturb::DEFAULT_FAILURE_THRESHOLD
}

fn default_audit_policy() -> AuditPolicy {
    AuditPolicy::Fail
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mus.is_empty() {
            return Err(Error::Config("mu list must be non-empty".into()));
        }
        if self.mus.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::Config("every mu must be >= 0".into()));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.respondents.is_empty() {
            return Err(Error::Config("at least one respondent is required".into()));
        }
        let mut labels: Vec<&str> = self.respondents.iter().map(|r| r.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.respondents.len() {
            return Err(Error::Config("respondent labels must be unique".into()));
        }
        Ok(())
    }
}

/// Resolved provider handles for one run.
pub struct ResolvedProviders {
    pub rephraser: Arc<dyn ChatProvider>,
    pub judge: Arc<dyn ChatProvider>,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub respondents: Vec<(Respondent, Arc<dyn ChatProvider>)>,
}

fn spec_id(spec: &ProviderSpec, fallback: &str) -> String {
    spec.id.clone().unwrap_or_else(|| fallback.to_string())
}

fn http_chat(spec: &ProviderSpec, role: &str) -> Result<Arc<dyn ChatProvider>> {
    let base_url = spec
        .base_url
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{}: http provider needs base_url", role)))?;
    let model = spec
        .model
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{}: http provider needs model", role)))?;
    let mut p = HttpChatProvider::new(
        spec_id(spec, role),
        model,
        base_url,
        spec.api_key_env.as_deref(),
    )?;
    if let Some(rps) = spec.rate_limit {
        p = p.with_rate_limit(rps);
    }
    Ok(Arc::new(p))
}

/// Builds a chat provider from its spec. The mock respondent needs the
/// dataset to script its answers, so it is resolved separately.
pub fn resolve_chat_provider(spec: &ProviderSpec, role: &str) -> Result<Arc<dyn ChatProvider>> {
    match spec.kind.as_str() {
        "http" => http_chat(spec, role),
        "mock-rephrase" => Ok(Arc::new(synonym_swap_rephraser())),
        "mock-judge" => Ok(Arc::new(always_equivalent_judge())),
        other => Err(Error::Config(format!("{}: unknown provider kind `{}`", role, other))),
    }
}

pub fn resolve_embedding_provider(spec: &ProviderSpec) -> Result<Arc<dyn EmbeddingProvider>> {
    match spec.kind.as_str() {
        "http-embed" => {
            let base_url = spec
                .base_url
                .as_deref()
                .ok_or_else(|| Error::Config("embedder: http provider needs base_url".into()))?;
            let model = spec
                .model
                .as_deref()
                .ok_or_else(|| Error::Config("embedder: http provider needs model".into()))?;
            Ok(Arc::new(HttpEmbeddingProvider::new(
                spec_id(spec, "embedder"),
                model,
                base_url,
                spec.api_key_env.as_deref(),
            )?))
        }
        "mock-embed" => Ok(Arc::new(HashEmbedder::new(spec.dim.unwrap_or(256)))),
        other => Err(Error::Config(format!("embedder: unknown provider kind `{}`", other))),
    }
}

pub fn resolve_respondent(
    spec: &RespondentSpec,
    dataset: &Dataset,
) -> Result<(Respondent, Arc<dyn ChatProvider>)> {
    let provider: Arc<dyn ChatProvider> = match spec.provider.kind.as_str() {
        "http" => http_chat(&spec.provider, &spec.label)?,
        "mock-respondent" => Arc::new(ScriptedRespondent::new(
            dataset,
            spec.provider.p_original.unwrap_or(0.8),
            spec.provider.p_perturbed.unwrap_or(0.7),
            spec.provider.seed.unwrap_or(0),
        )),
        other => {
            return Err(Error::Config(format!(
                "{}: unknown respondent kind `{}`",
                spec.label, other
            )))
        }
    };
    Ok((
        Respondent {
            provider_id: provider.provider_id().to_string(),
            model_id: provider.model_id().to_string(),
            label: spec.label.clone(),
            parameter_count: spec.parameter_count,
        },
        provider,
    ))
}

pub fn resolve_providers(config: &RunConfig, dataset: &Dataset) -> Result<ResolvedProviders> {
    let rephraser = resolve_chat_provider(&config.rephraser, "rephraser")?;
    let judge = resolve_chat_provider(&config.judge, "judge")?;
    if !config.allow_same_judge
        && rephraser.provider_id() == judge.provider_id()
        && rephraser.model_id() == judge.model_id()
    {
        return Err(Error::Config(
            "judge provider must differ from the rephrasing provider (set allow_same_judge to override)"
                .into(),
        ));
    }
    let embedder = resolve_embedding_provider(&config.embedder)?;
    let respondents = config
        .respondents
        .iter()
        .map(|r| resolve_respondent(r, dataset))
        .collect::<Result<Vec<_>>>()?;
    Ok(ResolvedProviders { rephraser, judge, embedder, respondents })
}

/// Reproducibility manifest: everything needed to re-derive the report
/// from cached artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub config: RunConfig,
    pub dataset_digest: String,
    /// Digest per artifact file, keyed by file name.
    pub artifact_digests: BTreeMap<String, String>,
    /// Evaluation exclusions, keyed by "{label}/mu{mu}".
    pub exclusions: BTreeMap<String, Vec<eval::Exclusion>>,
    /// Rephrase failures, keyed by "mu{mu}".
    pub rephrase_failures: BTreeMap<String, Vec<perturb::RephraseFailure>>,
    /// Audit resolutions applied, keyed by "mu{mu}".
    pub audit_log: BTreeMap<String, Vec<AuditDecision>>,
}

pub struct RunOutput {
    pub manifest: RunManifest,
    pub rows: Vec<ResultRow>,
    pub report_markdown: String,
}

fn mu_tag(mu: f64) -> String {
    format!("mu{}", mu)
}

fn write_artifact(
    out_dir: &Path,
    name: &str,
    bytes: &[u8],
    digests: &mut BTreeMap<String, String>,
) -> Result<()> {
    let path = out_dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    digests.insert(name.to_string(), dataset::sha256_hex(bytes));
    Ok(())
}

/// Executes the full pipeline. Rerunning with a warm cache performs zero
/// provider calls and reproduces byte-identical artifacts.
pub fn run_pipeline(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let started_at = chrono::Utc::now().to_rfc3339();
    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| Error::io(config.out_dir.display().to_string(), e))?;
    let cache = Cache::open(&config.cache_path)?;

    // Stage 1: ingest (plus optional seeded subsample).
    let format: Format = config.dataset.format.parse()?;
    let mut d = dataset::ingest(&config.dataset.path, format)?;
    if let Some(n) = config.dataset.subsample_n {
        d = dataset::subsample(&d, n, config.dataset.subsample_seed.unwrap_or(0))?;
    }
    let providers = resolve_providers(config, &d)?;

    let mut artifact_digests = BTreeMap::new();
    let mut exclusions = BTreeMap::new();
    let mut rephrase_failures = BTreeMap::new();
    let mut audit_log = BTreeMap::new();

    let originals: BTreeMap<String, String> =
        d.samples.iter().map(|s| (s.id.clone(), s.question.clone())).collect();

    // Stages 2-4 per mu: perturb, quality gates, audit.
    let mut perturbed_by_mu: Vec<(f64, PerturbedDataset)> = Vec::new();
    for &mu in &config.mus {
        let tag = mu_tag(mu);
        let cfg = DistortionConfig::new(mu, providers.rephraser.as_ref())?;
        let output = perturb::generate_perturbed_dataset(
            providers.rephraser.as_ref(),
            &d,
            &cfg,
            &cache,
            config.parallelism,
            config.failure_threshold,
        )?;
        rephrase_failures.insert(tag.clone(), output.failures);
        let mut dmu = output.dataset;

        // Quality gates: similarity scores and judge verdicts for every record.
        let pairs: Vec<(String, String, String)> = dmu
            .records
            .iter()
            .map(|r| {
                (
                    r.sample_id.clone(),
                    originals[&r.sample_id].clone(),
                    r.rephrased_question.clone(),
                )
            })
            .collect();
        let similarity = quality::similarity_report(
            &pairs,
            providers.embedder.as_ref(),
            &cache,
            config.similarity_threshold,
        )?;
        let mut verdicts = BTreeMap::new();
        for (id, original, rephrased) in &pairs {
            let verdict =
                quality::judge_equivalence(providers.judge.as_ref(), &cache, original, rephrased)?;
            verdicts.insert(id.clone(), verdict);
        }
        quality::annotate_records(&mut dmu, &similarity, &verdicts);

        let queue = quality::build_audit_queue(&dmu, &originals, config.similarity_threshold);
        write_artifact(
            &config.out_dir,
            &format!("audit_queue_{}.json", tag),
            serde_json::to_string_pretty(&queue).unwrap().as_bytes(),
            &mut artifact_digests,
        )?;
        if !queue.is_empty() {
            let decisions = match config.audit_policy {
                AuditPolicy::ApproveAll => approve_all(&queue),
                AuditPolicy::Fail | AuditPolicy::Interactive => {
                    // Interactive resolution happens in the CLI front end;
                    // reaching this point unresolved means the run must stop.
                    return Err(Error::AuditRequired { queued: queue.len() });
                }
            };
            let log = quality::apply_audit_decisions(&mut dmu, &decisions)?;
            audit_log.insert(tag.clone(), log);
        }

        write_artifact(
            &config.out_dir,
            &format!("perturbed_{}.json", tag),
            serde_json::to_string_pretty(&dmu).unwrap().as_bytes(),
            &mut artifact_digests,
        )?;
        write_artifact(
            &config.out_dir,
            &format!("similarity_{}.json", tag),
            serde_json::to_string_pretty(&similarity.stats).unwrap().as_bytes(),
            &mut artifact_digests,
        )?;
        perturbed_by_mu.push((mu, dmu));
    }

    // Stages 5-6: paired evaluation and analysis per respondent x mu.
    let mut rows: Vec<ResultRow> = Vec::new();
    for (respondent, provider) in &providers.respondents {
        let mut cells = Vec::new();
        for (mu, dmu) in &perturbed_by_mu {
            let tag = format!("{}_{}", sanitize(&respondent.label), mu_tag(*mu));
            let out = eval::paired_evaluate(
                provider.as_ref(),
                &d,
                dmu,
                &cache,
                config.similarity_threshold,
                config.parallelism,
            )?;
            eval::write_outcomes(&out.outcomes, &config.out_dir.join(format!("outcomes_{}.jsonl", tag)))?;
            let outcome_bytes =
                std::fs::read(config.out_dir.join(format!("outcomes_{}.jsonl", tag)))
                    .map_err(|e| Error::io("outcomes", e))?;
            artifact_digests
                .insert(format!("outcomes_{}.jsonl", tag), dataset::sha256_hex(&outcome_bytes));
            exclusions.insert(
                format!("{}/{}", respondent.label, mu_tag(*mu)),
                out.exclusions.clone(),
            );

            let table = eval::contingency(&out.outcomes);
            let analysis = stats::analyze(&table, config.alpha, MethodPolicy::Auto)?;
            write_artifact(
                &config.out_dir,
                &format!("analysis_{}.json", tag),
                serde_json::to_string_pretty(&analysis).unwrap().as_bytes(),
                &mut artifact_digests,
            )?;
            cells.push(MuCell::from_analysis(*mu, &analysis));
        }
        rows.push(ResultRow {
            label: respondent.label.clone(),
            parameter_count: respondent.parameter_count,
            cells,
        });
    }

    // Stage 7: report.
    let report_markdown = crate::report::render_results_table(&rows, TableFormat::Markdown)?;
    write_artifact(
        &config.out_dir,
        "report.md",
        report_markdown.as_bytes(),
        &mut artifact_digests,
    )?;
    write_artifact(
        &config.out_dir,
        "rows.json",
        (serde_json::to_string_pretty(&rows).unwrap() + "\n").as_bytes(),
        &mut artifact_digests,
    )?;

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        config: config.clone(),
        dataset_digest: d.source_digest.clone(),
        artifact_digests,
        exclusions,
        rephrase_failures,
        audit_log,
    };
    let manifest_path = config.out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;

    Ok(RunOutput { manifest, rows, report_markdown })
}

fn approve_all(queue: &[AuditItem]) -> Vec<AuditDecision> {
    queue
        .iter()
        .map(|item| AuditDecision {
            sample_id: item.sample_id.clone(),
            action: ResolutionKind::Approve,
            new_text: None,
        })
        .collect()
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config(dir: &Path) -> RunConfig {
        RunConfig {
            dataset: DatasetSpec {
                path: dir.join("toy.jsonl"),
                format: "jsonl".into(),
                subsample_n: None,
                subsample_seed: None,
            },
            mus: vec![0.5],
            alpha: 0.05,
            similarity_threshold: 0.7,
            parallelism: 2,
            failure_threshold: 0.05,
            cache_path: dir.join("cache.jsonl"),
            out_dir: dir.join("out"),
            audit_policy: AuditPolicy::ApproveAll,
            allow_same_judge: false,
            rephraser: ProviderSpec {
                kind: "mock-rephrase".into(),
                id: None,
                model: None,
                base_url: None,
                api_key_env: None,
                rate_limit: None,
                dim: None,
                p_original: None,
                p_perturbed: None,
                seed: None,
            },
            judge: ProviderSpec { kind: "mock-judge".into(), ..mock_spec() },
            embedder: ProviderSpec { kind: "mock-embed".into(), dim: Some(256), ..mock_spec() },
            respondents: vec![RespondentSpec {
                label: "scripted".into(),
                parameter_count: Some(7.0),
                provider: ProviderSpec {
                    kind: "mock-respondent".into(),
                    p_original: Some(0.8),
                    p_perturbed: Some(0.7),
                    seed: Some(1),
                    ..mock_spec()
                },
            }],
        }
    }

    fn mock_spec() -> ProviderSpec {
        ProviderSpec {
            kind: String::new(),
            id: None,
            model: None,
            base_url: None,
            api_key_env: None,
            rate_limit: None,
            dim: None,
            p_original: None,
            p_perturbed: None,
            seed: None,
        }
    }

    #[test]
    fn empty_mu_list_is_rejected_before_any_work() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = minimal_config(dir.path());
        config.mus.clear();
        assert!(matches!(run_pipeline(&config), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_labels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = minimal_config(dir.path());
        config.respondents.push(config.respondents[0].clone());
        assert!(config.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let config = minimal_config(dir.path());
        let text = toml::to_string(&config).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }
}
