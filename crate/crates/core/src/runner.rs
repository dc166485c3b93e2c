//! Run orchestration: configuration, question selection, the worker pool,
//! incremental persistence with resume, and report generation.
//!
//! A run directory is the unit of work: `manifest.json` (config snapshot,
//! statuses, call counters), `traces.jsonl` and `retrievals.jsonl` (appended
//! and flushed per question), `report.json` / `report.txt` (rewritten at the
//! end). The trace line is the commit record for a question — a question
//! with a persisted trace is skipped when the run is repeated with the same
//! config hash, which is what makes interrupted runs resumable and repeat
//! runs free.

use crate::backend::{
    BackendCounts, BackendSet, BackendSpec, CacheStore, CachedBackend, CountingBackend,
    HttpBackend, HttpBackendConfig, MockBackend, ModelBackend, ThrottledBackend,
};
use crate::corpus::{load_named, Corpus, Question};
use crate::error::{Error, Result, Stage};
use crate::evaluate::{
    compare_ablations, evaluate_run, render_ablation_text, render_report_text, AblationTable,
    EvalReport,
};
use crate::reader::{
    self,
    prompt::{PromptLibrary, ShotSet},
    ReaderConfig, ReaderEnv, ReaderTrace,
};
use crate::retrieve::{retrieve, RetrievalResult, RetrieverConfig};
use rand_core::{RngCore, SeedableRng};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub name: String,
    pub tables: PathBuf,
    pub passages: PathBuf,
    pub questions: PathBuf,
}

fn default_workers() -> usize {
    4
}

/// One JSON document describing a complete run. Relative paths are resolved
/// against the config file's directory by [`load_config`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: CorpusPaths,
    #[serde(default)]
    pub retriever: RetrieverConfig,
    #[serde(default)]
    pub reader: ReaderConfig,
    /// Named backends; the entry named `default` serves unrouted stages.
    pub backends: BTreeMap<String, BackendSpec>,
    /// Stage name → backend name.
    #[serde(default)]
    pub routing: BTreeMap<String, String>,
    /// Response cache location; no caching when absent.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Directory of `<template>.txt` overrides for the builtin prompts.
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub shots_qa: Option<PathBuf>,
    #[serde(default)]
    pub shots_decompose: Option<PathBuf>,
    /// Cap on how many questions run; sampled with `seed` when fewer than
    /// the corpus holds.
    #[serde(default)]
    pub limit: Option<usize>,
    /// Explicit question ids; empty means all.
    #[serde(default)]
    pub ids: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn resolve_path(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&path);
    }
}

/// Read a run config, resolving every relative path against the config
/// file's own directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
    let mut config: RunConfig = serde_json::from_slice(&bytes)
        .map_err(|e| Error::InvalidConfig(format!("invalid config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    resolve_path(&base, &mut config.corpus.tables);
    resolve_path(&base, &mut config.corpus.passages);
    resolve_path(&base, &mut config.corpus.questions);
    resolve_path(&base, &mut config.out_dir);
    for opt in [
        &mut config.cache_dir,
        &mut config.templates_dir,
        &mut config.shots_qa,
        &mut config.shots_decompose,
    ] {
        if let Some(p) = opt.as_mut() {
            resolve_path(&base, p);
        }
    }
    for spec in config.backends.values_mut() {
        if let BackendSpec::Mock {
            script: Some(script),
            ..
        } = spec
        {
            resolve_path(&base, script);
        }
    }
    if config.workers == 0 {
        return Err(Error::InvalidConfig("workers must be at least 1".into()));
    }
    Ok(config)
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything loaded and wired for a run.
struct RunEnv {
    corpus: Corpus,
    backends: BackendSet,
    counters: BTreeMap<String, Arc<CountingBackend>>,
    templates: PromptLibrary,
    shots: ShotSet,
    /// The semantics of the run — what it computes, not how it executes.
    /// Hashing this (and embedding it in reports) deliberately excludes
    /// out_dir, workers, parallelism, cache and selection knobs, so runs
    /// that differ only in execution produce byte-identical reports.
    semantic_config: serde_json::Value,
    config_hash: String,
}

fn build_backend(
    name: &str,
    spec: &BackendSpec,
    cache: Option<&CacheStore>,
) -> Result<(Arc<dyn ModelBackend>, Arc<CountingBackend>)> {
    let real: Arc<dyn ModelBackend> = match spec {
        BackendSpec::Mock { script: None, .. } => Arc::new(MockBackend::new(name)),
        BackendSpec::Mock {
            script: Some(path), ..
        } => Arc::new(MockBackend::from_script_file(name, path)?),
        BackendSpec::Http {
            base_url,
            model,
            embedding_model,
            api_key_env,
            timeout_s,
            max_retries,
            backoff_ms,
            ..
        } => Arc::new(HttpBackend::new(
            name,
            HttpBackendConfig {
                base_url: base_url.clone(),
                model: model.clone(),
                embedding_model: embedding_model.clone(),
                api_key_env: api_key_env.clone(),
                timeout_s: *timeout_s,
                max_retries: *max_retries,
                backoff_ms: *backoff_ms,
            },
        )?),
    };
    // Counting sits closest to the real backend so cache hits don't count;
    // throttling gates live calls only; the cache short-circuits first.
    let counting = CountingBackend::wrap(real);
    let throttled: Arc<dyn ModelBackend> =
        ThrottledBackend::wrap(counting.clone(), spec.parallelism());
    let outer = match cache {
        Some(store) => CachedBackend::wrap(throttled, store.clone()) as Arc<dyn ModelBackend>,
        None => throttled,
    };
    Ok((outer, counting))
}

fn semantic_config(config: &RunConfig, templates: &PromptLibrary) -> Result<serde_json::Value> {
    let mut backends = serde_json::Map::new();
    for (name, spec) in &config.backends {
        let mut entry = serde_json::Map::new();
        entry.insert("kind".into(), spec.kind().into());
        if let Some(model) = spec.model() {
            entry.insert("model".into(), model.into());
        }
        if let BackendSpec::Mock {
            script: Some(path), ..
        } = spec
        {
            entry.insert("script_sha256".into(), file_sha256(path)?.into());
        }
        backends.insert(name.clone(), entry.into());
    }
    let shots_qa = match &config.shots_qa {
        Some(p) => file_sha256(p)?,
        None => "builtin".to_string(),
    };
    let shots_decompose = match &config.shots_decompose {
        Some(p) => file_sha256(p)?,
        None => "builtin".to_string(),
    };
    Ok(serde_json::json!({
        "corpus": {
            "name": config.corpus.name,
            "tables_sha256": file_sha256(&config.corpus.tables)?,
            "passages_sha256": file_sha256(&config.corpus.passages)?,
            "questions_sha256": file_sha256(&config.corpus.questions)?,
        },
        "retriever": config.retriever,
        "reader": config.reader,
        "backends": backends,
        "routing": config.routing,
        "templates": templates.hashes(),
        "shots": {"qa": shots_qa, "decompose": shots_decompose},
    }))
}

fn prepare(config: &RunConfig) -> Result<RunEnv> {
    let templates = match &config.templates_dir {
        Some(dir) => PromptLibrary::from_dir(dir)?,
        None => PromptLibrary::builtin(),
    };
    let shots = match (&config.shots_qa, &config.shots_decompose) {
        (Some(qa), Some(de)) => ShotSet::from_files(qa, de)?,
        (None, None) => ShotSet::builtin(),
        _ => {
            return Err(Error::InvalidConfig(
                "shots_qa and shots_decompose must be given together".into(),
            ))
        }
    };
    config.retriever.validate()?;
    config.reader.validate(&shots)?;

    let load = load_named(
        &config.corpus.name,
        &config.corpus.tables,
        &config.corpus.passages,
        &config.corpus.questions,
    )?;
    for warning in &load.report.warnings {
        log::warn!("{warning}");
    }

    let cache = match &config.cache_dir {
        Some(dir) => Some(CacheStore::open(dir)?),
        None => None,
    };
    let mut backends: BTreeMap<String, Arc<dyn ModelBackend>> = BTreeMap::new();
    let mut counters = BTreeMap::new();
    for (name, spec) in &config.backends {
        let (backend, counter) = build_backend(name, spec, cache.as_ref())?;
        backends.insert(name.clone(), backend);
        counters.insert(name.clone(), counter);
    }
    let backends = BackendSet::new(backends, config.routing.clone())?;

    let semantic = semantic_config(config, &templates)?;
    let config_hash = hex(&Sha256::digest(serde_json::to_string(&semantic)?.as_bytes()));

    Ok(RunEnv {
        corpus: load.corpus,
        backends,
        counters,
        templates,
        shots,
        semantic_config: semantic,
        config_hash,
    })
}

/// The questions a config selects, in corpus order. Explicit ids win over
/// the limit; a limit below the corpus size picks a seeded random subset.
fn select_questions(corpus: &Corpus, config: &RunConfig) -> Result<Vec<Question>> {
    if !config.ids.is_empty() {
        let mut seen = BTreeSet::new();
        let mut picked = Vec::new();
        for id in &config.ids {
            let q = corpus.question(id)?;
            if seen.insert(&q.id) {
                picked.push(q.clone());
            }
        }
        return Ok(picked);
    }
    let mut indices: Vec<usize> = (0..corpus.questions.len()).collect();
    if let Some(limit) = config.limit {
        if limit < indices.len() {
            // Fisher–Yates with a seeded stream; selection must not depend
            // on process state.
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
            for i in (1..indices.len()).rev() {
                let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                indices.swap(i, j);
            }
            indices.truncate(limit);
            indices.sort_unstable();
        }
    }
    Ok(indices
        .into_iter()
        .map(|i| corpus.questions[i].clone())
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Start timestamp plus config hash prefix; kept across resumes.
    pub run_id: String,
    pub config_hash: String,
    pub started_at_ms: u64,
    /// Wall clock of the most recent invocation.
    pub wall_ms: u64,
    /// Questions selected by the most recent invocation.
    pub requested: usize,
    /// Question id → "ok" or "failed:<stage>", covering every persisted
    /// trace.
    pub statuses: BTreeMap<String, String>,
    /// Live backend invocations made by the most recent invocation (cache
    /// hits excluded).
    pub backend_calls: BTreeMap<String, BackendCounts>,
    /// The full resolved config, so a run directory is self-describing.
    pub config: serde_json::Value,
    /// The semantic snapshot the hash covers; also embedded in reports.
    pub semantic_config: serde_json::Value,
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

fn read_manifest(dir: &Path) -> Result<Option<RunManifest>> {
    let path = manifest_path(dir);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(&path)?;
    let manifest = serde_json::from_slice(&bytes).map_err(|e| {
        Error::InvalidConfig(format!("corrupt manifest {}: {e}", path.display()))
    })?;
    Ok(Some(manifest))
}

/// Read a JSONL file of records, tolerating one torn final line (the write
/// that was cut off mid-crash); the torn tail is dropped with a warning.
/// Damage anywhere else is a hard error.
fn read_jsonl_tolerant<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let last_content = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut records = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(record) => records.push(record),
            Err(e) if Some(i) == last_content => {
                log::warn!(
                    "{}: dropping torn final line ({e})",
                    path.display()
                );
            }
            Err(e) => {
                return Err(Error::MalformedRecord {
                    path: path.display().to_string(),
                    record: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(records)
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Test hook: dispatch at most this many pending questions, simulating an
/// interrupted run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub stop_after: Option<usize>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub report: EvalReport,
    /// Selected questions answered cleanly this invocation or before.
    pub ok: usize,
    pub failed: usize,
    /// Selected questions skipped because a trace was already persisted.
    pub skipped: usize,
}

fn status_of(trace: &ReaderTrace) -> String {
    match trace.failed_stage {
        Some(stage) => format!("failed:{}", stage.name()),
        None => "ok".to_string(),
    }
}

/// Answer one question end to end. Never fails: a retrieval error becomes a
/// failed trace attributed to the stage that broke.
fn answer_one(
    env: &RunEnv,
    config: &RunConfig,
    question: &Question,
) -> (ReaderTrace, Option<RetrievalResult>) {
    let retrieval = match retrieve(
        &env.backends,
        &env.templates,
        question,
        &env.corpus,
        &config.retriever,
    ) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("retrieval failed for {}: {e}", question.id);
            let mut trace = ReaderTrace::empty(&question.id);
            trace.mode = config.reader.mode;
            trace.failed_stage = Some(e.stage().unwrap_or(Stage::Embed));
            trace.fallbacks.push(format!("retrieval failed: {e}"));
            return (trace, None);
        }
    };
    let reader_env = ReaderEnv {
        backends: &env.backends,
        templates: &env.templates,
        shots: &env.shots,
        config: &config.reader,
    };
    let trace = reader::run(&reader_env, question, &retrieval, &env.corpus);
    (trace, Some(retrieval))
}

pub fn cmd_run(config: &RunConfig) -> Result<RunOutcome> {
    cmd_run_with(config, &RunOptions::default())
}

pub fn cmd_run_with(config: &RunConfig, options: &RunOptions) -> Result<RunOutcome> {
    let start = Instant::now();
    let env = prepare(config)?;
    let out_dir = &config.out_dir;
    std::fs::create_dir_all(out_dir)?;

    let previous = read_manifest(out_dir)?;
    if let Some(prev) = &previous {
        if prev.config_hash != env.config_hash {
            return Err(Error::InvalidConfig(format!(
                "run directory {} was produced by config {} but this config hashes to {}; \
                 use a fresh out_dir for a different configuration",
                out_dir.display(),
                &prev.config_hash[..12.min(prev.config_hash.len())],
                &env.config_hash[..12],
            )));
        }
    }

    let traces_path = out_dir.join("traces.jsonl");
    let retrievals_path = out_dir.join("retrievals.jsonl");
    let mut traces: Vec<ReaderTrace> = read_jsonl_tolerant(&traces_path)?;
    let mut retrievals: Vec<RetrievalResult> = read_jsonl_tolerant(&retrievals_path)?;

    // The trace is the commit record. Drop retrievals whose question never
    // committed (crash between the two writes) and compact the file so the
    // rerun can append a fresh copy without duplicating.
    let done: BTreeSet<String> = traces.iter().map(|t| t.question_id.clone()).collect();
    let before = retrievals.len();
    retrievals.retain(|r| done.contains(&r.question_id));
    if retrievals.len() != before {
        log::warn!(
            "{}: dropped {} uncommitted retrieval record(s)",
            retrievals_path.display(),
            before - retrievals.len()
        );
        let mut file = std::fs::File::create(&retrievals_path)?;
        for r in &retrievals {
            serde_json::to_writer(&mut file, r)?;
            file.write_all(b"\n")?;
        }
    }

    let selected = select_questions(&env.corpus, config)?;
    let mut pending: Vec<Question> = selected
        .iter()
        .filter(|q| !done.contains(&q.id))
        .cloned()
        .collect();
    let skipped = selected.len() - pending.len();
    if let Some(n) = options.stop_after {
        pending.truncate(n);
    }

    // Bounded worker pool; one writer (this thread) serializes all file
    // appends and flushes after each question so progress survives a kill.
    if !pending.is_empty() {
        let mut traces_file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&traces_path)?;
        let mut retrievals_file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&retrievals_path)?;
        let queue = Mutex::new(pending.iter().cloned().collect::<VecDeque<_>>());
        let (tx, rx) = mpsc::channel::<(ReaderTrace, Option<RetrievalResult>)>();
        let workers = config.workers.min(pending.len()).max(1);
        std::thread::scope(|scope| -> Result<()> {
            for _ in 0..workers {
                let tx = tx.clone();
                let queue = &queue;
                let env = &env;
                scope.spawn(move || {
                    loop {
                        let question = match queue.lock().unwrap().pop_front() {
                            Some(q) => q,
                            None => break,
                        };
                        let result = answer_one(env, config, &question);
                        if tx.send(result).is_err() {
                            break;
                        }
                    }
                });
            }
            drop(tx);
            for (trace, retrieval) in rx {
                // Retrieval first, trace second: the trace commits the pair.
                if let Some(r) = &retrieval {
                    serde_json::to_writer(&mut retrievals_file, r)?;
                    retrievals_file.write_all(b"\n")?;
                    retrievals_file.flush()?;
                    retrievals.push(r.clone());
                }
                serde_json::to_writer(&mut traces_file, &trace)?;
                traces_file.write_all(b"\n")?;
                traces_file.flush()?;
                traces.push(trace);
            }
            Ok(())
        })?;
    }

    // Manifest covers everything persisted in the directory, not only this
    // invocation's additions.
    let mut statuses = BTreeMap::new();
    for trace in &traces {
        statuses.insert(trace.question_id.clone(), status_of(trace));
    }
    let backend_calls: BTreeMap<String, BackendCounts> = env
        .counters
        .iter()
        .map(|(name, counter)| (name.clone(), counter.counts()))
        .collect();
    let (run_id, started_at_ms) = match &previous {
        Some(prev) => (prev.run_id.clone(), prev.started_at_ms),
        None => {
            let started = now_ms();
            (format!("{}-{}", started, &env.config_hash[..12]), started)
        }
    };
    let manifest = RunManifest {
        run_id,
        config_hash: env.config_hash.clone(),
        started_at_ms,
        wall_ms: start.elapsed().as_millis() as u64,
        requested: selected.len(),
        statuses: statuses.clone(),
        backend_calls,
        config: serde_json::to_value(config)?,
        semantic_config: env.semantic_config.clone(),
    };
    write_json_pretty(&manifest_path(out_dir), &manifest)?;

    let report = evaluate_run(&traces, &retrievals, &env.corpus, env.semantic_config.clone())?;
    write_json_pretty(&out_dir.join("report.json"), &report)?;
    std::fs::write(&out_dir.join("report.txt"), render_report_text(&report))?;

    let ok = selected
        .iter()
        .filter(|q| statuses.get(&q.id).map(String::as_str) == Some("ok"))
        .count();
    let failed = selected.len() - ok;
    if !selected.is_empty() && ok == 0 {
        return Err(Error::TotalFailure {
            total: selected.len(),
        });
    }
    Ok(RunOutcome {
        out_dir: out_dir.clone(),
        report,
        ok,
        failed,
        skipped,
    })
}

/// Re-score an existing run directory from its persisted traces. Also
/// rewrites `report.json` / `report.txt` and returns the aggregate line that
/// callers print.
pub fn cmd_eval(run_dir: impl AsRef<Path>) -> Result<EvalReport> {
    let run_dir = run_dir.as_ref();
    let manifest = read_manifest(run_dir)?.ok_or_else(|| {
        Error::InvalidConfig(format!("{} is not a run directory (no manifest)", run_dir.display()))
    })?;
    let config: RunConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::InvalidConfig(format!("manifest config does not parse: {e}")))?;
    let load = load_named(
        &config.corpus.name,
        &config.corpus.tables,
        &config.corpus.passages,
        &config.corpus.questions,
    )?;
    let traces: Vec<ReaderTrace> = read_jsonl_tolerant(&run_dir.join("traces.jsonl"))?;
    let retrievals: Vec<RetrievalResult> =
        read_jsonl_tolerant(&run_dir.join("retrievals.jsonl"))?;

    // Every question the manifest promised must have committed.
    let have: BTreeSet<&str> = traces.iter().map(|t| t.question_id.as_str()).collect();
    let missing: Vec<String> = manifest
        .statuses
        .keys()
        .filter(|id| !have.contains(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTrace {
            question_ids: missing,
        });
    }

    let report = evaluate_run(
        &traces,
        &retrievals,
        &load.corpus,
        manifest.semantic_config.clone(),
    )?;
    write_json_pretty(&run_dir.join("report.json"), &report)?;
    std::fs::write(run_dir.join("report.txt"), render_report_text(&report))?;
    Ok(report)
}

/// Run (or resume) each config and produce the side-by-side comparison.
/// Labels are the config file stems; the first config is the baseline.
pub fn cmd_ablate(
    config_paths: &[PathBuf],
    out_dir: Option<&Path>,
) -> Result<(AblationTable, String)> {
    if config_paths.is_empty() {
        return Err(Error::InvalidConfig("ablate needs at least one config".into()));
    }
    let mut labeled: Vec<(String, EvalReport)> = Vec::new();
    for path in config_paths {
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let config = load_config(path)?;
        let outcome = cmd_run(&config)?;
        labeled.push((label, outcome.report));
    }
    let refs: Vec<(String, &EvalReport)> = labeled
        .iter()
        .map(|(label, report)| (label.clone(), report))
        .collect();
    let table = compare_ablations(&refs)?;
    let text = render_ablation_text(&table);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_json_pretty(&dir.join("ablation.json"), &table)?;
        std::fs::write(dir.join("ablation.txt"), &text)?;
    }
    Ok((table, text))
}

fn indent(text: &str) -> String {
    text.lines()
        .map(|l| format!("    {l}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Human-readable dump of one question's full pipeline record.
pub fn cmd_trace(run_dir: impl AsRef<Path>, question_id: &str) -> Result<String> {
    let run_dir = run_dir.as_ref();
    let traces: Vec<ReaderTrace> = read_jsonl_tolerant(&run_dir.join("traces.jsonl"))?;
    let retrievals: Vec<RetrievalResult> =
        read_jsonl_tolerant(&run_dir.join("retrievals.jsonl"))?;
    let Some(trace) = traces.iter().find(|t| t.question_id == question_id) else {
        let mut nearest: Vec<String> = traces
            .iter()
            .map(|t| t.question_id.clone())
            .filter(|id| {
                id.bytes()
                    .zip(question_id.bytes())
                    .take_while(|(a, b)| a == b)
                    .count()
                    >= 3
            })
            .take(3)
            .collect();
        nearest.sort();
        return Err(Error::UnknownQuestion {
            question_id: question_id.to_string(),
            nearest,
        });
    };

    let mut out = format!("question {} (mode {})\n", trace.question_id, trace.mode);
    if let Some(retrieval) = retrievals.iter().find(|r| r.question_id == question_id) {
        out.push_str("== retrieval ==\n");
        if !retrieval.keywords.is_empty() {
            out.push_str(&format!("  keywords: {}\n", retrieval.keywords.join(", ")));
        }
        for (i, row) in retrieval.rows.iter().enumerate() {
            out.push_str(&format!(
                "  row {} [{} #{}, score {:.4}]: {}\n",
                i + 1,
                row.table_id,
                row.row_index,
                row.score,
                row.sentence
            ));
        }
        for (i, p) in retrieval.passages.iter().enumerate() {
            out.push_str(&format!(
                "  passage {} [{} from row #{}, score {:.4}]\n",
                i + 1,
                p.passage_id,
                p.source_row_index,
                p.score
            ));
        }
    }
    for stage in Stage::ALL {
        let name = stage.name();
        let Some(prompt) = trace.prompts.get(name) else {
            continue;
        };
        out.push_str(&format!("== {name} ==\n  prompt:\n{}\n", indent(prompt)));
        if let Some(samples) = trace.completions.get(name) {
            for (i, sample) in samples.iter().enumerate() {
                out.push_str(&format!("  completion {}:\n{}\n", i + 1, indent(sample)));
            }
        }
    }
    if !trace.summary.is_empty() {
        out.push_str(&format!("summary: {}\n", trace.summary));
    }
    if !trace.sub_question.is_empty() {
        out.push_str(&format!("sub-question: {}\n", trace.sub_question));
    }
    if !trace.sub_answer.is_empty() {
        out.push_str(&format!("sub-answer: {}\n", trace.sub_answer));
    }
    if let Some(entity) = trace.entity_type_main {
        out.push_str(&format!("expected answer type: {entity}\n"));
    }
    if trace.votes.len() > 1 {
        out.push_str("votes:\n");
        for (answer, count) in &trace.votes {
            out.push_str(&format!("  {count} × {answer:?}\n"));
        }
    }
    match trace.failed_stage {
        Some(stage) => out.push_str(&format!("FAILED at stage {stage}\n")),
        None => out.push_str(&format!("final answer: {}\n", trace.final_answer)),
    }
    for note in &trace.fallbacks {
        out.push_str(&format!("fallback: {note}\n"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockScript, ScriptRule};
    use crate::corpus::{Cell, Passage, Split, Table};
    use crate::reader::ReaderMode;
    use tempfile::TempDir;

    fn fixture_corpus() -> Corpus {
        let table = Table {
            id: "t_clubs".into(),
            page_title: "Football clubs".into(),
            section_title: "Season 1999".into(),
            headers: vec!["Club".into(), "City".into()],
            rows: vec![
                vec![Cell::linked("Alpha FC", &["p_alpha"]), Cell::text("Paris")],
                vec![
                    Cell::linked("Beta United", &["p_beta"]),
                    Cell::text("London"),
                ],
                vec![Cell::text("Gamma Town"), Cell::text("Berlin")],
            ],
        };
        let passages = [
            Passage {
                id: "p_alpha".into(),
                title: "Alpha FC".into(),
                text: "Alpha FC plays at the Grand Stadium in Paris.".into(),
            },
            Passage {
                id: "p_beta".into(),
                title: "Beta United".into(),
                text: "Beta United was founded in 1900.".into(),
            },
        ];
        let questions = [
            ("q1", "Which city is home to Alpha FC ?", "Paris"),
            ("q2", "When was Beta United founded ?", "1900"),
            ("q3", "Which city is home to Gamma Town ?", "Berlin"),
        ];
        Corpus {
            name: "clubs-mini".into(),
            tables: [(table.id.clone(), table)].into(),
            passages: passages
                .into_iter()
                .map(|p| (p.id.clone(), p))
                .collect(),
            questions: questions
                .into_iter()
                .map(|(id, text, gold)| Question {
                    id: id.into(),
                    text: text.into(),
                    gold_answer: gold.into(),
                    table_id: "t_clubs".into(),
                    split: Split::Dev,
                })
                .collect(),
        }
    }

    fn answer_script() -> MockScript {
        // Rules key on the question text: with a three-row table every
        // prompt carries every row, so entity names don't discriminate.
        let qa = |needle: &str, answer: &str| ScriptRule {
            contains: vec!["Give a short answer.".into(), needle.into()],
            responses: vec![format!("The answer is {answer}.")],
            ..ScriptRule::default()
        };
        MockScript {
            rules: vec![
                qa("Which city is home to Alpha FC", "Paris"),
                qa("When was Beta United founded", "1900"),
                qa("Which city is home to Gamma Town", "Berlin"),
            ],
            default: None,
        }
    }

    /// Lay out corpus files and a mock script under `dir`, returning a
    /// ready-to-run config.
    fn fixture_config(dir: &Path, script: &MockScript) -> RunConfig {
        let corpus_dir = dir.join("corpus");
        crate::corpus::write_canonical(&fixture_corpus(), &corpus_dir).unwrap();
        let script_path = dir.join("script.json");
        std::fs::write(&script_path, serde_json::to_string_pretty(script).unwrap()).unwrap();
        RunConfig {
            corpus: CorpusPaths {
                name: "clubs-mini".into(),
                tables: corpus_dir.join("tables.jsonl"),
                passages: corpus_dir.join("passages.jsonl"),
                questions: corpus_dir.join("questions.jsonl"),
            },
            retriever: RetrieverConfig::default(),
            reader: ReaderConfig::default(),
            backends: [(
                "default".to_string(),
                BackendSpec::Mock {
                    script: Some(script_path),
                    parallelism: 2,
                },
            )]
            .into(),
            routing: BTreeMap::new(),
            cache_dir: None,
            out_dir: dir.join("run"),
            templates_dir: None,
            shots_qa: None,
            shots_decompose: None,
            limit: None,
            ids: Vec::new(),
            seed: 0,
            workers: 2,
        }
    }

    #[test]
    fn full_run_writes_reports_and_manifest() {
        let dir = TempDir::new().unwrap();
        let config = fixture_config(dir.path(), &answer_script());
        let outcome = cmd_run(&config).unwrap();

        assert_eq!((outcome.ok, outcome.failed, outcome.skipped), (3, 0, 0));
        assert_eq!(outcome.report.aggregates.em, 100.0);
        assert_eq!(outcome.report.per_question.len(), 3);

        let run = dir.path().join("run");
        for file in [
            "manifest.json",
            "traces.jsonl",
            "retrievals.jsonl",
            "report.json",
            "report.txt",
        ] {
            assert!(run.join(file).exists(), "missing {file}");
        }
        let manifest = read_manifest(&run).unwrap().unwrap();
        assert_eq!(manifest.requested, 3);
        assert!(manifest.statuses.values().all(|s| s == "ok"));
        let counts = &manifest.backend_calls["default"];
        // One main-QA generation per question; embeddings for the question,
        // rows, and blended passage query all count.
        assert_eq!(counts.generate, 3);
        assert!(counts.embed > 0);
    }

    #[test]
    fn rerun_skips_committed_questions_and_keeps_run_id() {
        let dir = TempDir::new().unwrap();
        let config = fixture_config(dir.path(), &answer_script());
        cmd_run(&config).unwrap();
        let first = read_manifest(&config.out_dir).unwrap().unwrap();

        let outcome = cmd_run(&config).unwrap();
        assert_eq!((outcome.ok, outcome.failed, outcome.skipped), (3, 0, 3));
        let second = read_manifest(&config.out_dir).unwrap().unwrap();
        assert_eq!(second.run_id, first.run_id);
        assert_eq!(second.started_at_ms, first.started_at_ms);
        // Nothing ran, so no backend was touched.
        assert_eq!(second.backend_calls["default"].total(), 0);
    }

    #[test]
    fn interrupted_run_resumes_to_the_same_report() {
        let dir = TempDir::new().unwrap();
        let mut config = fixture_config(dir.path(), &answer_script());

        config.out_dir = dir.path().join("run_interrupted");
        let partial = cmd_run_with(
            &config,
            &RunOptions {
                stop_after: Some(1),
            },
        );
        // One of three answered: a partial run is still a valid run.
        assert_eq!(partial.unwrap().ok, 1);
        assert_eq!(
            std::fs::read_to_string(config.out_dir.join("traces.jsonl"))
                .unwrap()
                .lines()
                .count(),
            1
        );
        let resumed = cmd_run(&config).unwrap();
        assert_eq!((resumed.ok, resumed.skipped), (3, 1));
        let interrupted_report =
            std::fs::read(config.out_dir.join("report.json")).unwrap();

        config.out_dir = dir.path().join("run_straight");
        cmd_run(&config).unwrap();
        let straight_report = std::fs::read(config.out_dir.join("report.json")).unwrap();
        assert_eq!(interrupted_report, straight_report);
    }

    #[test]
    fn report_bytes_do_not_depend_on_worker_count() {
        let dir = TempDir::new().unwrap();
        let mut config = fixture_config(dir.path(), &answer_script());

        config.workers = 1;
        config.out_dir = dir.path().join("run_serial");
        cmd_run(&config).unwrap();
        let serial = std::fs::read(config.out_dir.join("report.json")).unwrap();

        config.workers = 4;
        config.out_dir = dir.path().join("run_parallel");
        cmd_run(&config).unwrap();
        let parallel = std::fs::read(config.out_dir.join("report.json")).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn changed_config_cannot_reuse_a_run_directory() {
        let dir = TempDir::new().unwrap();
        let mut config = fixture_config(dir.path(), &answer_script());
        cmd_run(&config).unwrap();

        config.retriever.alpha = 0.5;
        let err = cmd_run(&config).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        assert!(err.to_string().contains("fresh out_dir"), "{err}");

        // Execution-only knobs do not invalidate the directory.
        let mut config = fixture_config(dir.path(), &answer_script());
        config.workers = 7;
        config.seed = 99;
        let outcome = cmd_run(&config).unwrap();
        assert_eq!(outcome.skipped, 3);
    }

    #[test]
    fn uncommitted_retrieval_is_dropped_on_resume() {
        let dir = TempDir::new().unwrap();
        let config = fixture_config(dir.path(), &answer_script());
        cmd_run_with(
            &config,
            &RunOptions {
                stop_after: Some(1),
            },
        )
        .unwrap();

        // Simulate a crash between the retrieval write and the trace write:
        // an orphan retrieval line for a question with no trace.
        let retrievals_path = config.out_dir.join("retrievals.jsonl");
        let existing: Vec<RetrievalResult> = read_jsonl_tolerant(&retrievals_path).unwrap();
        let committed = existing[0].question_id.clone();
        let mut orphan = existing[0].clone();
        orphan.question_id = if committed == "q1" { "q2" } else { "q1" }.to_string();
        let mut file = std::fs::OpenOptions::new()
            .append(true)
            .open(&retrievals_path)
            .unwrap();
        serde_json::to_writer(&mut file, &orphan).unwrap();
        file.write_all(b"\n").unwrap();
        drop(file);

        let outcome = cmd_run(&config).unwrap();
        assert_eq!(outcome.ok, 3);
        let final_retrievals: Vec<RetrievalResult> =
            read_jsonl_tolerant(&retrievals_path).unwrap();
        let mut ids: Vec<&str> = final_retrievals
            .iter()
            .map(|r| r.question_id.as_str())
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, ["q1", "q2", "q3"]);
    }

    #[test]
    fn torn_final_trace_line_is_recovered() {
        let dir = TempDir::new().unwrap();
        let config = fixture_config(dir.path(), &answer_script());
        cmd_run_with(
            &config,
            &RunOptions {
                stop_after: Some(2),
            },
        )
        .unwrap();

        let traces_path = config.out_dir.join("traces.jsonl");
        let mut text = std::fs::read_to_string(&traces_path).unwrap();
        let keep = text.lines().next().unwrap().len();
        text.truncate(keep + 1 + 40); // second record cut mid-write
        std::fs::write(&traces_path, text).unwrap();

        // The torn question is simply re-run.
        let outcome = cmd_run(&config).unwrap();
        assert_eq!((outcome.ok, outcome.skipped), (3, 1));
    }

    #[test]
    fn run_with_no_successful_question_is_an_error() {
        let dir = TempDir::new().unwrap();
        let script = MockScript {
            rules: vec![ScriptRule {
                contains: Vec::new(),
                fail: true,
                ..ScriptRule::default()
            }],
            default: None,
        };
        let config = fixture_config(dir.path(), &script);
        let err = cmd_run(&config).unwrap_err();
        assert!(matches!(err, Error::TotalFailure { total: 3 }), "{err}");

        // Failures are still persisted and attributed.
        let manifest = read_manifest(&config.out_dir).unwrap().unwrap();
        assert!(manifest
            .statuses
            .values()
            .all(|s| s == "failed:main_qa"));
    }

    #[test]
    fn eval_rescoring_matches_the_original_report() {
        let dir = TempDir::new().unwrap();
        let config = fixture_config(dir.path(), &answer_script());
        let outcome = cmd_run(&config).unwrap();

        std::fs::remove_file(config.out_dir.join("report.json")).unwrap();
        let rescored = cmd_eval(&config.out_dir).unwrap();
        assert_eq!(rescored.aggregates, outcome.report.aggregates);
        assert!(config.out_dir.join("report.json").exists());

        let empty = TempDir::new().unwrap();
        let err = cmd_eval(empty.path()).unwrap_err();
        assert!(err.to_string().contains("not a run directory"), "{err}");
    }

    #[test]
    fn trace_dump_shows_the_full_pipeline_record() {
        let dir = TempDir::new().unwrap();
        let config = fixture_config(dir.path(), &answer_script());
        cmd_run(&config).unwrap();

        let text = cmd_trace(&config.out_dir, "q1").unwrap();
        assert!(text.contains("question q1 (mode standard)"), "{text}");
        assert!(text.contains("== retrieval =="), "{text}");
        assert!(text.contains("row 1 ["), "{text}");
        assert!(text.contains("== main_qa =="), "{text}");
        assert!(text.contains("Give a short answer."), "{text}");
        assert!(text.contains("final answer: Paris"), "{text}");

        let err = cmd_trace(&config.out_dir, "zzz").unwrap_err();
        assert!(matches!(err, Error::UnknownQuestion { .. }));
    }

    #[test]
    fn ablation_runs_configs_and_compares_to_the_first() {
        let dir = TempDir::new().unwrap();
        let base = fixture_config(dir.path(), &answer_script());

        // Variant: same corpus and script, chain-of-thought reading. The
        // standard-mode script rules still match because the instruction
        // line is shared between the two prompt shapes.
        let mut variant = base.clone();
        variant.reader.mode = ReaderMode::Cot;
        variant.out_dir = dir.path().join("run_cot");

        let write = |name: &str, config: &RunConfig| -> PathBuf {
            let path = dir.path().join(name);
            std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
            path
        };
        let paths = [
            write("standard.json", &base),
            write("cot.json", &variant),
        ];

        let out = dir.path().join("ablation");
        let (table, text) = cmd_ablate(&paths, Some(&out)).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].label, "standard");
        assert_eq!(table.rows[1].label, "cot");
        assert!(text.contains("standard"), "{text}");
        assert!(out.join("ablation.json").exists());
        assert!(out.join("ablation.txt").exists());
    }

    #[test]
    fn explicit_ids_and_seeded_limit_pick_questions() {
        let corpus = fixture_corpus();
        let dir = TempDir::new().unwrap();
        let mut config = fixture_config(dir.path(), &answer_script());

        config.ids = vec!["q3".into(), "q1".into(), "q3".into()];
        let picked = select_questions(&corpus, &config).unwrap();
        let ids: Vec<&str> = picked.iter().map(|q| q.id.as_str()).collect();
        assert_eq!(ids, ["q3", "q1"]);

        config.ids = vec!["q9".into()];
        assert!(matches!(
            select_questions(&corpus, &config).unwrap_err(),
            Error::UnknownQuestion { .. }
        ));

        config.ids.clear();
        config.limit = Some(2);
        config.seed = 7;
        let first = select_questions(&corpus, &config).unwrap();
        assert_eq!(first.len(), 2);
        let again = select_questions(&corpus, &config).unwrap();
        assert_eq!(
            first.iter().map(|q| &q.id).collect::<Vec<_>>(),
            again.iter().map(|q| &q.id).collect::<Vec<_>>()
        );
        // Selection keeps corpus order regardless of shuffle order.
        let positions: Vec<usize> = first
            .iter()
            .map(|q| corpus.questions.iter().position(|c| c.id == q.id).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));

        config.limit = Some(10);
        assert_eq!(select_questions(&corpus, &config).unwrap().len(), 3);
    }

    #[test]
    fn config_paths_resolve_against_the_config_file() {
        let dir = TempDir::new().unwrap();
        crate::corpus::write_canonical(&fixture_corpus(), &dir.path().join("corpus")).unwrap();
        std::fs::write(
            dir.path().join("script.json"),
            serde_json::to_string(&answer_script()).unwrap(),
        )
        .unwrap();
        let config_json = serde_json::json!({
            "corpus": {
                "name": "clubs-mini",
                "tables": "corpus/tables.jsonl",
                "passages": "corpus/passages.jsonl",
                "questions": "corpus/questions.jsonl",
            },
            "backends": {
                "default": {"kind": "mock", "script": "script.json"}
            },
            "out_dir": "run",
        });
        let path = dir.path().join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&config_json).unwrap()).unwrap();

        let config = load_config(&path).unwrap();
        assert_eq!(config.corpus.tables, dir.path().join("corpus/tables.jsonl"));
        assert_eq!(config.out_dir, dir.path().join("run"));
        match &config.backends["default"] {
            BackendSpec::Mock {
                script: Some(script),
                ..
            } => assert_eq!(script, &dir.path().join("script.json")),
            other => panic!("unexpected backend {other:?}"),
        }
        // Defaults fill the rest.
        assert_eq!(config.workers, 4);
        assert_eq!(config.reader.mode, ReaderMode::Standard);

        // And the resolved config actually runs.
        let outcome = cmd_run(&config).unwrap();
        assert_eq!(outcome.ok, 3);
    }

    #[test]
    fn response_cache_makes_reruns_free_and_fresh_dirs_cheap() {
        let dir = TempDir::new().unwrap();
        let mut config = fixture_config(dir.path(), &answer_script());
        config.cache_dir = Some(dir.path().join("cache"));

        cmd_run(&config).unwrap();
        let first = read_manifest(&config.out_dir).unwrap().unwrap();
        let live_first = first.backend_calls["default"].total();
        assert!(live_first > 0);

        // Same semantics into a fresh directory: every model call is a
        // cache hit, so zero live calls.
        config.out_dir = dir.path().join("run2");
        cmd_run(&config).unwrap();
        let second = read_manifest(&config.out_dir).unwrap().unwrap();
        assert_eq!(second.backend_calls["default"].total(), 0);

        // Identical reports either way.
        let a = std::fs::read(dir.path().join("run/report.json")).unwrap();
        let b = std::fs::read(dir.path().join("run2/report.json")).unwrap();
        assert_eq!(a, b);
    }
}
