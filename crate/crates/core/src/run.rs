//! Run configuration and the run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! run.json                  config snapshot, prompt and dataset hashes
//! prompts.json              the prompt set used
//! cases/<id>.jsonl          retained test cases
//! trajectories/<id>.jsonl   calculator chain steps (testchain only)
//! requests/<id>.jsonl       every outbound provider request
//! results/<id>.json         full generation result, written last
//! eval/questions/<id>.json  per-question metrics
//! eval/report.json          dataset report
//! eval/report.txt           rendered table
//! ```
//!
//! `<id>` is the task id with every character outside `[A-Za-z0-9._-]`
//! replaced by `_`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Agents, GenerationResult, GenerationSettings, Shot, Strategy};
use crate::chain::{ChainOptions, DEFAULT_MAX_ROUNDS};
use crate::dataset::{load_dataset, strip_examples, Dataset, DatasetError, DEFAULT_MAX_CASES};
use crate::llm::{ChatProvider, HttpProvider, HttpSettings, LoggedProvider, RetryPolicy, SamplingConfig, ScriptBook};
use crate::metrics::{
    aggregate, evaluate_question, load_faulty_programs, mutate_canonical, DatasetReport, EvalOptions,
    FaultyProgramSet, MetricSet, MetricsError, QuestionReport, DEFAULT_FAULTY_COUNT,
};
use crate::prompts::{PromptError, PromptSet};
use crate::sandbox::{SandboxConfig, SandboxError, SandboxSession};
use crate::testcase::CaseSet;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Mismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: String,
    pub model: String,
    pub request_timeout_secs: u64,
    pub retry: RetryPolicy,
    /// JSON object `{task_id: [reply, ...]}` for the scripted provider.
    pub scripts: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Http,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4-0613".into(),
            request_timeout_secs: 120,
            retry: RetryPolicy::default(),
            scripts: None,
        }
    }
}

/// Everything a run needs. Loaded from TOML; absent keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub strategy: Strategy,
    pub provider: ProviderConfig,
    pub sampling: SamplingConfig,
    pub cap: usize,
    pub test_time_limit_ms: u64,
    pub max_rounds: usize,
    pub snippet_time_limit_ms: u64,
    pub designer_max_inputs: usize,
    pub chain_shot: Shot,
    pub faulty_count: usize,
    pub faulty_file: Option<PathBuf>,
    pub seed: u64,
    pub jobs: usize,
    pub interpreter: PathBuf,
    pub prompts: Option<PathBuf>,
    pub metrics: String,
    pub run_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            strategy: Strategy::TestChain,
            provider: ProviderConfig::default(),
            sampling: SamplingConfig::default(),
            cap: DEFAULT_MAX_CASES,
            test_time_limit_ms: 1000,
            max_rounds: DEFAULT_MAX_ROUNDS,
            snippet_time_limit_ms: 10_000,
            designer_max_inputs: 8,
            chain_shot: Shot::One,
            faulty_count: DEFAULT_FAULTY_COUNT,
            faulty_file: None,
            seed: 0,
            jobs: 1,
            interpreter: PathBuf::from("python3"),
            prompts: None,
            metrics: "accuracy,coverage".into(),
            run_dir: None,
        }
    }
}

impl RunConfig {
    /// Parses a TOML file; relative paths in it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| RunError::Config { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for slot in [
            &mut config.dataset,
            &mut config.faulty_file,
            &mut config.prompts,
            &mut config.run_dir,
            &mut config.provider.scripts,
        ] {
            if let Some(p) = slot.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |message: &str| RunError::Config { path: PathBuf::from("<config>"), message: message.into() };
        self.sampling.validate().map_err(|e| bad(&e.to_string()))?;
        if self.cap == 0 {
            return Err(bad("cap must be at least 1"));
        }
        if self.max_rounds == 0 {
            return Err(bad("max_rounds must be at least 1"));
        }
        if self.jobs == 0 {
            return Err(bad("jobs must be at least 1"));
        }
        self.metric_set().map_err(|e| bad(&e.to_string()))?;
        Ok(())
    }

    pub fn metric_set(&self) -> Result<MetricSet, MetricsError> {
        self.metrics.parse()
    }

    pub fn test_time_limit(&self) -> Duration {
        Duration::from_millis(self.test_time_limit_ms)
    }

    pub fn generation_settings(&self, prompts: &PromptSet) -> GenerationSettings {
        GenerationSettings {
            sampling: self.sampling,
            cap: self.cap,
            designer_max_inputs: self.designer_max_inputs,
            chain_shot: self.chain_shot,
            chain: ChainOptions {
                max_rounds: self.max_rounds,
                snippet_time_limit: Duration::from_millis(self.snippet_time_limit_ms),
                go_on_prompt: prompts.go_on.clone(),
                final_prompt: prompts.final_prompt.clone(),
                sampling: self.sampling,
            },
        }
    }

    pub fn prompt_set(&self) -> Result<PromptSet, RunError> {
        Ok(match &self.prompts {
            Some(path) => PromptSet::load(path)?,
            None => PromptSet::default(),
        })
    }

    fn sandbox_config(&self) -> SandboxConfig {
        SandboxConfig::new(&self.interpreter)
    }
}

/// Provider(s) a generation run talks to.
pub enum ProviderSource {
    Shared(Box<dyn ChatProvider>),
    /// A fresh replay queue per question.
    Scripted(ScriptBook),
}

impl ProviderSource {
    pub fn from_config(config: &ProviderConfig) -> Result<Self, RunError> {
        match config.kind {
            ProviderKind::Http => Ok(ProviderSource::Shared(Box::new(HttpProvider::from_env(HttpSettings {
                endpoint: config.endpoint.clone(),
                model: config.model.clone(),
                request_timeout_secs: config.request_timeout_secs,
                retry: config.retry,
            })))),
            ProviderKind::Scripted => {
                let path = config.scripts.as_ref().ok_or_else(|| RunError::Config {
                    path: PathBuf::from("<config>"),
                    message: "scripted provider needs provider.scripts".into(),
                })?;
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                let book = ScriptBook::from_json(&text)
                    .map_err(|e| RunError::Json { path: path.clone(), message: e.to_string() })?;
                Ok(ProviderSource::Scripted(book))
            }
        }
    }
}

/// Snapshot stored as `run.json`. Holds no timestamps and no absolute paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub strategy: Strategy,
    pub dataset_name: String,
    pub dataset_hash: String,
    pub prompt_hash: String,
    pub provider_kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub sampling: SamplingConfig,
    pub cap: usize,
    pub test_time_limit_ms: u64,
    pub max_rounds: usize,
    pub snippet_time_limit_ms: u64,
    pub designer_max_inputs: usize,
    pub chain_shot: Shot,
    pub faulty_count: usize,
    pub seed: u64,
}

impl RunManifest {
    pub fn new(config: &RunConfig, dataset: &Dataset, prompts: &PromptSet) -> Self {
        RunManifest {
            strategy: config.strategy,
            dataset_name: dataset.name.clone(),
            dataset_hash: dataset.content_hash(),
            prompt_hash: prompts.hash(),
            provider_kind: config.provider.kind,
            model: (config.provider.kind == ProviderKind::Http).then(|| config.provider.model.clone()),
            sampling: config.sampling,
            cap: config.cap,
            test_time_limit_ms: config.test_time_limit_ms,
            max_rounds: config.max_rounds,
            snippet_time_limit_ms: config.snippet_time_limit_ms,
            designer_max_inputs: config.designer_max_inputs,
            chain_shot: config.chain_shot,
            faulty_count: config.faulty_count,
            seed: config.seed,
        }
    }

    pub fn load(run_dir: &Path) -> Result<Self, RunError> {
        read_json(&run_dir.join("run.json"))
    }
}

/// File-name form of a task id.
pub fn file_stem(task_id: &str) -> String {
    task_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect()
}

fn check_stems(dataset: &Dataset) -> Result<(), RunError> {
    let mut seen: HashMap<String, &str> = HashMap::new();
    for p in &dataset.problems {
        if let Some(other) = seen.insert(file_stem(&p.task_id), &p.task_id) {
            return Err(RunError::Mismatch(format!(
                "task ids {other:?} and {:?} map to the same file name",
                p.task_id
            )));
        }
    }
    Ok(())
}

/// Writes through a temporary file and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| RunError::Json { path: path.to_path_buf(), message: e.to_string() })
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("record serializes") + "\n").collect()
}

/// Runs `work` for every index on up to `jobs` threads, each with its own
/// sandbox session. Results keep index order. The first error stops the
/// remaining work.
fn parallel_map<T: Send>(
    count: usize,
    jobs: usize,
    sandbox: &SandboxConfig,
    work: impl Fn(usize, &mut SandboxSession) -> Result<T, RunError> + Sync,
) -> Result<Vec<T>, RunError> {
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    let first_error: Mutex<Option<RunError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, count.max(1)) {
            scope.spawn(|| {
                let fail = |err: RunError| {
                    stop.store(true, Ordering::SeqCst);
                    first_error.lock().expect("error lock").get_or_insert(err);
                };
                let mut session = match SandboxSession::with_config(sandbox.clone()) {
                    Ok(s) => s,
                    Err(e) => return fail(e.into()),
                };
                while !stop.load(Ordering::SeqCst) {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= count {
                        break;
                    }
                    match work(i, &mut session) {
                        Ok(value) => slots.lock().expect("slot lock")[i] = Some(value),
                        Err(e) => return fail(e),
                    }
                }
            });
        }
    });
    if let Some(err) = first_error.into_inner().expect("error lock") {
        return Err(err);
    }
    Ok(slots.into_inner().expect("slot lock").into_iter().map(|s| s.expect("every slot filled")).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrepareLine {
    pub task_id: String,
    pub lines_before: usize,
    pub lines_after: usize,
}

/// Loads `input`, optionally strips examples from every prompt, writes `output`.
pub fn prepare(input: &Path, output: &Path, strip: bool) -> Result<Vec<PrepareLine>, RunError> {
    let dataset = load_dataset(input)?;
    let mut summary = Vec::with_capacity(dataset.problems.len());
    let problems = dataset
        .problems
        .iter()
        .map(|p| {
            let out = if strip { strip_examples(p) } else { p.clone() };
            summary.push(PrepareLine {
                task_id: p.task_id.clone(),
                lines_before: p.prompt.lines().count(),
                lines_after: out.prompt.lines().count(),
            });
            out
        })
        .collect();
    let prepared = Dataset { problems, ..dataset };
    write_atomic(output, prepared.to_jsonl().as_bytes())?;
    Ok(summary)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GenerateSummary {
    pub generated: usize,
    pub skipped: usize,
    /// Questions whose result records a failure.
    pub failed: Vec<String>,
}

/// Generates case sets for every question not yet completed in `run_dir`.
///
/// A question is complete when `results/<id>.json` exists without a failure;
/// `force` regenerates everything. An existing run directory created for a
/// different dataset, strategy or prompt set is refused unless `force`.
pub fn generate(
    config: &RunConfig,
    run_dir: &Path,
    dataset: &Dataset,
    provider: &ProviderSource,
    force: bool,
) -> Result<GenerateSummary, RunError> {
    config.validate()?;
    check_stems(dataset)?;
    let prompts = config.prompt_set()?;
    let manifest = RunManifest::new(config, dataset, &prompts);
    let manifest_path = run_dir.join("run.json");
    if manifest_path.exists() && !force {
        let existing = RunManifest::load(run_dir)?;
        if existing.dataset_hash != manifest.dataset_hash
            || existing.strategy != manifest.strategy
            || existing.prompt_hash != manifest.prompt_hash
        {
            return Err(RunError::Mismatch(format!(
                "{} was created for another dataset, strategy or prompt set; pass --force to overwrite",
                run_dir.display()
            )));
        }
    }
    write_json(&manifest_path, &manifest)?;
    write_json(&run_dir.join("prompts.json"), &prompts)?;

    let pending: Vec<usize> = (0..dataset.problems.len())
        .filter(|&i| {
            force || {
                let path = run_dir.join("results").join(format!("{}.json", file_stem(&dataset.problems[i].task_id)));
                !matches!(read_json::<GenerationResult>(&path), Ok(r) if r.failure.is_none())
            }
        })
        .collect();
    let settings = config.generation_settings(&prompts);
    tracing::info!(pending = pending.len(), total = dataset.problems.len(), strategy = %config.strategy, "generating");

    let results = parallel_map(pending.len(), config.jobs, &config.sandbox_config(), |k, session| {
        let problem = &dataset.problems[pending[k]];
        let scripted;
        let base: &dyn ChatProvider = match provider {
            ProviderSource::Shared(p) => p.as_ref(),
            ProviderSource::Scripted(book) => {
                scripted = book.provider_for(&problem.task_id);
                &scripted
            }
        };
        let llm = LoggedProvider::new(base);
        let agents = Agents::new(&llm, &prompts, &settings);
        let result = match agents.generate(problem, config.strategy, session) {
            Ok(result) => result,
            Err(err) => {
                tracing::warn!(question = %problem.task_id, error = %err, "generation failed");
                session.ensure_live()?;
                GenerationResult::failed(problem, config.strategy, err.to_string())
            }
        };
        write_question(run_dir, &result, &llm)?;
        Ok(result.failure.is_some().then(|| problem.task_id.clone()))
    })?;

    Ok(GenerateSummary {
        generated: pending.len(),
        skipped: dataset.problems.len() - pending.len(),
        failed: results.into_iter().flatten().collect(),
    })
}

fn write_question(run_dir: &Path, result: &GenerationResult, llm: &LoggedProvider<'_>) -> Result<(), RunError> {
    let stem = file_stem(&result.question_id);
    write_atomic(&run_dir.join("cases").join(format!("{stem}.jsonl")), result.case_set.to_jsonl().as_bytes())?;
    if result.strategy.uses_chain() {
        let records: Vec<_> = result
            .trajectories
            .iter()
            .enumerate()
            .flat_map(|(i, t)| t.trajectory.records(i, Some(&t.input)))
            .collect();
        write_atomic(&run_dir.join("trajectories").join(format!("{stem}.jsonl")), jsonl(&records).as_bytes())?;
    }
    write_atomic(&run_dir.join("requests").join(format!("{stem}.jsonl")), jsonl(&llm.records()).as_bytes())?;
    write_json(&run_dir.join("results").join(format!("{stem}.json")), result)
}

/// Case set stored for `task_id`, if any.
pub fn load_cases(run_dir: &Path, task_id: &str) -> Result<Option<CaseSet>, RunError> {
    let path = run_dir.join("cases").join(format!("{}.jsonl", file_stem(task_id)));
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    CaseSet::from_jsonl(task_id, &text)
        .map(Some)
        .map_err(|e| RunError::Json { path, message: e.to_string() })
}

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub metrics: MetricSet,
    pub jobs: usize,
    pub interpreter: PathBuf,
    pub test_time_limit: Duration,
    pub faulty_count: usize,
    pub faulty_file: Option<PathBuf>,
    pub seed: u64,
}

impl EvaluateOptions {
    pub fn from_config(config: &RunConfig) -> Result<Self, RunError> {
        Ok(EvaluateOptions {
            metrics: config.metric_set()?,
            jobs: config.jobs.max(1),
            interpreter: config.interpreter.clone(),
            test_time_limit: config.test_time_limit(),
            faulty_count: config.faulty_count,
            faulty_file: config.faulty_file.clone(),
            seed: config.seed,
        })
    }
}

/// Scores every question of `dataset` against the case sets in `run_dir` and
/// writes the reports under `run_dir/eval`. Output bytes depend only on the
/// run directory, the dataset and the options.
pub fn evaluate(run_dir: &Path, dataset: &Dataset, options: &EvaluateOptions) -> Result<DatasetReport, RunError> {
    check_stems(dataset)?;
    let manifest = RunManifest::load(run_dir)?;
    if manifest.dataset_hash != dataset.content_hash() {
        tracing::warn!(
            run = %manifest.dataset_name,
            given = %dataset.name,
            "evaluation dataset differs from the generation dataset"
        );
    }
    let external: Option<BTreeMap<String, FaultyProgramSet>> = match (&options.faulty_file, options.metrics.cwb) {
        (Some(path), true) => Some(load_faulty_programs(path)?),
        _ => None,
    };
    let eval_options = EvalOptions { metrics: options.metrics, time_limit: options.test_time_limit };
    let sandbox = SandboxConfig::new(&options.interpreter);

    let reports: Vec<QuestionReport> = parallel_map(dataset.problems.len(), options.jobs, &sandbox, |i, session| {
        let problem = &dataset.problems[i];
        let cases = load_cases(run_dir, &problem.task_id)?;
        let missing = cases.is_none();
        if missing {
            tracing::warn!(question = %problem.task_id, "no case set in the run directory");
        }
        let cases = cases.unwrap_or_else(|| CaseSet::empty(&problem.task_id));
        let faulty = match &external {
            _ if !options.metrics.cwb => None,
            Some(sets) => Some(sets.get(&problem.task_id).cloned().unwrap_or_else(|| FaultyProgramSet {
                question_id: problem.task_id.clone(),
                programs: Vec::new(),
                provider: crate::metrics::FaultyProvider::ExternalFile,
                shortfall: Some("no faulty programs in the external file".into()),
            })),
            None => Some(mutate_canonical(problem, options.faulty_count, options.seed)),
        };
        let mut report = evaluate_question(problem, &cases, faulty.as_ref(), session, &eval_options)?;
        report.missing_cases = missing;
        write_json(&run_dir.join("eval").join("questions").join(format!("{}.json", file_stem(&problem.task_id))), &report)?;
        Ok(report)
    })?;

    let report = aggregate(&dataset.name, manifest.strategy.as_str(), options.metrics, reports);
    write_json(&run_dir.join("eval").join("report.json"), &report)?;
    write_atomic(&run_dir.join("eval").join("report.txt"), report.render_table().as_bytes())?;
    Ok(report)
}

/// Side-by-side table of evaluated runs over one dataset.
pub fn compare(run_dirs: &[PathBuf]) -> Result<String, RunError> {
    let mut reports = Vec::with_capacity(run_dirs.len());
    let mut dataset: Option<(String, PathBuf)> = None;
    for dir in run_dirs {
        let manifest = RunManifest::load(dir)?;
        match &dataset {
            Some((hash, first)) if *hash != manifest.dataset_hash => {
                return Err(RunError::Mismatch(format!(
                    "{} and {} were generated on different datasets",
                    first.display(),
                    dir.display()
                )))
            }
            Some(_) => {}
            None => dataset = Some((manifest.dataset_hash.clone(), dir.clone())),
        }
        let report: DatasetReport = read_json(&dir.join("eval").join("report.json"))?;
        reports.push(report);
    }
    let refs: Vec<&DatasetReport> = reports.iter().collect();
    let mut out = String::new();
    if let Some(first) = reports.first() {
        out.push_str(&format!("dataset: {}  questions: {}\n", first.dataset, first.n_questions));
    }
    out.push_str(&crate::metrics::render_table(&refs));
    Ok(out)
}
