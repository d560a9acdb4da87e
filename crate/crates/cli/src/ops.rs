//! Command implementations shared by the CLI verbs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use lorafuse_core::adapter::LoraAdapter;
use lorafuse_core::container;
use lorafuse_core::dataset::{
    self, format_aoa_prompt, load_harmful_jsonl, load_instructions_jsonl, load_mcq_jsonl,
    load_prompts_jsonl, load_safety_jsonl, InstructionExample,
};
use lorafuse_core::eval::{
    self, category_breakdown, harmfulness_rate, harmfulness_score, is_refusal, mcq_accuracy,
    rouge1_precision, xstest_rate, EvalReport, HttpJudge, Judge, JudgeEndpoint, JudgeVerdict,
    McqOutcome, MetricKind, MetricValue, MockJudge, ReportColumn,
};
use lorafuse_core::fusion::{
    fuse_concat, fuse_linear, merge_adapter_into_base, merge_into_base, sweep_lambda,
    FusionError, FusionSpec, FusionStrategy,
};
use lorafuse_core::model::{
    cross_entropy_loss, forward, generate, init_model, tokenizer, train_lora, ModelWeights,
    TrainRun,
};

use crate::artifacts::ArtifactSink;
use crate::config::{FusionStrategyName, JudgeKind, Role, RunConfig};

pub const JUDGE_URL_ENV: &str = "LORAFUSE_JUDGE_URL";

/// Build the configured judge; `LORAFUSE_JUDGE_URL` overrides the HTTP
/// endpoint.
pub fn build_judge(cfg: &RunConfig) -> Result<Box<dyn Judge>> {
    match cfg.judge.kind {
        JudgeKind::Mock => Ok(Box::new(
            MockJudge {
                refusal_markers: cfg.refusal_markers.clone(),
                harm_keywords: cfg.judge.harm_keywords.clone(),
                obedience_quirk: cfg.judge.obedience_quirk,
            },
        )),
        JudgeKind::Http => {
            let url = std::env::var(JUDGE_URL_ENV)
                .ok()
                .or_else(|| cfg.judge.url.clone())
                .ok_or_else(|| {
                    anyhow!("http judge selected but no url configured (set judge.url or {JUDGE_URL_ENV})")
                })?;
            let mut endpoint = JudgeEndpoint::new(url);
            endpoint.timeout = Duration::from_secs(cfg.judge.timeout_secs);
            endpoint.max_retries = cfg.judge.max_retries;
            endpoint.concurrency = cfg.judge.concurrency;
            Ok(Box::new(HttpJudge::new(endpoint)))
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} file not found: {}", path.display());
    }
    Ok(())
}

/// Safety pairs become obedience-formatted instruction examples for
/// training the safety adapter.
fn safety_as_instructions(cfg: &RunConfig) -> Result<Vec<InstructionExample>> {
    require_file(&cfg.data.safety, "safety data")?;
    let loaded = load_safety_jsonl(&cfg.data.safety)?;
    print_findings(&loaded.findings);
    Ok(loaded
        .items
        .examples
        .iter()
        .map(|pair| InstructionExample {
            system: cfg.system_prompt.clone(),
            user: pair.prompt.clone(),
            assistant: pair.refusal.clone(),
        })
        .collect())
}

fn task_instructions(cfg: &RunConfig) -> Result<Vec<InstructionExample>> {
    require_file(&cfg.data.task, "task data")?;
    let loaded = load_instructions_jsonl(&cfg.data.task)?;
    print_findings(&loaded.findings);
    Ok(loaded.items)
}

pub fn print_findings(findings: &[lorafuse_core::Finding]) {
    for finding in findings {
        eprintln!("{finding}");
    }
}

pub fn train_role(cfg: &RunConfig, weights: &ModelWeights, role: Role) -> Result<TrainRun> {
    let data = match role {
        Role::Task => task_instructions(cfg)?,
        Role::Safety => safety_as_instructions(cfg)?,
    };
    let train_cfg = cfg.train_config(role.salt());
    Ok(train_lora(weights, &data, &train_cfg)?)
}

pub fn loss_curve_csv(run: &TrainRun) -> String {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in run.epoch_losses.iter().enumerate() {
        out.push_str(&format!("{epoch},{loss}\n"));
    }
    out
}

pub fn base_weights(cfg: &RunConfig, base_path: Option<&Path>) -> Result<ModelWeights> {
    match base_path {
        Some(path) => {
            require_file(path, "base weights")?;
            let (weights, _) = container::load_model(path)?;
            Ok(weights)
        }
        None => Ok(init_model(&cfg.model_config())?),
    }
}

fn prompt_tokens(cfg: &RunConfig, user: &str) -> Result<Vec<usize>> {
    let text = format_aoa_prompt(&cfg.system_prompt, user);
    let mut tokens = vec![tokenizer::BOS];
    tokens.extend(tokenizer::encode(&text)?);
    Ok(tokens)
}

/// Greedy completion for one user prompt, decoded without specials.
pub fn respond(
    cfg: &RunConfig,
    weights: &ModelWeights,
    adapter: Option<&LoraAdapter>,
    user: &str,
) -> Result<String> {
    let prompt = prompt_tokens(cfg, user)?;
    let output = generate(weights, adapter, &prompt, cfg.max_new_tokens)?;
    Ok(tokenizer::decode(&output[prompt.len()..]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSuite {
    Harmfulness,
    Xstest,
    Utility,
    Rouge,
}

pub const ALL_SUITES: [EvalSuite; 4] = [
    EvalSuite::Harmfulness,
    EvalSuite::Xstest,
    EvalSuite::Utility,
    EvalSuite::Rouge,
];

/// Sweep-facing metrics: the standard report plus the two toy-scale
/// curves the report schema does not carry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepMetrics {
    pub report: EvalReport,
    pub harmful_refusal_rate: Option<MetricValue>,
    pub exact_match: Option<MetricValue>,
}

pub struct SuiteOutcome {
    pub metrics: SweepMetrics,
    pub failures: Vec<(EvalSuite, String)>,
}

fn harmfulness_suite(
    cfg: &RunConfig,
    weights: &ModelWeights,
    adapter: Option<&LoraAdapter>,
    judge: &dyn Judge,
) -> Result<(MetricValue, MetricValue, BTreeMap<String, f64>, MetricValue)> {
    require_file(&cfg.data.harmful, "harmful eval data")?;
    let harmful = load_harmful_jsonl(&cfg.data.harmful)?.items;
    let mut labeled: Vec<(String, JudgeVerdict)> = Vec::with_capacity(harmful.len());
    let mut responses: Vec<String> = Vec::with_capacity(harmful.len());
    for item in &harmful {
        let response = respond(cfg, weights, adapter, &item.prompt)?;
        let verdict = judge.judge(&item.prompt, &response, &cfg.judge.policy)?;
        labeled.push((item.category.clone(), verdict));
        responses.push(response);
    }
    let verdicts: Vec<JudgeVerdict> = labeled.iter().map(|(_, v)| v.clone()).collect();
    let n = verdicts.len();
    let score = MetricValue::new(harmfulness_score(&verdicts)?, n);
    let rate = MetricValue::new(harmfulness_rate(&verdicts)?, n);
    let per_category = category_breakdown(&labeled, &cfg.categories)?;
    let refusals = responses
        .iter()
        .filter(|r| is_refusal(r, &cfg.refusal_markers))
        .count();
    let refusal_rate = MetricValue::new(refusals as f64 / n as f64, n);
    Ok((score, rate, per_category, refusal_rate))
}

fn xstest_suite(
    cfg: &RunConfig,
    weights: &ModelWeights,
    adapter: Option<&LoraAdapter>,
) -> Result<MetricValue> {
    require_file(&cfg.data.xstest, "xstest data")?;
    let prompts = load_prompts_jsonl(&cfg.data.xstest)?.items;
    let responses: Vec<String> = prompts
        .iter()
        .map(|p| respond(cfg, weights, adapter, &p.prompt))
        .collect::<Result<_>>()?;
    Ok(MetricValue::new(
        xstest_rate(&responses, &cfg.refusal_markers)?,
        responses.len(),
    ))
}

/// Score each choice by full-sequence cross-entropy and predict the
/// lowest-loss one (ties to the lowest index).
fn mcq_predict(
    cfg: &RunConfig,
    weights: &ModelWeights,
    adapter: Option<&LoraAdapter>,
    question: &str,
    choices: &[String],
) -> Result<usize> {
    let mut best = 0usize;
    let mut best_loss = f64::INFINITY;
    for (idx, choice) in choices.iter().enumerate() {
        let text = format!("{}{}", format_aoa_prompt(&cfg.system_prompt, question), choice);
        let mut tokens = vec![tokenizer::BOS];
        tokens.extend(tokenizer::encode(&text)?);
        tokens.push(tokenizer::EOS);
        let logits = forward(weights, adapter, &tokens[..tokens.len() - 1])?;
        let loss = cross_entropy_loss(&logits, &tokens[1..])?;
        if loss < best_loss {
            best_loss = loss;
            best = idx;
        }
    }
    Ok(best)
}

fn utility_suite(
    cfg: &RunConfig,
    weights: &ModelWeights,
    adapter: Option<&LoraAdapter>,
) -> Result<MetricValue> {
    require_file(&cfg.data.mcq, "mcq data")?;
    let items = load_mcq_jsonl(&cfg.data.mcq)?.items;
    let mut outcomes = Vec::with_capacity(items.len());
    for item in &items {
        let predicted = mcq_predict(cfg, weights, adapter, &item.question, &item.choices)?;
        outcomes.push(McqOutcome {
            n_choices: item.choices.len(),
            gold: item.gold,
            predicted,
        });
    }
    Ok(MetricValue::new(mcq_accuracy(&outcomes)?, outcomes.len()))
}

fn rouge_suite(
    cfg: &RunConfig,
    weights: &ModelWeights,
    adapter: Option<&LoraAdapter>,
) -> Result<MetricValue> {
    let task = task_instructions(cfg)?;
    let mut total = 0.0;
    for example in &task {
        let candidate = respond(cfg, weights, adapter, &example.user)?;
        // an empty completion has no overlap at all
        let precision = if candidate.split_whitespace().next().is_none() {
            0.0
        } else {
            rouge1_precision(&candidate, &example.assistant)?
        };
        total += precision;
    }
    Ok(MetricValue::new(total / task.len() as f64, task.len()))
}

fn exact_match_suite(
    cfg: &RunConfig,
    weights: &ModelWeights,
    adapter: Option<&LoraAdapter>,
) -> Result<MetricValue> {
    let task = task_instructions(cfg)?;
    let mut hits = 0usize;
    for example in &task {
        if respond(cfg, weights, adapter, &example.user)? == example.assistant {
            hits += 1;
        }
    }
    Ok(MetricValue::new(hits as f64 / task.len() as f64, task.len()))
}

/// Run the selected suites, collecting per-suite failures instead of
/// aborting, so a dead judge still yields a partial report.
pub fn run_suites(
    cfg: &RunConfig,
    weights: &ModelWeights,
    adapter: Option<&LoraAdapter>,
    judge: &dyn Judge,
    suites: &[EvalSuite],
    with_exact_match: bool,
) -> SuiteOutcome {
    let mut metrics = SweepMetrics {
        report: EvalReport::default(),
        harmful_refusal_rate: None,
        exact_match: None,
    };
    let mut failures = Vec::new();
    for suite in suites {
        match suite {
            EvalSuite::Harmfulness => match harmfulness_suite(cfg, weights, adapter, judge) {
                Ok((score, rate, per_category, refusal)) => {
                    metrics.report.harmfulness_score = Some(score);
                    metrics.report.harmfulness_rate = Some(rate);
                    metrics.report.per_category = Some(per_category);
                    metrics.harmful_refusal_rate = Some(refusal);
                }
                Err(e) => failures.push((EvalSuite::Harmfulness, e.to_string())),
            },
            EvalSuite::Xstest => match xstest_suite(cfg, weights, adapter) {
                Ok(v) => metrics.report.xstest_rate = Some(v),
                Err(e) => failures.push((EvalSuite::Xstest, e.to_string())),
            },
            EvalSuite::Utility => match utility_suite(cfg, weights, adapter) {
                Ok(v) => metrics.report.utility_accuracy = Some(v),
                Err(e) => failures.push((EvalSuite::Utility, e.to_string())),
            },
            EvalSuite::Rouge => match rouge_suite(cfg, weights, adapter) {
                Ok(v) => metrics.report.rouge1_precision = Some(v),
                Err(e) => failures.push((EvalSuite::Rouge, e.to_string())),
            },
        }
    }
    if with_exact_match {
        match exact_match_suite(cfg, weights, adapter) {
            Ok(v) => metrics.exact_match = Some(v),
            Err(e) => failures.push((EvalSuite::Utility, format!("exact-match: {e}"))),
        }
    }
    SuiteOutcome { metrics, failures }
}

/// One materialized sweep point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRowOut {
    pub lambda: f64,
    pub ok: bool,
    pub error: Option<String>,
    pub metrics: Option<SweepMetrics>,
}

pub fn write_eval_artifacts(
    sink: &mut ArtifactSink,
    prefix: &str,
    metrics: &SweepMetrics,
) -> Result<()> {
    sink.write_json(&format!("{prefix}report.json"), &metrics.report)?;
    sink.write_text(&format!("{prefix}report.csv"), &metrics.report.to_csv())?;
    if let Some(csv) = metrics.report.category_csv() {
        sink.write_text(&format!("{prefix}categories.csv"), &csv)?;
    }
    Ok(())
}

/// The two metric rows every sweep column carries, dressed like the
/// published table: score on the 1-5 scale, rate in percent.
pub fn sweep_column(label: &str, report: &EvalReport) -> Option<ReportColumn> {
    let score = report.harmfulness_score?;
    let rate = report.harmfulness_rate?;
    let mut column = ReportColumn::new(label);
    column.push("Harmfulness Score", MetricKind::Score, score.value);
    column.push("Harmfulness Rate", MetricKind::RatePercent, rate.value * 100.0);
    Some(column)
}

pub fn tradeoff_csv(rows: &[SweepRowOut]) -> String {
    let mut out = String::from("lambda,utility_accuracy,xstest_rate\n");
    for row in rows {
        let (utility, xstest) = row
            .metrics
            .as_ref()
            .map(|m| {
                (
                    m.report.utility_accuracy.map(|v| v.value),
                    m.report.xstest_rate.map(|v| v.value),
                )
            })
            .unwrap_or((None, None));
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", row.lambda, fmt(utility), fmt(xstest)));
    }
    out
}

pub fn sweep_wide_csv(rows: &[SweepRowOut]) -> String {
    let mut out = String::from(
        "lambda,ok,harmfulness_score,harmfulness_rate,harmful_refusal_rate,exact_match,xstest_rate,utility_accuracy,rouge1_precision\n",
    );
    for row in rows {
        let m = row.metrics.as_ref();
        let field = |v: Option<MetricValue>| v.map(|x| x.value.to_string()).unwrap_or_default();
        let (score, rate, refusal, exact, xs, util, rouge) = match m {
            Some(m) => (
                field(m.report.harmfulness_score),
                field(m.report.harmfulness_rate),
                field(m.harmful_refusal_rate),
                field(m.exact_match),
                field(m.report.xstest_rate),
                field(m.report.utility_accuracy),
                field(m.report.rouge1_precision),
            ),
            None => Default::default(),
        };
        out.push_str(&format!(
            "{},{},{score},{rate},{refusal},{exact},{xs},{util},{rouge}\n",
            row.lambda, row.ok
        ));
    }
    out
}

/// Render the delta table from successful rows; the first successful row
/// is the baseline. Rows lacking harmfulness metrics are skipped.
pub fn render_harm_table(rows: &[SweepRowOut]) -> Result<Option<eval::DeltaTable>> {
    let columns: Vec<ReportColumn> = rows
        .iter()
        .filter_map(|row| {
            row.metrics
                .as_ref()
                .and_then(|m| sweep_column(&row.lambda.to_string(), &m.report))
        })
        .collect();
    let Some((baseline, rest)) = columns.split_first() else {
        return Ok(None);
    };
    let refs: Vec<&ReportColumn> = rest.iter().collect();
    Ok(Some(eval::delta_table(baseline, &refs)?))
}

/// The per-lambda fusion spec the config calls for. Normalized: weights
/// `[1-lambda, lambda]`; un-normalized: task weight pinned at 1.0 with
/// the grid value as the raw safety weight.
pub fn sweep_spec(cfg: &RunConfig, lambda: f64) -> Result<FusionSpec, FusionError> {
    let strategy = match cfg.fusion.strategy {
        FusionStrategyName::Concatenation => FusionStrategy::Concatenation,
        FusionStrategyName::Linear => FusionStrategy::Linear,
    };
    if cfg.fusion.normalized {
        FusionSpec::task_safety(strategy, lambda)
    } else {
        FusionSpec::unnormalized(strategy, vec![1.0, lambda])
    }
}

/// Evaluate every lambda on the grid: fuse, attach, run suites. Failures
/// are recorded per row; the sweep keeps going.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    cfg: &RunConfig,
    weights: &ModelWeights,
    task: &LoraAdapter,
    safety: &LoraAdapter,
    grid: &[f64],
    suites: &[EvalSuite],
    judge: &dyn Judge,
    jobs: usize,
) -> Result<Vec<SweepRowOut>> {
    let evaluate_one = |lambda: f64| -> Result<SweepMetrics, String> {
        let spec = sweep_spec(cfg, lambda).map_err(|e| e.to_string())?;
        let outcome = match spec.strategy {
            FusionStrategy::Concatenation => {
                let fused = fuse_concat(&[task.clone(), safety.clone()], &spec)
                    .map_err(|e| e.to_string())?;
                run_suites(cfg, weights, Some(&fused), judge, suites, true)
            }
            FusionStrategy::Linear => {
                // dense route: sum the deltas, merge, evaluate the merged model
                let deltas = fuse_linear(&[task.clone(), safety.clone()], &spec)
                    .map_err(|e| e.to_string())?;
                let merged_map = merge_into_base(&weights.attn_weight_map(), &deltas)
                    .map_err(|e| e.to_string())?;
                let merged = weights
                    .with_attn_weights(&merged_map)
                    .map_err(|e| e.to_string())?;
                run_suites(cfg, &merged, None, judge, suites, true)
            }
        };
        if let Some((suite, msg)) = outcome.failures.first() {
            return Err(format!("{suite:?}: {msg}"));
        }
        Ok(outcome.metrics)
    };

    let results: Vec<(f64, Result<SweepMetrics, String>)> = if jobs > 1 {
        // same grid checks the sequential path gets from sweep_lambda
        sweep_lambda(grid, |_| ())?;
        let mut slots: Vec<Option<Result<SweepMetrics, String>>> = vec![None; grid.len()];
        std::thread::scope(|scope| {
            for (chunk_idx, chunk) in grid.chunks(jobs).enumerate() {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&lambda| scope.spawn(move || evaluate_one(lambda)))
                    .collect();
                for (i, handle) in handles.into_iter().enumerate() {
                    let result = handle.join().expect("sweep worker panicked");
                    slots[chunk_idx * jobs + i] = Some(result);
                }
            }
        });
        grid.iter()
            .copied()
            .zip(slots.into_iter().map(|s| s.expect("slot filled")))
            .collect()
    } else {
        sweep_lambda(grid, evaluate_one)?
            .into_iter()
            .map(|row| (row.lambda, row.metrics))
            .collect()
    };

    Ok(results
        .into_iter()
        .map(|(lambda, result)| match result {
            Ok(metrics) => SweepRowOut {
                lambda,
                ok: true,
                error: None,
                metrics: Some(metrics),
            },
            Err(error) => SweepRowOut {
                lambda,
                ok: false,
                error: Some(error),
                metrics: None,
            },
        })
        .collect())
}

/// Validate a dataset file, sniffing its type from the first JSON object
/// unless one is forced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DatasetType {
    Instructions,
    Safety,
    Harmful,
    Prompts,
    Mcq,
}

pub fn sniff_dataset_type(path: &Path) -> Result<DatasetType> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| anyhow!("dataset {} is empty", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(first)
        .with_context(|| format!("line 1 of {} is not JSON", path.display()))?;
    let object = value
        .as_object()
        .ok_or_else(|| anyhow!("line 1 of {} is not a JSON object", path.display()))?;
    let ty = if object.contains_key("kind") {
        DatasetType::Safety
    } else if object.contains_key("assistant") {
        DatasetType::Instructions
    } else if object.contains_key("category") {
        DatasetType::Harmful
    } else if object.contains_key("choices") {
        DatasetType::Mcq
    } else {
        DatasetType::Prompts
    };
    Ok(ty)
}

/// Returns findings; hard errors propagate.
pub fn validate_dataset(path: &Path, ty: DatasetType) -> Result<Vec<lorafuse_core::Finding>> {
    let findings = match ty {
        DatasetType::Instructions => load_instructions_jsonl(path)?.findings,
        DatasetType::Safety => load_safety_jsonl(path)?.findings,
        DatasetType::Harmful => load_harmful_jsonl(path)?.findings,
        DatasetType::Prompts => load_prompts_jsonl(path)?.findings,
        DatasetType::Mcq => load_mcq_jsonl(path)?.findings,
    };
    Ok(findings)
}

pub fn fuse_from_files(
    task_path: &Path,
    safety_path: &Path,
    spec: &FusionSpec,
) -> Result<LoraAdapter> {
    require_file(task_path, "task adapter")?;
    require_file(safety_path, "safety adapter")?;
    let task = container::load_adapter(task_path)?;
    let safety = container::load_adapter(safety_path)?;
    Ok(fuse_concat(&[task, safety], spec)?)
}

pub fn merge_files(
    cfg: &RunConfig,
    base_path: Option<&Path>,
    adapter_path: &Path,
) -> Result<ModelWeights> {
    require_file(adapter_path, "adapter")?;
    let weights = base_weights(cfg, base_path)?;
    let adapter = container::load_adapter(adapter_path)?;
    let merged = merge_adapter_into_base(&weights.attn_weight_map(), &adapter)?;
    Ok(weights.with_attn_weights(&merged)?)
}

pub fn mix_files(
    task_path: &Path,
    safety_path: &Path,
    fraction: f64,
    seed: u64,
) -> Result<Vec<InstructionExample>> {
    require_file(task_path, "task data")?;
    require_file(safety_path, "safety data")?;
    let task = load_instructions_jsonl(task_path)?;
    print_findings(&task.findings);
    let safety = load_safety_jsonl(safety_path)?;
    print_findings(&safety.findings);
    Ok(dataset::mix_safety_data(
        &task.items,
        &safety.items,
        fraction,
        seed,
    )?)
}

/// Persist a fused-or-loaded adapter under the sink.
pub fn save_adapter_artifact(
    sink: &mut ArtifactSink,
    name: &str,
    adapter: &LoraAdapter,
) -> Result<PathBuf> {
    let path = sink.claim(name)?;
    container::save_adapter(adapter, &path)?;
    Ok(path)
}
