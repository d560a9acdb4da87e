//! `lorafuse`: train LoRA adapters on a toy transformer, fuse them with a
//! safety adapter, merge into base weights, and evaluate safety/utility
//! trade-offs across fusion weights.

mod artifacts;
mod config;
mod ops;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use lorafuse_core::container;
use lorafuse_core::dataset::{save_instructions_jsonl, save_safety_jsonl, FilterConfig};
use lorafuse_core::fusion::{FusionSpec, FusionStrategy};
use lorafuse_core::Severity;

use artifacts::ArtifactSink;
use config::{JudgeKind, Role, RunConfig};
use ops::{DatasetType, EvalSuite, ALL_SUITES};

#[derive(Parser)]
#[command(
    name = "lorafuse",
    version,
    about = "LoRA adapter training, safety fusion, and evaluation on a toy transformer"
)]
struct Cli {
    /// JSON run configuration; built-in toy defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where artifacts are written (overrides the config)
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overwrite existing output files
    #[arg(long, global = true)]
    force: bool,
    /// Global seed (overrides the config)
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one adapter (task or safety role) and write it with its loss curve
    Train {
        #[arg(long, value_enum)]
        role: Role,
        /// Dataset override for the chosen role
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output file name (inside the output dir)
        #[arg(long)]
        out: Option<String>,
    },
    /// Fuse a task and a safety adapter by factor concatenation
    Fuse {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        safety: PathBuf,
        /// Safety-side fusion weight; the task side gets 1-lambda
        #[arg(long)]
        lambda: Option<f64>,
        /// Un-normalized regime: task weight pinned at 1.0
        #[arg(long)]
        no_normalize: bool,
        /// Safety weight for --no-normalize
        #[arg(long)]
        safety_weight: Option<f64>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Merge an adapter into base weights and write the merged model
    Merge {
        /// Base weights container; derived from the config seed when omitted
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out: Option<String>,
    },
    /// Evaluate an adapter (or the bare base) across the metric suites
    Eval {
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Comma-separated subset of: harmfulness, xstest, utility, rouge
        #[arg(long, value_enum, value_delimiter = ',')]
        suites: Vec<EvalSuite>,
        #[arg(long, value_enum)]
        judge: Option<JudgeKind>,
    },
    /// Train both adapters, then fuse and evaluate at every lambda on the grid
    Sweep {
        /// Comma-separated lambda grid override
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        /// Evaluate up to N lambda points concurrently
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_enum)]
        judge: Option<JudgeKind>,
    },
    /// Dataset utilities: validate, judge-filter, and safety mixing
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Re-render sweep tables from a saved rows file
    Report {
        #[arg(long)]
        rows: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Parse a JSONL dataset and print findings
    Validate {
        path: PathBuf,
        #[arg(long, value_enum)]
        r#type: Option<DatasetType>,
    },
    /// Keep only safety pairs whose refusal the judge classifies safe
    Filter {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        judge: Option<JudgeKind>,
        /// Keep pairs scored at or below this judge score
        #[arg(long)]
        threshold: Option<u8>,
    },
    /// Blend a fraction of safety pairs into the task data
    Mix {
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long)]
        safety: Option<PathBuf>,
        #[arg(long)]
        fraction: f64,
    },
}

/// Exit taxonomy: 2 for usage/config problems, 1 for runtime failures.
enum AppError {
    Usage(anyhow::Error),
    Failure(anyhow::Error),
}

impl AppError {
    fn code(&self) -> ExitCode {
        match self {
            AppError::Usage(_) => ExitCode::from(2),
            AppError::Failure(_) => ExitCode::from(1),
        }
    }

    fn message(&self) -> &anyhow::Error {
        match self {
            AppError::Usage(e) | AppError::Failure(e) => e,
        }
    }
}

fn usage<T>(result: Result<T>) -> Result<T, AppError> {
    result.map_err(AppError::Usage)
}

fn failure<T>(result: Result<T>) -> Result<T, AppError> {
    result.map_err(AppError::Failure)
}

fn exists(path: &std::path::Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {:#}", err.message());
            err.code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, AppError> {
    let cfg = usage(load_config(&cli))?;
    let force = cli.force;
    match cli.command {
        Command::Train { role, data, out } => {
            let mut cfg = cfg;
            if let Some(path) = data {
                match role {
                    Role::Task => cfg.data.task = path,
                    Role::Safety => cfg.data.safety = path,
                }
            }
            let data_path = match role {
                Role::Task => cfg.data.task.clone(),
                Role::Safety => cfg.data.safety.clone(),
            };
            usage(exists(&data_path, "data file"))?;
            let mut sink = usage(ArtifactSink::new(&cfg.output_dir, force))?;
            let name = out.unwrap_or_else(|| format!("{}_adapter.lfa", role.name()));
            let loss_name = format!("{}_loss.csv", role.name());
            usage(sink.preflight(&[&name, &loss_name]))?;

            let weights = failure(ops::base_weights(&cfg, None))?;
            let run = failure(ops::train_role(&cfg, &weights, role))?;
            let path = failure(ops::save_adapter_artifact(&mut sink, &name, &run.adapter))?;
            failure(sink.write_text(&loss_name, &ops::loss_curve_csv(&run)).map(|_| ()))?;
            failure(sink.write_run_meta(&format!("train --role {}", role.name()), cfg.seed))?;
            println!("wrote {}", path.display());
            if let (Some(first), Some(last)) = (run.epoch_losses.first(), run.epoch_losses.last()) {
                println!("loss {first:.4} -> {last:.4} over {} epochs", run.epoch_losses.len());
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Fuse {
            task,
            safety,
            lambda,
            no_normalize,
            safety_weight,
            out,
        } => {
            usage(exists(&task, "task adapter"))?;
            usage(exists(&safety, "safety adapter"))?;
            let (spec, default_name) = if no_normalize {
                let w = usage(
                    safety_weight.ok_or_else(|| anyhow!("--no-normalize requires --safety-weight")),
                )?;
                let spec = usage(
                    FusionSpec::unnormalized(FusionStrategy::Concatenation, vec![1.0, w])
                        .map_err(Into::into),
                )?;
                (spec, format!("fused_unnorm_{w}.lfa"))
            } else {
                let lambda = usage(lambda.ok_or_else(|| anyhow!("--lambda is required")))?;
                let spec = usage(
                    FusionSpec::task_safety(FusionStrategy::Concatenation, lambda)
                        .map_err(Into::into),
                )?;
                (spec, format!("fused_lambda_{lambda}.lfa"))
            };
            let mut sink = usage(ArtifactSink::new(&cfg.output_dir, force))?;
            let name = out.unwrap_or(default_name);
            usage(sink.preflight(&[&name]))?;
            let fused = failure(ops::fuse_from_files(&task, &safety, &spec))?;
            let path = failure(ops::save_adapter_artifact(&mut sink, &name, &fused))?;
            failure(sink.write_run_meta("fuse", cfg.seed))?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Merge { base, adapter, out } => {
            usage(exists(&adapter, "adapter"))?;
            if let Some(base) = &base {
                usage(exists(base, "base weights"))?;
            }
            let mut sink = usage(ArtifactSink::new(&cfg.output_dir, force))?;
            let name = out.unwrap_or_else(|| "merged_base.lfb".to_string());
            usage(sink.preflight(&[&name]))?;
            let merged = failure(ops::merge_files(&cfg, base.as_deref(), &adapter))?;
            let path = failure({
                let p = sink.claim(&name);
                p.and_then(|p| {
                    container::save_model(&merged, "merged", &p)
                        .map(|_| p)
                        .map_err(Into::into)
                })
            })?;
            failure(sink.write_run_meta("merge", cfg.seed))?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval {
            adapter,
            suites,
            judge,
        } => {
            let mut cfg = cfg;
            if let Some(kind) = judge {
                cfg.judge.kind = kind;
            }
            if let Some(path) = &adapter {
                usage(exists(path, "adapter"))?;
            }
            let judge = usage(ops::build_judge(&cfg))?;
            let weights = failure(ops::base_weights(&cfg, None))?;
            let loaded = match &adapter {
                Some(path) => Some(failure(
                    container::load_adapter(path).context("load adapter"),
                )?),
                None => None,
            };
            let suites = if suites.is_empty() { ALL_SUITES.to_vec() } else { suites };
            let mut sink = usage(ArtifactSink::new(&cfg.output_dir, force))?;
            usage(sink.preflight(&["report.json", "report.csv", "categories.csv"]))?;
            let outcome = ops::run_suites(&cfg, &weights, loaded.as_ref(), &*judge, &suites, false);
            failure(ops::write_eval_artifacts(&mut sink, "", &outcome.metrics))?;
            failure(sink.write_run_meta("eval", cfg.seed))?;
            println!("{}", outcome.metrics.report.to_csv().trim_end());
            if outcome.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for (suite, msg) in &outcome.failures {
                    eprintln!("suite {suite:?} failed: {msg}");
                }
                Ok(ExitCode::from(1))
            }
        }

        Command::Sweep { grid, jobs, judge } => {
            let mut cfg = cfg;
            if !grid.is_empty() {
                cfg.lambda_grid = grid;
                usage(cfg.validate())?;
            }
            if let Some(kind) = judge {
                cfg.judge.kind = kind;
            }
            let jobs = jobs.max(1);
            for (path, what) in [
                (&cfg.data.task, "task data"),
                (&cfg.data.safety, "safety data"),
                (&cfg.data.harmful, "harmful eval data"),
                (&cfg.data.xstest, "xstest data"),
                (&cfg.data.mcq, "mcq data"),
            ] {
                usage(exists(path, what))?;
            }
            let judge = usage(ops::build_judge(&cfg))?;
            let mut sink = usage(ArtifactSink::new(&cfg.output_dir, force))?;
            let mut planned: Vec<String> = [
                "task_adapter.lfa",
                "safety_adapter.lfa",
                "task_loss.csv",
                "safety_loss.csv",
                "sweep_rows.json",
                "sweep.csv",
                "tradeoff.csv",
                "harm_table.csv",
                "harm_table.txt",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect();
            for lambda in &cfg.lambda_grid {
                planned.push(format!("lambda_{lambda}/fused.lfa"));
                planned.push(format!("lambda_{lambda}/report.json"));
            }
            let planned_refs: Vec<&str> = planned.iter().map(String::as_str).collect();
            usage(sink.preflight(&planned_refs))?;

            let weights = failure(ops::base_weights(&cfg, None))?;
            let task_run = failure(ops::train_role(&cfg, &weights, Role::Task))?;
            let safety_run = failure(ops::train_role(&cfg, &weights, Role::Safety))?;
            failure(
                ops::save_adapter_artifact(&mut sink, "task_adapter.lfa", &task_run.adapter)
                    .map(|_| ()),
            )?;
            failure(
                ops::save_adapter_artifact(&mut sink, "safety_adapter.lfa", &safety_run.adapter)
                    .map(|_| ()),
            )?;
            failure(sink.write_text("task_loss.csv", &ops::loss_curve_csv(&task_run)).map(|_| ()))?;
            failure(
                sink.write_text("safety_loss.csv", &ops::loss_curve_csv(&safety_run))
                    .map(|_| ()),
            )?;

            let rows = failure(ops::run_sweep(
                &cfg,
                &weights,
                &task_run.adapter,
                &safety_run.adapter,
                &cfg.lambda_grid,
                &ALL_SUITES,
                &*judge,
                jobs,
            ))?;

            failure(sink.write_json("sweep_rows.json", &rows).map(|_| ()))?;
            failure(sink.write_text("sweep.csv", &ops::sweep_wide_csv(&rows)).map(|_| ()))?;
            failure(sink.write_text("tradeoff.csv", &ops::tradeoff_csv(&rows)).map(|_| ()))?;
            if let Some(table) = failure(ops::render_harm_table(&rows))? {
                failure(sink.write_text("harm_table.csv", &table.csv).map(|_| ()))?;
                failure(sink.write_text("harm_table.txt", &table.text).map(|_| ()))?;
                println!("{}", table.text.trim_end());
            }
            // per-lambda artifacts: the fused adapter (when fusion
            // produces one) and the report
            for row in &rows {
                if let Some(metrics) = &row.metrics {
                    let dir = format!("lambda_{}", row.lambda);
                    let spec = failure(ops::sweep_spec(&cfg, row.lambda).map_err(Into::into))?;
                    if spec.strategy == FusionStrategy::Concatenation {
                        let fused = failure(
                            lorafuse_core::fusion::fuse_concat(
                                &[task_run.adapter.clone(), safety_run.adapter.clone()],
                                &spec,
                            )
                            .map_err(Into::into),
                        )?;
                        failure(
                            ops::save_adapter_artifact(
                                &mut sink,
                                &format!("{dir}/fused.lfa"),
                                &fused,
                            )
                            .map(|_| ()),
                        )?;
                    }
                    failure(
                        sink.write_json(&format!("{dir}/report.json"), &metrics.report)
                            .map(|_| ()),
                    )?;
                }
            }
            failure(sink.write_run_meta("sweep", cfg.seed))?;

            let failures: Vec<&ops::SweepRowOut> = rows.iter().filter(|r| !r.ok).collect();
            if failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for row in failures {
                    eprintln!(
                        "lambda {} failed: {}",
                        row.lambda,
                        row.error.as_deref().unwrap_or("unknown")
                    );
                }
                Ok(ExitCode::from(1))
            }
        }

        Command::Dataset { action } => run_dataset(action, cfg, force),

        Command::Report { rows } => {
            usage(exists(&rows, "rows file"))?;
            let text = usage(
                std::fs::read_to_string(&rows)
                    .with_context(|| format!("cannot read {}", rows.display())),
            )?;
            let rows: Vec<ops::SweepRowOut> = usage(
                serde_json::from_str(&text).context("rows file is not valid sweep output"),
            )?;
            let mut sink = usage(ArtifactSink::new(&cfg.output_dir, force))?;
            usage(sink.preflight(&["tradeoff.csv", "sweep.csv", "harm_table.csv", "harm_table.txt"]))?;
            failure(sink.write_text("tradeoff.csv", &ops::tradeoff_csv(&rows)).map(|_| ()))?;
            failure(sink.write_text("sweep.csv", &ops::sweep_wide_csv(&rows)).map(|_| ()))?;
            if let Some(table) = failure(ops::render_harm_table(&rows))? {
                failure(sink.write_text("harm_table.csv", &table.csv).map(|_| ()))?;
                failure(sink.write_text("harm_table.txt", &table.text).map(|_| ()))?;
                println!("{}", table.text.trim_end());
            }
            failure(sink.write_run_meta("report", cfg.seed))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_dataset(action: DatasetCmd, cfg: RunConfig, force: bool) -> Result<ExitCode, AppError> {
    match action {
        DatasetCmd::Validate { path, r#type } => {
            usage(exists(&path, "dataset"))?;
            let ty = match r#type {
                Some(ty) => ty,
                None => usage(ops::sniff_dataset_type(&path))?,
            };
            let findings = failure(ops::validate_dataset(&path, ty))?;
            if findings.is_empty() {
                println!("{}: 0 findings", path.display());
                return Ok(ExitCode::SUCCESS);
            }
            for finding in &findings {
                println!("{finding}");
            }
            let has_errors = findings.iter().any(|f| f.severity == Severity::Error);
            Ok(if has_errors { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }

        DatasetCmd::Filter { data, judge, threshold } => {
            let mut cfg = cfg;
            if let Some(kind) = judge {
                cfg.judge.kind = kind;
            }
            let path = data.unwrap_or_else(|| cfg.data.safety.clone());
            usage(exists(&path, "safety data"))?;
            let judge = usage(ops::build_judge(&cfg))?;
            let loaded = failure(
                lorafuse_core::dataset::load_safety_jsonl(&path).map_err(Into::into),
            )?;
            ops::print_findings(&loaded.findings);
            let filter_cfg = FilterConfig {
                safe_threshold: threshold.unwrap_or(cfg.judge.safe_threshold),
                policy: cfg.judge.policy.clone(),
            };
            let outcome = failure(
                lorafuse_core::dataset::filter_with_judge(&loaded.items, &*judge, &filter_cfg)
                    .map_err(Into::into),
            )?;
            ops::print_findings(&outcome.findings);
            let mut sink = usage(ArtifactSink::new(&cfg.output_dir, force))?;
            usage(sink.preflight(&["filtered.jsonl", "rejections.csv"]))?;
            let out_path = failure(sink.claim("filtered.jsonl"))?;
            failure(save_safety_jsonl(&outcome.kept, &out_path).map_err(Into::into))?;
            failure(
                sink.write_text("rejections.csv", &outcome.rejection_csv())
                    .map(|_| ()),
            )?;
            failure(sink.write_run_meta("dataset filter", cfg.seed))?;
            println!(
                "kept {} of {} pairs -> {}",
                outcome.kept.examples.len(),
                loaded.items.examples.len(),
                out_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        DatasetCmd::Mix { task, safety, fraction } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(AppError::Usage(anyhow!("--fraction must lie in [0, 1]")));
            }
            let task_path = task.unwrap_or_else(|| cfg.data.task.clone());
            let safety_path = safety.unwrap_or_else(|| cfg.data.safety.clone());
            usage(exists(&task_path, "task data"))?;
            usage(exists(&safety_path, "safety data"))?;
            let mixed = failure(ops::mix_files(&task_path, &safety_path, fraction, cfg.seed))?;
            let mut sink = usage(ArtifactSink::new(&cfg.output_dir, force))?;
            usage(sink.preflight(&["mixed.jsonl"]))?;
            let out_path = failure(sink.claim("mixed.jsonl"))?;
            failure(save_instructions_jsonl(&mixed, &out_path).map_err(Into::into))?;
            failure(sink.write_run_meta("dataset mix", cfg.seed))?;
            println!("wrote {} examples -> {}", mixed.len(), out_path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
