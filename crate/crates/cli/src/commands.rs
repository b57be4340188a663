use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use vragent_core::eval::{self, DatasetRecord, EvalRecord, MetricsReport};
use vragent_core::rar::{load_knowledge_base, VectorIndex};
use vragent_core::search::{load_journal, replay, Journal, SearchRun};
use vragent_core::trajectory::{collect, export_trajectories, Trajectory};
use vragent_core::vte::{vte_pipeline, VisualTokens, VteConfig};
use vragent_core::{EntitySet, NodeId, PathResult, Query, QuestionKind};

use crate::config::AppConfig;
use crate::error::CliError;

pub struct RunArgs {
    pub config: PathBuf,
    pub image: String,
    pub question: String,
    pub entities: Option<String>,
    pub id: String,
    pub kind: QuestionKind,
    pub journal: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub json: bool,
}

fn load_config(path: &Path, seed: Option<u64>, output_dir: Option<PathBuf>) -> Result<AppConfig, CliError> {
    let mut cfg = AppConfig::load(path)?;
    if let Some(s) = seed {
        cfg.search.rng_seed = s;
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    Ok(cfg)
}

fn knowledge(cfg: &AppConfig) -> Result<Option<Arc<VectorIndex>>, CliError> {
    let Some(kb) = &cfg.knowledge_base else { return Ok(None) };
    let backends = cfg.build_backends()?;
    let index = load_knowledge_base(kb, backends.embedder.as_deref()).map_err(|e| CliError::from(e).at(kb))?;
    Ok(Some(Arc::new(index)))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn path_summary(path: &PathResult) -> String {
    let ids: Vec<String> = path.node_ids.iter().map(|i| i.to_string()).collect();
    format!("{} (total reward {})", ids.join(" -> "), path.total_reward)
}

/// File-name-safe form of a query id.
fn slug(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn run(args: RunArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, args.seed, args.output_dir)?;
    let backends = cfg.build_backends()?;
    let query = Query::new(args.id, args.question, args.image, args.kind)?;
    let journal = Journal::new();
    let run = SearchRun {
        config: cfg.search.clone(),
        rar: cfg.rar,
        knowledge: knowledge(&cfg)?,
        entities: args.entities.as_deref().map(EntitySet::parse_list),
        journal: Some(journal.clone()),
    };
    let outcome = run.run(&query, &backends)?;
    let journal_path =
        args.journal.unwrap_or_else(|| cfg.output_dir.join(format!("journal-{}.jsonl", slug(&query.id))));
    write_file(&journal_path, &journal.to_jsonl())?;
    if args.json {
        println!("{}", serde_json::to_string(&outcome.path).expect("path serializes"));
    } else {
        println!("answer: {}", outcome.path.final_answer);
        println!("path: {}", path_summary(&outcome.path));
        println!("journal: {}", journal_path.display());
    }
    Ok(())
}

pub struct BatchArgs {
    pub config: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub parallel: usize,
    pub seed: Option<u64>,
    pub json: bool,
}

#[derive(Debug, Clone, Serialize)]
struct BatchOutput {
    id: String,
    prediction: String,
    reference: String,
    #[serde(rename = "type")]
    kind: QuestionKind,
    path: Vec<NodeId>,
    total_reward: f64,
}

#[derive(Debug, Clone, Serialize)]
struct BatchFailure {
    line: usize,
    id: Option<String>,
    error: String,
}

#[derive(Debug, Clone, Serialize)]
struct BatchSummary {
    input_lines: usize,
    completed: usize,
    failures: usize,
    failed: Vec<BatchFailure>,
    /// Absent when nothing completed.
    metrics: Option<MetricsReport>,
}

/// Summary file written next to the batch output.
pub fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("summary.json")
}

pub fn batch(args: BatchArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, args.seed, None)?;
    cfg.build_backends()?;
    let text = fs::read_to_string(&args.dataset).map_err(|e| CliError::io(&args.dataset, e))?;
    let index = knowledge(&cfg)?;

    let mut jobs: Vec<(usize, DatasetRecord)> = Vec::new();
    let mut failed = Vec::new();
    let mut input_lines = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        input_lines += 1;
        match eval::parse_dataset(line) {
            Ok(mut r) if r.len() == 1 => jobs.push((i + 1, r.remove(0))),
            Ok(_) => failed.push(BatchFailure { line: i + 1, id: None, error: "not a single record".into() }),
            Err(e) => {
                let error = match e {
                    eval::EvalError::Schema { message, .. } => message,
                    other => other.to_string(),
                };
                log::warn!("{} line {}: skipped: {error}", args.dataset.display(), i + 1);
                failed.push(BatchFailure { line: i + 1, id: None, error });
            }
        }
    }

    let results = run_jobs(&cfg, index, &jobs, args.parallel.max(1));
    let mut outputs = Vec::new();
    for ((line, record), result) in jobs.iter().zip(results) {
        match result {
            Ok(path) => outputs.push(BatchOutput {
                id: record.id.clone(),
                prediction: path.final_answer,
                reference: record.answer.clone(),
                kind: record.kind,
                path: path.node_ids,
                total_reward: path.total_reward,
            }),
            Err(e) => {
                if let CliError::Config(_) = e {
                    return Err(e);
                }
                log::warn!("record {} (line {line}) failed: {e}", record.id);
                failed.push(BatchFailure { line: *line, id: Some(record.id.clone()), error: e.to_string() });
            }
        }
    }
    failed.sort_by_key(|f| f.line);

    let mut body = String::new();
    for o in &outputs {
        body.push_str(&serde_json::to_string(o).expect("output serializes"));
        body.push('\n');
    }
    write_file(&args.out, &body)?;

    let records: Vec<EvalRecord> = outputs
        .iter()
        .map(|o| EvalRecord {
            id: o.id.clone(),
            prediction: o.prediction.clone(),
            reference: o.reference.clone(),
            question_kind: o.kind,
        })
        .collect();
    let summary = BatchSummary {
        input_lines,
        completed: outputs.len(),
        failures: failed.len(),
        failed,
        metrics: eval::report(&records).ok(),
    };
    let summary_json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&summary_path(&args.out), &summary_json)?;
    if args.json {
        println!("{summary_json}");
    } else {
        println!("completed {} of {} records, {} failed", summary.completed, summary.input_lines, summary.failures);
        match &summary.metrics {
            Some(m) => println!("{m}"),
            None => println!("no completed records; metrics absent"),
        }
    }
    Ok(())
}

/// Runs every job with fresh backends, at most `parallel` at a time.
/// Results come back in job order.
fn run_jobs(
    cfg: &AppConfig,
    index: Option<Arc<VectorIndex>>,
    jobs: &[(usize, DatasetRecord)],
    parallel: usize,
) -> Vec<Result<PathResult, CliError>> {
    let slots: Vec<Mutex<Option<Result<PathResult, CliError>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((_, record)) = jobs.get(i) else { break };
        let result = run_record(cfg, index.clone(), record);
        *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(result);
    };
    std::thread::scope(|s| {
        for _ in 0..parallel.min(jobs.len()).max(1) {
            s.spawn(work);
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .unwrap_or_else(|p| p.into_inner())
                .unwrap_or_else(|| Err(CliError::Data("record was not processed".into())))
        })
        .collect()
}

fn run_record(cfg: &AppConfig, knowledge: Option<Arc<VectorIndex>>, record: &DatasetRecord) -> Result<PathResult, CliError> {
    let backends = cfg.build_backends()?;
    let query = Query::new(record.id.clone(), record.question.clone(), record.image.clone(), record.kind)?;
    let run = SearchRun { config: cfg.search.clone(), rar: cfg.rar, knowledge, entities: None, journal: None };
    Ok(run.run(&query, &backends)?.path)
}

pub fn replay_cmd(journal: &Path, verify: bool, json: bool) -> Result<(), CliError> {
    let events = load_journal(journal).map_err(|e| CliError::from(e).at(journal))?;
    let r = replay(&events).map_err(|e| CliError::from(e).at(journal))?;
    let path = &r.recomputed;
    if json {
        println!("{}", serde_json::to_string(path).expect("path serializes"));
    } else {
        println!("answer: {}", path.final_answer);
        println!("path: {}", path_summary(path));
        println!("nodes: {}", r.tree.len());
    }
    if verify {
        if !r.matches() {
            return Err(CliError::Mismatch(format!(
                "recorded {} but the rebuilt tree gives {}",
                serde_json::to_string(&r.recorded).expect("path serializes"),
                serde_json::to_string(&r.recomputed).expect("path serializes"),
            )));
        }
        if !json {
            println!("verified: rebuilt path matches the recorded result");
        }
    }
    Ok(())
}

pub fn export_trajectories_cmd(journals: &[PathBuf], out: &Path, baseline: f64) -> Result<(), CliError> {
    if !baseline.is_finite() {
        return Err(CliError::Data("baseline must be finite".into()));
    }
    let mut trajs: Vec<Trajectory> = Vec::new();
    for j in journals {
        let events = load_journal(j).map_err(|e| CliError::from(e).at(j))?;
        let r = replay(&events).map_err(|e| CliError::from(e).at(j))?;
        let mut t = collect(&r.tree, &r.recorded).map_err(|e| CliError::from(e).at(j))?;
        t.assign_advantages(baseline);
        trajs.push(t);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    export_trajectories(&trajs, out).map_err(|e| CliError::from(e).at(out))?;
    let steps: usize = trajs.iter().map(|t| t.steps.len()).sum();
    println!("wrote {} trajectories ({steps} steps) to {}", trajs.len(), out.display());
    Ok(())
}

pub struct VteArgs {
    pub tokens: PathBuf,
    pub confidence: f64,
    pub config: Option<PathBuf>,
    pub kappa: Option<f64>,
    pub out: PathBuf,
}

pub fn vte_apply(args: VteArgs) -> Result<(), CliError> {
    let mut cfg: VteConfig = match &args.config {
        Some(p) => AppConfig::load(p)?.vte,
        None => VteConfig::default(),
    };
    if let Some(k) = args.kappa {
        cfg.kappa = k;
    }
    cfg.validate().map_err(|e| CliError::Config(format!("vte: {e}")))?;
    let tokens = VisualTokens::load(&args.tokens).map_err(|e| CliError::from(e).at(&args.tokens))?;
    let outcome = vte_pipeline(&tokens, args.confidence, &cfg).map_err(|e| CliError::from(e).at(&args.tokens))?;
    write_file(&args.out, &serde_json::to_string_pretty(&outcome.tokens).expect("tokens serialize"))?;
    println!("a_roi: {}", outcome.a_roi);
    println!("a_bg: {}", outcome.a_bg);
    println!("beta: {}", outcome.beta);
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn metrics(dataset: &Path, predictions: &Path, json: bool) -> Result<(), CliError> {
    let data = eval::load_dataset(dataset).map_err(|e| CliError::from(e).at(dataset))?;
    let preds = eval::load_predictions(predictions).map_err(|e| CliError::from(e).at(predictions))?;
    let records = eval::join(&data, &preds)?;
    let report = eval::report(&records)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!("{report}");
    }
    Ok(())
}
