//! Workflows behind the `director` binary: run a suite, score it, train the
//! planner policy, render reports.

pub mod config;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use director_core::backends::sim::SimFactory;
use director_core::backends::BackendFactory;
use director_core::director::{run_task_with_policy, DecisionPolicy};
use director_core::grpo::{
    evaluate_policy, history_from_csv, history_to_csv, train, EvalSummary, GrpoError, PolicyDriver, PolicyParams,
    Selection,
};
use director_core::metrics::{aggregate, render_table, score_trajectory, BenchReport, TaskScore};
use director_core::suite::{generate_suite, write_generated_suite, SuiteSpec};
use director_core::task::{load_suite, Task, TaskError};
use director_core::trajectory::Trajectory;

pub use config::AppConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const POLICY_FILE: &str = "policy.json";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {message}", path.display())]
    Path { path: PathBuf, message: String },
    #[error("suite error: {0}")]
    Suite(#[from] TaskError),
    #[error("no trajectories found in {}", .0.display())]
    NoTrajectories(PathBuf),
    #[error("{failed} of {total} tasks aborted")]
    TaskFailures { failed: usize, total: usize },
    #[error("{0}")]
    Train(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for configuration and input errors, 1 for failures while working.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Path { .. } | CliError::Suite(_) | CliError::NoTrajectories(_) => 2,
            CliError::TaskFailures { .. } | CliError::Train(_) | CliError::Io { .. } => 1,
        }
    }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_suite_dir(dir: &Path) -> Result<Vec<Task>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Path {
            path: dir.to_path_buf(),
            message: "task directory not found".into(),
        });
    }
    Ok(load_suite(dir)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub task_id: String,
    pub status: String,
    pub stop_reason: Option<String>,
    pub iterations: usize,
    pub editor_calls: usize,
    pub error: Option<String>,
    /// Microseconds since the run started.
    pub started_us: u128,
    pub finished_us: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub run_seed: u64,
    pub sim_seed: u64,
    pub suite: PathBuf,
    pub jobs: usize,
    pub policy: Option<PathBuf>,
    pub started_unix_ms: u128,
    pub tasks: Vec<TaskEntry>,
}

/// Runs every task of the suite, writing `<out>/<task id>.jsonl` per task and
/// `<out>/manifest.json`. At most `jobs` tasks are in flight.
pub fn cmd_run(
    cfg: &AppConfig,
    suite: &Path,
    out: &Path,
    jobs: usize,
    policy: Option<&Path>,
) -> Result<RunManifest, CliError> {
    let tasks = load_suite_dir(suite)?;
    create_dir(out)?;
    let factory = cfg.factory(suite, &out.join("images"))?;
    let driver = match policy {
        Some(path) => Some(PolicyDriver {
            params: PolicyParams::load(path).map_err(|e| CliError::Config(e.to_string()))?,
            selection: Selection::Greedy,
        }),
        None => None,
    };
    let jobs = jobs.max(1);
    let started = Instant::now();
    let started_unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let next = AtomicUsize::new(0);
    let entries: Mutex<Vec<Option<Result<TaskEntry, CliError>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..jobs.min(tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(task) = tasks.get(i) else { break };
                let t0 = started.elapsed().as_micros();
                let policy = driver.as_ref().map(|d| d as &dyn DecisionPolicy);
                let entry = run_one(cfg, &factory, task, policy, out).map(|mut e| {
                    e.started_us = t0;
                    e.finished_us = started.elapsed().as_micros();
                    e
                });
                entries.lock().expect("no worker panicked")[i] = Some(entry);
            });
        }
    });

    let mut manifest = RunManifest {
        config_hash: cfg.hash(),
        run_seed: cfg.run.seed,
        sim_seed: cfg.sim.seed,
        suite: suite.to_path_buf(),
        jobs,
        policy: policy.map(Path::to_path_buf),
        started_unix_ms,
        tasks: Vec::new(),
    };
    for entry in entries.into_inner().expect("no worker panicked") {
        manifest.tasks.push(entry.expect("every task ran")?);
    }
    write_file(
        &out.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    let failed = manifest.tasks.iter().filter(|t| t.status != "ok").count();
    if failed > 0 {
        return Err(CliError::TaskFailures {
            failed,
            total: manifest.tasks.len(),
        });
    }
    Ok(manifest)
}

fn run_one(
    cfg: &AppConfig,
    factory: &dyn BackendFactory,
    task: &Task,
    policy: Option<&dyn DecisionPolicy>,
    out: &Path,
) -> Result<TaskEntry, CliError> {
    let mut entry = TaskEntry {
        task_id: task.id.clone(),
        status: "ok".into(),
        stop_reason: None,
        iterations: 0,
        editor_calls: 0,
        error: None,
        started_us: 0,
        finished_us: 0,
    };
    let trajectory = match factory.for_task(task) {
        Err(e) => {
            entry.status = "aborted".into();
            entry.error = Some(e.to_string());
            None
        }
        Ok(backends) => match run_task_with_policy(task, &cfg.run, &backends, policy) {
            Ok(t) => Some(t),
            Err(e) => {
                entry.status = "aborted".into();
                entry.error = Some(e.to_string());
                e.partial().cloned()
            }
        },
    };
    if let Some(t) = trajectory {
        if let Some(terminal) = &t.terminal {
            entry.stop_reason = Some(terminal.stop_reason.to_string());
        }
        entry.iterations = t.iterations();
        entry.editor_calls = t.editor_calls();
        write_file(&out.join(format!("{}.jsonl", task.id)), t.to_jsonl())?;
    }
    Ok(entry)
}

/// Reads every `*.jsonl` trajectory in `dir`, sorted by file name.
pub fn read_trajectories(dir: &Path) -> Result<Vec<Trajectory>, CliError> {
    let listing = std::fs::read_dir(dir).map_err(|e| CliError::Path {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut paths: Vec<PathBuf> = listing
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::NoTrajectories(dir.to_path_buf()));
    }
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
                path: p.clone(),
                source,
            })?;
            Trajectory::from_jsonl(&text).map_err(|e| CliError::Path {
                path: p.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub report: BenchReport,
    pub tasks: Vec<TaskScore>,
}

/// Scores the trajectories in `out`, writes `<out>/report.json` and returns
/// the report with its rendered table.
pub fn cmd_eval(out: &Path, threshold: f64) -> Result<(ReportFile, String), CliError> {
    let trajectories = read_trajectories(out)?;
    let tasks: Vec<TaskScore> = trajectories
        .iter()
        .map(|t| score_trajectory(t, threshold).map_err(|e| CliError::Train(e.to_string())))
        .collect::<Result<_, _>>()?;
    let report = aggregate(&tasks).map_err(|e| CliError::Train(e.to_string()))?;
    let table = render_table(&report);
    let file = ReportFile { report, tasks };
    write_file(
        &out.join(REPORT_FILE),
        serde_json::to_string_pretty(&file).expect("report serializes"),
    )?;
    Ok((file, table))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub before: EvalSummary,
    pub after: EvalSummary,
}

/// Trains the planner policy on simulated rollouts. Writes `<out>/policy.json`
/// and `<out>/history.csv`; with `resume` continues from both.
pub fn cmd_train(cfg: &AppConfig, suite: Option<&Path>, out: &Path, resume: bool) -> Result<TrainSummary, CliError> {
    if !cfg.backends.all_sim() {
        return Err(CliError::Config("training requires sim backends".into()));
    }
    let tasks = match suite {
        Some(dir) => load_suite_dir(dir)?,
        None => generate_suite(&cfg.train.suite),
    };
    let holdout = generate_suite(&cfg.train.holdout);
    let sim = cfg.train.sim.clone().unwrap_or_else(|| cfg.sim.clone());
    let factory = SimFactory::new(sim);
    create_dir(out)?;
    let reference = PolicyParams {
        temperature: cfg.train.grpo.temperature,
        ..PolicyParams::heuristic_prior()
    };
    let (policy_path, history_path) = (out.join(POLICY_FILE), out.join(HISTORY_FILE));
    let (start, history) = if resume {
        let params = PolicyParams::load(&policy_path).map_err(|e| CliError::Config(e.to_string()))?;
        let text = std::fs::read_to_string(&history_path).map_err(|e| CliError::Path {
            path: history_path.clone(),
            message: e.to_string(),
        })?;
        (params, history_from_csv(&text).map_err(CliError::Config)?)
    } else {
        (reference.clone(), Vec::new())
    };
    let outcome = match train(&cfg.train.grpo, &cfg.run, &factory, &tasks, start, &reference, history) {
        Ok(o) => o,
        Err(GrpoError::Diverged { history, .. }) => {
            write_file(&history_path, history_to_csv(&history))?;
            return Err(CliError::Train("training diverged; history written, parameters not saved".into()));
        }
        Err(e) => return Err(CliError::Train(e.to_string())),
    };
    outcome
        .params
        .save(&policy_path)
        .map_err(|e| CliError::Train(e.to_string()))?;
    write_file(&history_path, history_to_csv(&outcome.history))?;
    let seeds = &cfg.train.eval_seeds;
    let before = evaluate_policy(&reference, &holdout, &factory, &cfg.run, seeds).map_err(CliError::Train)?;
    let after = evaluate_policy(&outcome.params, &holdout, &factory, &cfg.run, seeds).map_err(CliError::Train)?;
    Ok(TrainSummary {
        epochs: outcome.history.len(),
        before,
        after,
    })
}

/// Side-by-side table of the `report.json` files in `dirs`.
pub fn cmd_report(dirs: &[PathBuf]) -> Result<String, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Config("report needs at least one output directory".into()));
    }
    let mut out = String::new();
    let mut rows: Vec<(String, String)> = Vec::new();
    for dir in dirs {
        let path = dir.join(REPORT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Path {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let file: ReportFile = serde_json::from_str(&text).map_err(|e| CliError::Path {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let table = render_table(&file.report);
        let mut lines = table.lines();
        let header = lines.next().unwrap_or_default().to_string();
        rows.push((header, format!("{}\t{}", dir.display(), lines.next().unwrap_or_default())));
    }
    let label_width = dirs.iter().map(|d| d.display().to_string().len()).max().unwrap_or(0).max(3);
    out.push_str(&format!("{:<label_width$}  {}\n", "Run", rows[0].0));
    for (_, row) in &rows {
        let (label, values) = row.split_once('\t').expect("row has a label");
        out.push_str(&format!("{label:<label_width$}  {values}\n"));
    }
    Ok(out)
}

/// Writes a generated suite directory.
pub fn cmd_generate(spec: &SuiteSpec, out: &Path) -> Result<usize, CliError> {
    let tasks = generate_suite(spec);
    write_generated_suite(out, &tasks)?;
    Ok(tasks.len())
}
