//! Planner, editor, verifier and judge interfaces.
//!
//! Two implementations ship: [`sim`] runs against the deterministic simulated
//! world, [`http`] talks to hosted chat-completion and image endpoints.

pub mod http;
pub mod sim;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ledger::GoalLedger;
use crate::sim::{Canvas, SimError};
use crate::stream::StreamKey;
use crate::task::Goal;
use crate::trajectory::Trajectory;

pub use crate::ledger::Verdict;

/// Opaque image reference passed between editor, judge and verifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageHandle {
    Canvas(Canvas),
    File(PathBuf),
}

impl ImageHandle {
    pub fn as_canvas(&self) -> Option<&Canvas> {
        match self {
            ImageHandle::Canvas(c) => Some(c),
            ImageHandle::File(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedPlan {
    pub goals: Vec<Goal>,
    pub one_shot_feasibility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    FullCompose,
    LocalEdit,
    Regenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directive {
    pub text: String,
    pub addressed_goal_ids: Vec<String>,
    pub mode: EditMode,
}

impl Directive {
    /// Checks the directive invariants: some goal addressed, no duplicates,
    /// and local edits limited to batches of one or two.
    pub fn new(text: impl Into<String>, addressed: Vec<String>, mode: EditMode) -> Result<Self, BackendError> {
        if addressed.is_empty() {
            return Err(BackendError::EmptyBatch);
        }
        let unique: BTreeSet<&String> = addressed.iter().collect();
        if unique.len() != addressed.len() {
            return Err(BackendError::Precondition("directive addresses a goal twice".into()));
        }
        if mode == EditMode::LocalEdit && addressed.len() > 2 {
            return Err(BackendError::BatchTooLarge(addressed.len()));
        }
        Ok(Self {
            text: text.into(),
            addressed_goal_ids: addressed,
            mode,
        })
    }

    pub fn addressed_set(&self) -> BTreeSet<String> {
        self.addressed_goal_ids.iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub image: ImageHandle,
    pub seed: u64,
    pub judge_score: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("{endpoint}: transport error: {message}")]
    Transport { endpoint: String, message: String },
    #[error("{endpoint}: authentication failed (status {status})")]
    Auth { endpoint: String, status: u16 },
    #[error("{endpoint}: unexpected status {status}: {body}")]
    Status { endpoint: String, status: u16, body: String },
    #[error("{endpoint}: could not parse structured output after {attempts} attempts: {message}")]
    Parse {
        endpoint: String,
        attempts: usize,
        message: String,
    },
    #[error("batch size exceeds 2 (got {0})")]
    BatchTooLarge(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty candidate list")]
    NoCandidates,
    #[error("candidate count must be at least 1")]
    ZeroCandidates,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("unsupported image handle: {0}")]
    UnsupportedImage(String),
    #[error("judge score {0} outside [0, 5]")]
    ScoreOutOfRange(f64),
    #[error("verifier returned {got} verdicts for {expected} goals")]
    Arity { expected: usize, got: usize },
    #[error("missing environment variable {0}")]
    MissingEnv(String),
    #[error("prompt template `{name}`: {message}")]
    Prompt { name: String, message: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub trait Planner: Send + Sync {
    fn plan_goals(&self, instruction: &str, source_image: Option<&ImageHandle>) -> Result<ExtractedPlan, BackendError>;

    fn propose_directive(
        &self,
        ledger: &GoalLedger,
        batch: &[Goal],
        history: &Trajectory,
    ) -> Result<Directive, BackendError>;

    /// Rephrases a failed directive for the same goals.
    fn reprompt(&self, failed: &Directive, batch: &[Goal], history: &Trajectory) -> Result<Directive, BackendError>;

    /// Answer to "can the image still improve?", as a confidence in `[0, 1]`.
    fn improvement_confidence(
        &self,
        ledger: &GoalLedger,
        goals: &[Goal],
        history: &Trajectory,
    ) -> Result<f64, BackendError>;
}

pub trait Editor: Send + Sync {
    /// The image a run starts from: the source photo for I2I, none for T2I.
    fn initial_image(&self) -> Option<ImageHandle>;

    fn edit(&self, directive: &Directive, seed: u64, base: Option<&ImageHandle>) -> Result<ImageHandle, BackendError>;
}

pub trait Verifier: Send + Sync {
    fn verify(&self, image: &ImageHandle, goals: &[Goal]) -> Result<Vec<Verdict>, BackendError>;
}

pub trait Judge: Send + Sync {
    /// Quality of `image` with respect to `goals`, on a 0 to 5 scale.
    fn score(&self, image: &ImageHandle, goals: &[Goal]) -> Result<f64, BackendError>;
}

/// The four roles wired for one task run.
#[derive(Clone)]
pub struct Backends {
    pub planner: Arc<dyn Planner>,
    pub editor: Arc<dyn Editor>,
    pub verifier: Arc<dyn Verifier>,
    pub judge: Arc<dyn Judge>,
}

/// Builds the per-task backend set. Simulated roles need the task to seed their world.
pub trait BackendFactory: Send + Sync {
    fn for_task(&self, task: &crate::task::Task) -> Result<Backends, BackendError>;

    /// True when every role runs against the simulated world.
    fn is_simulated(&self) -> bool;
}

/// `n` pairwise-distinct candidate seeds derived from `key`.
pub fn candidate_seeds(key: StreamKey, n: usize) -> Vec<u64> {
    let mut seen = BTreeSet::new();
    let mut seeds = Vec::with_capacity(n);
    let mut counter = 0u64;
    while seeds.len() < n {
        let seed = key.child(counter).value();
        counter += 1;
        if seed != 0 && seen.insert(seed) {
            seeds.push(seed);
        }
    }
    seeds
}

/// Generates `n` candidates for `directive`, at most `max_in_flight` concurrently.
/// Results keep seed order regardless of completion order.
pub fn generate_candidates(
    editor: &dyn Editor,
    directive: &Directive,
    n: usize,
    base: Option<&ImageHandle>,
    seed_key: StreamKey,
    max_in_flight: usize,
) -> Result<Vec<Candidate>, BackendError> {
    if n == 0 {
        return Err(BackendError::ZeroCandidates);
    }
    if directive.mode == EditMode::LocalEdit && base.is_none() {
        return Err(BackendError::Precondition("local edit requires a base image".into()));
    }
    let seeds = candidate_seeds(seed_key, n);
    let make = |seed: &u64| -> Result<Candidate, BackendError> {
        Ok(Candidate {
            image: editor.edit(directive, *seed, base)?,
            seed: *seed,
            judge_score: None,
        })
    };
    let mut out = Vec::with_capacity(n);
    if max_in_flight <= 1 || n == 1 {
        for seed in &seeds {
            out.push(make(seed)?);
        }
    } else {
        for chunk in seeds.chunks(max_in_flight) {
            let results: Vec<Result<Candidate, BackendError>> = chunk.par_iter().map(make).collect();
            for r in results {
                out.push(r?);
            }
        }
    }
    Ok(out)
}

/// Scores every candidate and returns the argmax; ties go to the lowest index.
pub fn judge_select(judge: &dyn Judge, candidates: &mut [Candidate], goals_in_scope: &[Goal]) -> Result<usize, BackendError> {
    if candidates.is_empty() {
        return Err(BackendError::NoCandidates);
    }
    for c in candidates.iter_mut() {
        let score = judge.score(&c.image, goals_in_scope)?;
        if !(0.0..=5.0).contains(&score) {
            return Err(BackendError::ScoreOutOfRange(score));
        }
        c.judge_score = Some(score);
    }
    Ok(argmax_first(candidates.iter().map(|c| c.judge_score.unwrap_or(0.0))))
}

pub(crate) fn argmax_first(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Runs the verifier and enforces the arity contract: one verdict per goal, in goal order.
pub fn verify(verifier: &dyn Verifier, image: &ImageHandle, goals: &[Goal]) -> Result<Vec<Verdict>, BackendError> {
    if goals.is_empty() {
        return Err(BackendError::Precondition("verify needs at least one goal".into()));
    }
    let verdicts = verifier.verify(image, goals)?;
    if verdicts.len() != goals.len() {
        return Err(BackendError::Arity {
            expected: goals.len(),
            got: verdicts.len(),
        });
    }
    let mut ordered = Vec::with_capacity(goals.len());
    for goal in goals {
        let v = verdicts
            .iter()
            .find(|v| v.goal_id == goal.id)
            .ok_or_else(|| BackendError::Precondition(format!("no verdict for goal {}", goal.id)))?;
        ordered.push(Verdict {
            confidence: v.confidence.clamp(0.0, 1.0),
            ..v.clone()
        });
    }
    Ok(ordered)
}
