//! Simulated planner, editor, verifier and judge over [`SimWorld`].

use rand::Rng;

use super::{
    BackendError, BackendFactory, Backends, Directive, EditMode, Editor, ExtractedPlan, ImageHandle, Judge, Planner,
    Verdict, Verifier,
};
use crate::ledger::GoalLedger;
use crate::sim::{Canvas, SimConfig, SimWorld};
use crate::stream::StreamKey;
use crate::task::{Goal, GoalTag, GoalType, Task};
use crate::trajectory::Trajectory;
use std::sync::Arc;

/// Clause separator the simulated planner splits instructions on.
pub const CLAUSE_SEPARATOR: &str = "; ";

const COLOR_WORDS: &[&str] = &[
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "black", "white", "gray", "grey", "gold", "silver",
    "brown", "teal", "cyan", "magenta", "crimson", "amber",
];

fn tokens(clause: &str) -> Vec<String> {
    clause
        .split(|c: char| !c.is_alphanumeric() && c != '-')
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn has_any(tokens: &[String], prefixes: &[&str]) -> bool {
    tokens.iter().any(|t| prefixes.iter().any(|p| t.starts_with(p)))
}

/// Keyword classifier used by the simulated planner.
pub fn classify_clause(clause: &str) -> GoalType {
    let t = tokens(clause);
    if has_any(&t, &["text", "title", "caption", "letter", "typograph", "headline", "slogan", "label"]) {
        GoalType::Text
    } else if has_any(&t, &["light", "shadow", "glow", "backlit", "illuminat", "sunlight", "lamp"]) {
        GoalType::Lighting
    } else if has_any(&t, &["color", "colour", "temperature", "hue", "tint", "palette", "saturat"]) {
        GoalType::Color
    } else if has_any(&t, &["layout", "composition", "position", "align", "foreground", "background", "frame", "center"]) {
        GoalType::Composition
    } else if has_any(&t, &["blur", "grain", "bokeh", "fog", "mist", "haze", "vignette", "effect", "sparkle", "smoke"]) {
        GoalType::Effect
    } else {
        GoalType::AddObject
    }
}

pub fn tag_for(goal_type: GoalType) -> GoalTag {
    match goal_type {
        GoalType::Text => GoalTag::TextOverlay,
        GoalType::Composition => GoalTag::Layout,
        GoalType::Lighting | GoalType::Color => GoalTag::Global,
        GoalType::AddObject | GoalType::Effect => GoalTag::Local,
    }
}

fn is_parameter(token: &str) -> bool {
    token.chars().any(|c| c.is_ascii_digit()) || COLOR_WORDS.contains(&token)
}

/// Two clauses conflict when they share a goal type and differ only in
/// parameter words (numbers, color names).
pub fn clauses_conflict(a: &str, b: &str) -> bool {
    if classify_clause(a) != classify_clause(b) {
        return false;
    }
    let (ta, tb) = (tokens(a), tokens(b));
    let split = |t: &[String]| -> (Vec<String>, Vec<String>) { t.iter().cloned().partition(|w| !is_parameter(w)) };
    let (base_a, params_a) = split(&ta);
    let (base_b, params_b) = split(&tb);
    base_a == base_b && !params_a.is_empty() && params_a != params_b
}

/// Deterministic planner stand-in.
#[derive(Debug, Clone, Default)]
pub struct SimPlanner {
    /// Fixed self-query answer; when unset the answer is the fraction of
    /// pending goals that are not conflict-flagged.
    pub self_query_override: Option<f64>,
}

impl SimPlanner {
    fn clauses(batch: &[Goal]) -> Vec<&str> {
        batch.iter().map(|g| g.text.as_str()).collect()
    }
}

impl Planner for SimPlanner {
    fn plan_goals(&self, instruction: &str, _source_image: Option<&ImageHandle>) -> Result<ExtractedPlan, BackendError> {
        if instruction.trim().is_empty() {
            return Err(BackendError::Precondition("empty instruction".into()));
        }
        let clauses: Vec<&str> = instruction.split(CLAUSE_SEPARATOR).filter(|c| !c.trim().is_empty()).collect();
        let goals: Vec<Goal> = clauses
            .iter()
            .enumerate()
            .map(|(i, clause)| {
                let goal_type = classify_clause(clause);
                Goal {
                    id: format!("g{}", i + 1),
                    text: clause.to_string(),
                    goal_type,
                    tag: tag_for(goal_type),
                    strength: 50.0,
                    conflict: clauses.iter().enumerate().any(|(j, other)| j != i && clauses_conflict(clause, other)),
                }
            })
            .collect();
        let one_shot_feasibility = (1.0 - goals.len() as f64 / 30.0).clamp(0.0, 1.0);
        Ok(ExtractedPlan {
            goals,
            one_shot_feasibility,
        })
    }

    fn propose_directive(
        &self,
        ledger: &GoalLedger,
        batch: &[Goal],
        _history: &Trajectory,
    ) -> Result<Directive, BackendError> {
        if batch.is_empty() {
            return Err(BackendError::EmptyBatch);
        }
        if batch.len() > 2 {
            return Err(BackendError::BatchTooLarge(batch.len()));
        }
        if let Some(g) = batch.iter().find(|g| !ledger.is_pending(&g.id)) {
            return Err(BackendError::Precondition(format!("goal {} is not pending", g.id)));
        }
        let scene_level: Vec<&Goal> = batch.iter().filter(|g| g.tag.is_scene_level()).collect();
        let mode = if scene_level.is_empty() {
            EditMode::LocalEdit
        } else if scene_level.iter().any(|g| ledger.latest(&g.id).is_some_and(|v| !v.satisfied)) {
            EditMode::Regenerate
        } else {
            EditMode::FullCompose
        };
        let clauses = Self::clauses(batch).join(" and ");
        let text = match mode {
            EditMode::LocalEdit => format!("Edit locally: {clauses}"),
            EditMode::Regenerate => format!("Regenerate the scene so that: {clauses}"),
            EditMode::FullCompose => format!("Compose the scene so that: {clauses}"),
        };
        Directive::new(text, batch.iter().map(|g| g.id.clone()).collect(), mode)
    }

    fn reprompt(&self, failed: &Directive, batch: &[Goal], history: &Trajectory) -> Result<Directive, BackendError> {
        let ids: Vec<String> = batch.iter().map(|g| g.id.clone()).collect();
        if history.last_failed_attempt(&ids).is_none() {
            return Err(BackendError::Precondition("reprompt requires a prior failed attempt".into()));
        }
        let attempts = history
            .steps
            .iter()
            .filter(|s| s.addressed.iter().any(|a| ids.contains(a)))
            .count();
        let mut text = format!(
            "Retry {}: {}, keeping the rest of the image unchanged",
            attempts + 1,
            Self::clauses(batch).join(" and ")
        );
        if text == failed.text {
            text.push_str(" (rephrased)");
        }
        Directive::new(text, ids, failed.mode)
    }

    fn improvement_confidence(
        &self,
        ledger: &GoalLedger,
        goals: &[Goal],
        _history: &Trajectory,
    ) -> Result<f64, BackendError> {
        if let Some(c) = self.self_query_override {
            return Ok(c);
        }
        let pending: Vec<&Goal> = goals.iter().filter(|g| ledger.is_pending(&g.id)).collect();
        if pending.is_empty() {
            return Ok(0.0);
        }
        Ok(pending.iter().filter(|g| !g.conflict).count() as f64 / pending.len() as f64)
    }
}

/// Editor backed by a per-candidate clone of the task's world.
#[derive(Debug, Clone)]
pub struct SimEditor {
    world: SimWorld,
    modality: crate::task::Modality,
}

impl SimEditor {
    pub fn new(task: &Task, cfg: &SimConfig) -> Self {
        Self {
            world: SimWorld::new(task, cfg),
            modality: task.modality,
        }
    }
}

impl Editor for SimEditor {
    fn initial_image(&self) -> Option<ImageHandle> {
        match self.modality {
            crate::task::Modality::I2I => Some(ImageHandle::Canvas(self.world.canvas().clone())),
            crate::task::Modality::T2I => None,
        }
    }

    fn edit(&self, directive: &Directive, seed: u64, base: Option<&ImageHandle>) -> Result<ImageHandle, BackendError> {
        let mut world = self.world.clone();
        match base {
            Some(ImageHandle::Canvas(c)) => world.set_canvas(c.clone()),
            Some(ImageHandle::File(p)) => return Err(BackendError::UnsupportedImage(p.display().to_string())),
            None if directive.mode == EditMode::LocalEdit => {
                return Err(BackendError::Precondition("local edit requires a base image".into()))
            }
            None => {}
        }
        Ok(ImageHandle::Canvas(world.apply_edit(&directive.addressed_set(), seed)?))
    }
}

fn canvas_of(image: &ImageHandle) -> Result<&Canvas, BackendError> {
    image
        .as_canvas()
        .ok_or_else(|| BackendError::UnsupportedImage("simulated roles need a canvas".into()))
}

/// Reads canvas ground truth and flips each verdict with probability `noise`.
#[derive(Debug, Clone)]
pub struct SimVerifier {
    stream: StreamKey,
    noise: f64,
}

impl SimVerifier {
    pub fn new(task: &Task, cfg: &SimConfig) -> Self {
        Self {
            stream: crate::sim::task_stream(cfg.seed, &task.id).child_str("verify"),
            noise: cfg.verifier_noise,
        }
    }
}

impl Verifier for SimVerifier {
    fn verify(&self, image: &ImageHandle, goals: &[Goal]) -> Result<Vec<Verdict>, BackendError> {
        let canvas = canvas_of(image)?;
        let key = self.stream.child(canvas.origin_seed).child(canvas.revision);
        goals
            .iter()
            .map(|g| {
                let truth = canvas
                    .is_satisfied(&g.id)
                    .ok_or_else(|| BackendError::Sim(crate::sim::SimError::UnknownGoal(g.id.clone())))?;
                let k = key.child_str(&g.id);
                let mut rng = k.rng();
                let flipped = rng.random::<f64>() < self.noise;
                let confidence = if self.noise == 0.0 {
                    1.0
                } else {
                    (1.0 - 4.0 * self.noise * rng.random::<f64>()).clamp(0.0, 1.0)
                };
                let satisfied = truth != flipped;
                Ok(Verdict {
                    goal_id: g.id.clone(),
                    satisfied,
                    confidence,
                    explanation: format!("simulated check of `{}`", g.text),
                })
            })
            .collect()
    }
}

/// Scores 5 × quality-weighted satisfied fraction of the goals in scope.
#[derive(Debug, Clone, Default)]
pub struct SimJudge;

impl Judge for SimJudge {
    fn score(&self, image: &ImageHandle, goals: &[Goal]) -> Result<f64, BackendError> {
        let canvas = canvas_of(image)?;
        if goals.is_empty() {
            return Ok(0.0);
        }
        let total: f64 = goals
            .iter()
            .filter_map(|g| canvas.attributes.get(&g.id))
            .filter(|a| a.satisfied)
            .map(|a| a.quality)
            .sum();
        Ok((5.0 * total / goals.len() as f64).clamp(0.0, 5.0))
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimFactory {
    pub cfg: SimConfig,
    pub planner: SimPlanner,
}

impl SimFactory {
    pub fn new(cfg: SimConfig) -> Self {
        Self {
            cfg,
            planner: SimPlanner::default(),
        }
    }
}

impl BackendFactory for SimFactory {
    fn for_task(&self, task: &Task) -> Result<Backends, BackendError> {
        self.cfg.validate()?;
        Ok(Backends {
            planner: Arc::new(self.planner.clone()),
            editor: Arc::new(SimEditor::new(task, &self.cfg)),
            verifier: Arc::new(SimVerifier::new(task, &self.cfg)),
            judge: Arc::new(SimJudge),
        })
    }

    fn is_simulated(&self) -> bool {
        true
    }
}
