//! Deterministic simulated world.
//!
//! A [`Canvas`] stands in for an image: it only records, per goal, whether the
//! goal is currently satisfied and a quality score. Edits flip addressed goals
//! with probability `p_success` and may regress one unrelated satisfied goal.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::stream::StreamKey;
use crate::task::{Modality, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Probability an addressed goal becomes satisfied per edit.
    pub p_success: f64,
    /// Probability one satisfied, non-addressed goal regresses per edit.
    pub p_side_effect: f64,
    /// Probability the simulated verifier flips a verdict.
    pub verifier_noise: f64,
    pub seed: u64,
    /// Fraction of goals already satisfied by an I2I source image.
    pub i2i_presatisfied: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            p_success: 0.7,
            p_side_effect: 0.1,
            verifier_noise: 0.05,
            seed: 0,
            i2i_presatisfied: 0.0,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("{name} must be in [0, 1], got {value}")]
    ProbabilityOutOfRange { name: &'static str, value: f64 },
    #[error("edit addresses unknown goal id `{0}`")]
    UnknownGoal(String),
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, value) in [
            ("p_success", self.p_success),
            ("p_side_effect", self.p_side_effect),
            ("verifier_noise", self.verifier_noise),
            ("i2i_presatisfied", self.i2i_presatisfied),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SimError::ProbabilityOutOfRange { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub satisfied: bool,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub attributes: BTreeMap<String, Attribute>,
    pub revision: u64,
    /// Candidate seed of the edit that produced this canvas (0 for the initial canvas).
    pub origin_seed: u64,
}

impl Canvas {
    pub fn satisfied_count(&self) -> usize {
        self.attributes.values().filter(|a| a.satisfied).count()
    }

    pub fn is_satisfied(&self, goal_id: &str) -> Option<bool> {
        self.attributes.get(goal_id).map(|a| a.satisfied)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimWorld {
    task_id: String,
    goal_order: Vec<String>,
    cfg: SimConfig,
    stream: StreamKey,
    canvas: Canvas,
}

/// Seed of the stream a task's world draws from.
pub fn task_stream(seed: u64, task_id: &str) -> StreamKey {
    StreamKey::root(seed).child_str(task_id)
}

impl SimWorld {
    /// All goals unsatisfied for T2I; for I2I each goal is independently
    /// pre-satisfied with probability `i2i_presatisfied`.
    pub fn new(task: &Task, cfg: &SimConfig) -> Self {
        let stream = task_stream(cfg.seed, &task.id);
        let init = stream.child_str("initial");
        let attributes = task
            .goals
            .iter()
            .map(|g| {
                let key = init.child_str(&g.id);
                let satisfied = task.modality == Modality::I2I && key.unit() < cfg.i2i_presatisfied;
                let quality = if satisfied { 0.5 + 0.5 * key.child(1).unit() } else { 0.0 };
                (g.id.clone(), Attribute { satisfied, quality })
            })
            .collect();
        Self {
            task_id: task.id.clone(),
            goal_order: task.goal_ids(),
            cfg: cfg.clone(),
            stream,
            canvas: Canvas {
                attributes,
                revision: 0,
                origin_seed: 0,
            },
        }
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn stream(&self) -> StreamKey {
        self.stream
    }

    pub fn canvas(&self) -> &Canvas {
        &self.canvas
    }

    pub fn goal_order(&self) -> &[String] {
        &self.goal_order
    }

    /// Replaces the current canvas, e.g. to continue editing from a kept best image.
    pub fn set_canvas(&mut self, canvas: Canvas) {
        self.canvas = canvas;
    }

    /// Applies one edit addressing `addressed` with the given candidate seed.
    ///
    /// Draws are keyed by `(stream, candidate_seed, goal id)`, so the outcome
    /// is independent of how many other candidates were drawn before.
    pub fn apply_edit(&mut self, addressed: &BTreeSet<String>, candidate_seed: u64) -> Result<Canvas, SimError> {
        if let Some(id) = addressed.iter().find(|id| !self.canvas.attributes.contains_key(*id)) {
            return Err(SimError::UnknownGoal(id.clone()));
        }
        let edit = self.stream.child_str("edit").child(candidate_seed);
        let victims: Vec<&String> = self
            .goal_order
            .iter()
            .filter(|id| !addressed.contains(*id) && self.canvas.attributes[*id].satisfied)
            .collect();
        let victim = if !victims.is_empty() && edit.child_str("side_effect").unit() < self.cfg.p_side_effect {
            let idx = edit.child_str("victim").rng().random_range(0..victims.len());
            Some(victims[idx].clone())
        } else {
            None
        };

        for id in addressed {
            let key = edit.child_str("success").child_str(id);
            if key.unit() < self.cfg.p_success {
                let attr = self.canvas.attributes.get_mut(id).expect("checked above");
                attr.satisfied = true;
                attr.quality = 0.5 + 0.5 * key.child(1).unit();
            }
        }
        if let Some(id) = victim {
            let attr = self.canvas.attributes.get_mut(&id).expect("victim is a goal");
            attr.satisfied = false;
            attr.quality = 0.0;
        }
        self.canvas.revision += 1;
        self.canvas.origin_seed = candidate_seed;
        Ok(self.canvas.clone())
    }

    /// Ground-truth satisfied fraction; the oracle behind the noisy verifier.
    pub fn ground_truth_coverage(&self) -> f64 {
        coverage(&self.canvas)
    }
}

pub fn coverage(canvas: &Canvas) -> f64 {
    if canvas.attributes.is_empty() {
        return 0.0;
    }
    canvas.satisfied_count() as f64 / canvas.attributes.len() as f64
}
