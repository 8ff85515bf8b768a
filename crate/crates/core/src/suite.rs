//! Synthetic task suites for the simulated world.
//!
//! Instructions are built from clause templates covering every goal type and
//! joined with the simulated planner's separator, so the planner recovers the
//! annotated goals exactly.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::sim::{clauses_conflict, SimPlanner, CLAUSE_SEPARATOR};
use crate::backends::Planner;
use crate::stream::StreamKey;
use crate::task::{write_suite, Modality, Task, TaskError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub tasks: usize,
    pub min_goals: usize,
    pub max_goals: usize,
    /// Fraction of tasks that edit a source image.
    pub i2i_fraction: f64,
    /// Probability that a task carries one pair of contradictory clauses.
    pub conflict_rate: f64,
    pub seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            tasks: 200,
            min_goals: 15,
            max_goals: 23,
            i2i_fraction: 0.0,
            conflict_rate: 0.1,
            seed: 0,
        }
    }
}

const COLORS: &[&str] = &["red", "blue", "green", "yellow", "purple", "orange", "white", "black", "teal", "gold"];
const OBJECTS: &[&str] = &[
    "cup", "bicycle", "kite", "umbrella", "cat", "dog", "vase", "chair", "clock", "guitar", "boat", "bench", "teapot",
    "owl", "suitcase", "book", "hat", "balloon", "robot", "violin",
];
const PLACES: &[&str] = &[
    "on the table", "by the window", "near the door", "on the shelf", "beside the tree", "on the rug", "under the bridge",
    "next to the fountain",
];
const WORDS: &[&str] = &["OPEN", "SALE", "WELCOME", "HELLO", "SUMMER", "CAFE", "NORTH", "EXIT"];
const SURFACES: &[&str] = &["sign", "wall", "banner", "mug", "door", "poster"];
const EFFECTS: &[&str] = &["blur", "grain", "bokeh", "fog", "mist", "haze", "vignette", "sparkle"];
const AREAS: &[&str] = &["edges", "sky", "street", "water", "distance", "corners"];
const LIGHTS: &[&str] = &["warm rim light", "soft window light", "cool lamp light", "golden sunlight", "neon light"];
const DIRECTIONS: &[&str] = &["left", "right", "above", "behind"];
const SUBJECTS: &[&str] = &["the horizon", "the main subject", "the tallest building", "the path", "the skyline"];
const PLACEMENTS: &[&str] = &["the lower third", "the left third", "the right third", "the upper third"];

fn clause(rng: &mut impl Rng, kind: usize) -> String {
    let pick = |rng: &mut dyn rand::RngCore, xs: &[&'static str]| *xs.choose(rng).expect("non-empty");
    match kind {
        0 => format!("add a {} {} {}", pick(rng, COLORS), pick(rng, OBJECTS), pick(rng, PLACES)),
        1 => format!("write the text \"{}\" on the {}", pick(rng, WORDS), pick(rng, SURFACES)),
        2 => format!("apply a soft {} to the {}", pick(rng, EFFECTS), pick(rng, AREAS)),
        3 => format!("shift the color palette of the {} toward {}", pick(rng, OBJECTS), pick(rng, COLORS)),
        4 => format!("add {} from the {}", pick(rng, LIGHTS), pick(rng, DIRECTIONS)),
        _ => format!("align {} with {}", pick(rng, SUBJECTS), pick(rng, PLACEMENTS)),
    }
}

/// Builds `spec.tasks` tasks with goal counts drawn uniformly from
/// `[min_goals, max_goals]`. Goal annotations come from the simulated planner.
pub fn generate_suite(spec: &SuiteSpec) -> Vec<Task> {
    let root = StreamKey::root(spec.seed).child_str("suite");
    let planner = SimPlanner::default();
    (0..spec.tasks)
        .map(|i| {
            let mut rng = root.child(i as u64).rng();
            let n = rng.random_range(spec.min_goals..=spec.max_goals.max(spec.min_goals));
            let mut clauses: Vec<String> = Vec::with_capacity(n);
            let mut seen = BTreeSet::new();
            if n >= 2 && rng.random::<f64>() < spec.conflict_rate {
                let (a, b) = (rng.random_range(25..45) * 100, rng.random_range(55..75) * 100);
                for k in [a, b] {
                    let c = format!("set the color temperature to {k} K");
                    seen.insert(c.clone());
                    clauses.push(c);
                }
            }
            while clauses.len() < n {
                let c = clause(&mut rng, clauses.len() % 6);
                // Reject accidental contradictions; only the seeded pair above may conflict.
                if !seen.contains(&c) && !clauses.iter().any(|o| clauses_conflict(o, &c)) {
                    seen.insert(c.clone());
                    clauses.push(c);
                }
            }
            // Interleave types instead of grouping them.
            for k in (1..clauses.len()).rev() {
                let j = rng.random_range(0..=k);
                clauses.swap(k, j);
            }
            let id = format!("task-{i:04}");
            let instruction = clauses.join(CLAUSE_SEPARATOR);
            let goals = planner
                .plan_goals(&instruction, None)
                .expect("generated instruction is non-empty")
                .goals;
            let modality = if rng.random::<f64>() < spec.i2i_fraction { Modality::I2I } else { Modality::T2I };
            Task {
                category: "synthetic".into(),
                subcategory: format!("{n}-goals"),
                source_image: (modality == Modality::I2I).then(|| format!("images/{id}.png").into()),
                id,
                modality,
                instruction,
                goals,
            }
        })
        .collect()
}

/// Placeholder bytes for I2I source images; the simulated world never decodes them.
const PLACEHOLDER_IMAGE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Writes `tasks` as a suite directory, creating placeholder source images.
pub fn write_generated_suite(dir: &Path, tasks: &[Task]) -> Result<(), TaskError> {
    write_suite(dir, tasks)?;
    for rel in tasks.iter().filter_map(|t| t.source_image.as_ref()) {
        let path = dir.join(rel);
        let io = |source| TaskError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        std::fs::write(&path, PLACEHOLDER_IMAGE).map_err(io)?;
    }
    Ok(())
}
