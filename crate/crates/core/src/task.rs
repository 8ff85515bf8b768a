//! Tasks, goals and the on-disk task format.
//!
//! A task is one long-form instruction plus its structured goal annotations.
//! Goal texts are verbatim clauses of the instruction; [`validate_task`]
//! enforces that along with id uniqueness and value ranges.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Goal-type taxonomy used for per-type pass rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalType {
    AddObject,
    Text,
    Effect,
    Color,
    Lighting,
    Composition,
}

impl GoalType {
    pub const ALL: [GoalType; 6] = [
        GoalType::AddObject,
        GoalType::Text,
        GoalType::Effect,
        GoalType::Color,
        GoalType::Lighting,
        GoalType::Composition,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GoalType::AddObject => "add_object",
            GoalType::Text => "text",
            GoalType::Effect => "effect",
            GoalType::Color => "color",
            GoalType::Lighting => "lighting",
            GoalType::Composition => "composition",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for GoalType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scope tag assigned by the planner. Drives scheduling order and edit mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalTag {
    Global,
    Local,
    TextOverlay,
    Layout,
}

impl GoalTag {
    pub const ALL: [GoalTag; 4] = [GoalTag::Global, GoalTag::Layout, GoalTag::Local, GoalTag::TextOverlay];

    pub fn as_str(self) -> &'static str {
        match self {
            GoalTag::Global => "global",
            GoalTag::Local => "local",
            GoalTag::TextOverlay => "text_overlay",
            GoalTag::Layout => "layout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Execution precedence: scene-level constraints first, overlays last.
    pub fn precedence(self) -> u8 {
        match self {
            GoalTag::Global => 0,
            GoalTag::Layout => 1,
            GoalTag::Local => 2,
            GoalTag::TextOverlay => 3,
        }
    }

    /// Tags whose failed verification is fixed by scene-level regeneration.
    pub fn is_scene_level(self) -> bool {
        matches!(self, GoalTag::Global | GoalTag::Layout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "t2i")]
    T2I,
    #[serde(rename = "i2i")]
    I2I,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub id: String,
    pub text: String,
    pub goal_type: GoalType,
    pub tag: GoalTag,
    pub strength: f64,
    pub conflict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub modality: Modality,
    pub category: String,
    pub subcategory: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image: Option<PathBuf>,
    pub goals: Vec<Goal>,
}

impl Task {
    pub fn goal(&self, id: &str) -> Option<&Goal> {
        self.goals.iter().find(|g| g.id == id)
    }

    pub fn goal_ids(&self) -> Vec<String> {
        self.goals.iter().map(|g| g.id.clone()).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("malformed task document: {0}")]
    Malformed(String),
    #[error("missing required field `{0}`")]
    MissingField(String),
    #[error("unknown {kind} value `{value}`")]
    UnknownEnum { kind: &'static str, value: String },
    #[error("strength out of range: goal {id} has {value}")]
    StrengthOutOfRange { id: String, value: f64 },
    #[error("empty goal list")]
    EmptyGoals,
    #[error("invalid task {id}: {report}")]
    Invalid { id: String, report: ValidationReport },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

// Raw shapes mirror the file format with every field optional so that missing
// fields and unknown enum strings get precise errors instead of serde's generic ones.
#[derive(Deserialize)]
struct RawGoal {
    id: Option<String>,
    text: Option<String>,
    goal_type: Option<String>,
    tag: Option<String>,
    strength: Option<f64>,
    conflict: Option<bool>,
}

#[derive(Deserialize)]
struct RawTask {
    id: Option<String>,
    modality: Option<String>,
    category: Option<String>,
    subcategory: Option<String>,
    instruction: Option<String>,
    source_image: Option<PathBuf>,
    goals: Option<Vec<RawGoal>>,
}

fn required<T>(value: Option<T>, field: &str) -> Result<T, TaskError> {
    value.ok_or_else(|| TaskError::MissingField(field.to_string()))
}

/// Parses a single task record. Goals keep file order; unknown fields are ignored.
pub fn parse_task(bytes: &[u8]) -> Result<Task, TaskError> {
    let raw: RawTask = serde_json::from_slice(bytes).map_err(|e| TaskError::Malformed(e.to_string()))?;
    let modality = match required(raw.modality, "modality")?.as_str() {
        "t2i" => Modality::T2I,
        "i2i" => Modality::I2I,
        other => {
            return Err(TaskError::UnknownEnum {
                kind: "modality",
                value: other.to_string(),
            })
        }
    };
    let raw_goals = required(raw.goals, "goals")?;
    if raw_goals.is_empty() {
        return Err(TaskError::EmptyGoals);
    }
    let mut goals = Vec::with_capacity(raw_goals.len());
    for (i, g) in raw_goals.into_iter().enumerate() {
        let id = required(g.id, &format!("goals[{i}].id"))?;
        let goal_type_s = required(g.goal_type, &format!("goals[{i}].goal_type"))?;
        let goal_type = GoalType::parse(&goal_type_s).ok_or(TaskError::UnknownEnum {
            kind: "goal_type",
            value: goal_type_s,
        })?;
        let tag_s = required(g.tag, &format!("goals[{i}].tag"))?;
        let tag = GoalTag::parse(&tag_s).ok_or(TaskError::UnknownEnum { kind: "tag", value: tag_s })?;
        let strength = required(g.strength, &format!("goals[{i}].strength"))?;
        if !(0.0..=100.0).contains(&strength) {
            return Err(TaskError::StrengthOutOfRange { id, value: strength });
        }
        goals.push(Goal {
            text: required(g.text, &format!("goals[{i}].text"))?,
            goal_type,
            tag,
            strength,
            conflict: g.conflict.unwrap_or(false),
            id,
        });
    }
    Ok(Task {
        id: required(raw.id, "id")?,
        modality,
        category: required(raw.category, "category")?,
        subcategory: required(raw.subcategory, "subcategory")?,
        instruction: required(raw.instruction, "instruction")?,
        source_image: raw.source_image,
        goals,
    })
}

pub fn serialize_task(task: &Task) -> String {
    serde_json::to_string_pretty(task).expect("task serialization is infallible")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyGoalList,
    EmptyGoalText { id: String },
    NonVerbatimGoal { id: String },
    DuplicateId { id: String },
    StrengthOutOfRange { id: String, value: f64 },
    MissingSourceImage,
    UnexpectedSourceImage,
    UnreadableSourceImage { path: PathBuf },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyGoalList => write!(f, "empty goal list"),
            Violation::EmptyGoalText { id } => write!(f, "empty goal text ({id})"),
            Violation::NonVerbatimGoal { id } => write!(f, "non-verbatim goal ({id})"),
            Violation::DuplicateId { id } => write!(f, "duplicate id ({id})"),
            Violation::StrengthOutOfRange { id, value } => write!(f, "strength out of range ({id}: {value})"),
            Violation::MissingSourceImage => write!(f, "i2i task without source image"),
            Violation::UnexpectedSourceImage => write!(f, "t2i task with source image"),
            Violation::UnreadableSourceImage { path } => write!(f, "unreadable source image {}", path.display()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Lists every violated invariant of a parsed task. Empty iff valid.
///
/// Source image readability is not checked here; see [`validate_task_files`].
pub fn validate_task(task: &Task) -> ValidationReport {
    let mut violations = Vec::new();
    if task.goals.is_empty() {
        violations.push(Violation::EmptyGoalList);
    }
    let mut seen = BTreeSet::new();
    for goal in &task.goals {
        if !seen.insert(goal.id.as_str()) {
            violations.push(Violation::DuplicateId { id: goal.id.clone() });
        }
        if goal.text.is_empty() {
            violations.push(Violation::EmptyGoalText { id: goal.id.clone() });
        } else if !task.instruction.contains(goal.text.as_str()) {
            violations.push(Violation::NonVerbatimGoal { id: goal.id.clone() });
        }
        if !(0.0..=100.0).contains(&goal.strength) {
            violations.push(Violation::StrengthOutOfRange {
                id: goal.id.clone(),
                value: goal.strength,
            });
        }
    }
    match (task.modality, &task.source_image) {
        (Modality::I2I, None) => violations.push(Violation::MissingSourceImage),
        (Modality::T2I, Some(_)) => violations.push(Violation::UnexpectedSourceImage),
        _ => {}
    }
    ValidationReport { violations }
}

/// [`validate_task`] plus a readability check of the source image relative to `root`.
pub fn validate_task_files(task: &Task, root: &Path) -> ValidationReport {
    let mut report = validate_task(task);
    if let Some(rel) = &task.source_image {
        let path = root.join(rel);
        if std::fs::File::open(&path).is_err() {
            report.violations.push(Violation::UnreadableSourceImage { path });
        }
    }
    report
}

pub fn load_task(path: &Path) -> Result<Task, TaskError> {
    let bytes = std::fs::read(path).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_task(&bytes)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub tasks: Vec<String>,
}

/// Loads a suite directory: `manifest.json` listing ids, one `<id>.json` per task.
/// Every task is validated, including source image readability.
pub fn load_suite(dir: &Path) -> Result<Vec<Task>, TaskError> {
    let manifest_path = dir.join("manifest.json");
    let bytes = std::fs::read(&manifest_path).map_err(|source| TaskError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let manifest: SuiteManifest =
        serde_json::from_slice(&bytes).map_err(|e| TaskError::Malformed(format!("{}: {e}", manifest_path.display())))?;
    manifest
        .tasks
        .iter()
        .map(|id| {
            let task = load_task(&dir.join(format!("{id}.json")))?;
            let report = validate_task_files(&task, dir);
            if report.is_valid() {
                Ok(task)
            } else {
                Err(TaskError::Invalid { id: task.id, report })
            }
        })
        .collect()
}

/// Writes tasks plus manifest into `dir` in the layout [`load_suite`] reads.
pub fn write_suite(dir: &Path, tasks: &[Task]) -> Result<(), TaskError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TaskError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    for task in tasks {
        let path = dir.join(format!("{}.json", task.id));
        std::fs::write(&path, serialize_task(task)).map_err(io(&path))?;
    }
    let manifest = SuiteManifest {
        tasks: tasks.iter().map(|t| t.id.clone()).collect(),
    };
    let path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serialization is infallible");
    std::fs::write(&path, body).map_err(io(&path))
}
