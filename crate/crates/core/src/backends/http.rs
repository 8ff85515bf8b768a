//! JSON-over-HTTP adapter for hosted chat-completion and image endpoints.
//!
//! Requests use the common chat-completion shape (`model`, `messages`,
//! `temperature`; response `choices[0].message.content`). Structured outputs
//! are requested as fenced JSON and re-prompted up to [`MAX_PARSE_RETRIES`]
//! times before failing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, Directive, EditMode, Editor, ExtractedPlan, ImageHandle, Judge, Planner, Verdict, Verifier};
use crate::ledger::GoalLedger;
use crate::task::{Goal, GoalTag, GoalType};
use crate::trajectory::Trajectory;

pub const API_KEY_ENV: &str = "VD_API_KEY";
pub const MAX_PARSE_RETRIES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEndpoint {
    /// Name used in error messages.
    pub name: String,
    pub base_url: String,
    pub model: String,
    pub api_key: String,
    pub temperature: f64,
    pub timeout_secs: u64,
}

impl HttpEndpoint {
    /// Endpoint with the bearer token read from `VD_API_KEY`.
    pub fn from_env(name: &str, base_url: &str, model: &str, temperature: f64) -> Result<Self, BackendError> {
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| BackendError::MissingEnv(API_KEY_ENV.into()))?;
        Ok(Self {
            name: name.into(),
            base_url: base_url.into(),
            model: model.into(),
            api_key,
            temperature,
            timeout_secs: 120,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(self.timeout_secs)))
            .build()
            .into()
    }

    fn post_json(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let transport = |e: ureq::Error| BackendError::Transport {
            endpoint: self.name.clone(),
            message: e.to_string(),
        };
        let mut resp = self
            .agent()
            .post(&self.url(path))
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport)?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| BackendError::Transport {
                endpoint: self.name.clone(),
                message: format!("response is not JSON: {e}"),
            }),
            401 | 403 => Err(BackendError::Auth {
                endpoint: self.name.clone(),
                status,
            }),
            _ => Err(BackendError::Status {
                endpoint: self.name.clone(),
                status,
                body: text,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    /// Plain string, or an array of content parts when images are attached.
    pub content: Value,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: Value::String(text.into()),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: Value::String(text.into()),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: Value::String(text.into()),
        }
    }

    pub fn user_with_image(text: impl Into<String>, data_url: String) -> Self {
        Self {
            role: "user".into(),
            content: json!([
                {"type": "text", "text": text.into()},
                {"type": "image_url", "image_url": {"url": data_url}},
            ]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

/// POSTs to `<base>/chat/completions` and returns the assistant text.
pub fn chat_complete(endpoint: &HttpEndpoint, request: &ChatRequest) -> Result<String, BackendError> {
    let body = serde_json::to_value(request).expect("request serializes");
    let resp = endpoint.post_json("/chat/completions", &body)?;
    let text = resp
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Transport {
            endpoint: endpoint.name.clone(),
            message: "response has no choices[0].message.content".into(),
        })?;
    if text.trim().is_empty() {
        return Err(BackendError::Transport {
            endpoint: endpoint.name.clone(),
            message: "empty assistant text".into(),
        });
    }
    Ok(text.to_string())
}

/// Extracts the JSON payload from assistant text: the first fenced block if
/// present, otherwise the outermost `{...}` span.
pub fn extract_json(text: &str) -> Option<&str> {
    if let Some(start) = text.find("```") {
        let after = &text[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        if let Some(end) = body.find("```") {
            return Some(body[..end].trim());
        }
    }
    let (s, e) = (text.find('{')?, text.rfind('}')?);
    (s < e).then(|| &text[s..=e])
}

/// Requests a structured reply, validating it with `check`. A failed parse or
/// check is fed back to the model and retried up to [`MAX_PARSE_RETRIES`] times.
pub fn chat_structured<T, F>(endpoint: &HttpEndpoint, mut messages: Vec<ChatMessage>, check: F) -> Result<T, BackendError>
where
    T: DeserializeOwned,
    F: Fn(&T) -> Result<(), String>,
{
    let mut last_error = String::new();
    for attempt in 0..=MAX_PARSE_RETRIES {
        let request = ChatRequest {
            model: endpoint.model.clone(),
            messages: messages.clone(),
            temperature: endpoint.temperature,
        };
        let text = chat_complete(endpoint, &request)?;
        let parsed = extract_json(&text)
            .ok_or_else(|| "no JSON object found".to_string())
            .and_then(|raw| serde_json::from_str::<T>(raw).map_err(|e| e.to_string()))
            .and_then(|value| check(&value).map(|_| value));
        match parsed {
            Ok(value) => return Ok(value),
            Err(e) => {
                last_error = e;
                if attempt < MAX_PARSE_RETRIES {
                    messages.push(ChatMessage::assistant(text));
                    messages.push(ChatMessage::user(format!(
                        "Your reply could not be used ({last_error}). Reply again with only a fenced ```json block matching the requested schema."
                    )));
                }
            }
        }
    }
    Err(BackendError::Parse {
        endpoint: endpoint.name.clone(),
        attempts: MAX_PARSE_RETRIES + 1,
        message: last_error,
    })
}

/// Prompt templates loaded from `<dir>/<name>.txt`. `{{key}}` placeholders
/// are substituted at render time.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    templates: BTreeMap<String, String>,
}

pub const PROMPT_NAMES: [&str; 6] = ["planner", "directive", "reprompt", "self_query", "verifier", "judge"];

impl PromptSet {
    pub fn load(dir: &Path) -> Result<Self, BackendError> {
        let mut templates = BTreeMap::new();
        for name in PROMPT_NAMES {
            let path = dir.join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|e| BackendError::Prompt {
                name: name.into(),
                message: format!("{}: {e}", path.display()),
            })?;
            templates.insert(name.to_string(), text);
        }
        Ok(Self { templates })
    }

    pub fn from_map(templates: BTreeMap<String, String>) -> Self {
        Self { templates }
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, BackendError> {
        let mut text = self.templates.get(name).cloned().ok_or_else(|| BackendError::Prompt {
            name: name.into(),
            message: "template not loaded".into(),
        })?;
        for (key, value) in vars {
            text = text.replace(&format!("{{{{{key}}}}}"), value);
        }
        Ok(text)
    }
}

fn image_data_url(image: &ImageHandle) -> Result<String, BackendError> {
    match image {
        ImageHandle::File(path) => {
            let bytes = std::fs::read(path)?;
            let mime = match path.extension().and_then(|e| e.to_str()) {
                Some("jpg" | "jpeg") => "image/jpeg",
                Some("webp") => "image/webp",
                _ => "image/png",
            };
            Ok(format!(
                "data:{mime};base64,{}",
                base64::engine::general_purpose::STANDARD.encode(bytes)
            ))
        }
        ImageHandle::Canvas(_) => Err(BackendError::UnsupportedImage(
            "http roles need an image file, got a simulated canvas".into(),
        )),
    }
}

fn goal_listing(goals: &[Goal]) -> String {
    goals
        .iter()
        .map(|g| format!("- {} [{}; {}]: {}", g.id, g.goal_type, g.tag.as_str(), g.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Deserialize)]
struct PlanReply {
    goals: Vec<PlanGoal>,
    one_shot_feasibility: f64,
}

#[derive(Debug, Deserialize)]
struct PlanGoal {
    text: String,
    goal_type: String,
    tag: String,
    #[serde(default)]
    conflict: bool,
    #[serde(default)]
    strength: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct DirectiveReply {
    text: String,
    #[serde(default)]
    mode: Option<EditMode>,
}

#[derive(Debug, Deserialize)]
struct ConfidenceReply {
    confidence: f64,
}

#[derive(Debug, Deserialize)]
struct VerifyReply {
    verdicts: Vec<Verdict>,
}

#[derive(Debug, Deserialize)]
struct ScoreReply {
    score: f64,
}

#[derive(Debug, Clone)]
pub struct HttpPlanner {
    pub endpoint: HttpEndpoint,
    pub prompts: PromptSet,
}

impl Planner for HttpPlanner {
    fn plan_goals(&self, instruction: &str, source_image: Option<&ImageHandle>) -> Result<ExtractedPlan, BackendError> {
        if instruction.trim().is_empty() {
            return Err(BackendError::Precondition("empty instruction".into()));
        }
        let system = self.prompts.render("planner", &[("instruction", instruction)])?;
        let user = match source_image {
            Some(img) => ChatMessage::user_with_image(instruction, image_data_url(img)?),
            None => ChatMessage::user(instruction),
        };
        let reply: PlanReply = chat_structured(&self.endpoint, vec![ChatMessage::system(system), user], |r: &PlanReply| {
            if !(0.0..=1.0).contains(&r.one_shot_feasibility) {
                return Err("one_shot_feasibility must be in [0, 1]".into());
            }
            if r.goals.is_empty() {
                return Err("goal list is empty".into());
            }
            for g in &r.goals {
                if g.text.is_empty() || !instruction.contains(&g.text) {
                    return Err(format!("goal text `{}` is not verbatim from the instruction", g.text));
                }
                GoalType::parse(&g.goal_type).ok_or_else(|| format!("unknown goal_type `{}`", g.goal_type))?;
                GoalTag::parse(&g.tag).ok_or_else(|| format!("unknown tag `{}`", g.tag))?;
            }
            Ok(())
        })?;
        let goals = reply
            .goals
            .into_iter()
            .enumerate()
            .map(|(i, g)| Goal {
                id: format!("g{}", i + 1),
                goal_type: GoalType::parse(&g.goal_type).expect("validated"),
                tag: GoalTag::parse(&g.tag).expect("validated"),
                strength: g.strength.unwrap_or(50.0).clamp(0.0, 100.0),
                conflict: g.conflict,
                text: g.text,
            })
            .collect();
        Ok(ExtractedPlan {
            goals,
            one_shot_feasibility: reply.one_shot_feasibility,
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
        let pending = ledger.pending().join(", ");
        let listing = goal_listing(batch);
        let system = self
            .prompts
            .render("directive", &[("batch", &listing), ("pending", &pending)])?;
        let reply: DirectiveReply = chat_structured(
            &self.endpoint,
            vec![ChatMessage::system(system), ChatMessage::user(listing.clone())],
            |r: &DirectiveReply| {
                if r.text.trim().is_empty() {
                    Err("directive text is empty".into())
                } else {
                    Ok(())
                }
            },
        )?;
        let default_mode = if batch.iter().any(|g| g.tag.is_scene_level()) {
            EditMode::FullCompose
        } else {
            EditMode::LocalEdit
        };
        Directive::new(
            reply.text,
            batch.iter().map(|g| g.id.clone()).collect(),
            reply.mode.unwrap_or(default_mode),
        )
    }

    fn reprompt(&self, failed: &Directive, batch: &[Goal], history: &Trajectory) -> Result<Directive, BackendError> {
        let ids: Vec<String> = batch.iter().map(|g| g.id.clone()).collect();
        if history.last_failed_attempt(&ids).is_none() {
            return Err(BackendError::Precondition("reprompt requires a prior failed attempt".into()));
        }
        let listing = goal_listing(batch);
        let system = self
            .prompts
            .render("reprompt", &[("failed", &failed.text), ("batch", &listing)])?;
        let previous = failed.text.clone();
        let reply: DirectiveReply = chat_structured(
            &self.endpoint,
            vec![ChatMessage::system(system), ChatMessage::user(listing)],
            move |r: &DirectiveReply| {
                if r.text.trim().is_empty() || r.text == previous {
                    Err("the new directive must differ from the failed one".into())
                } else {
                    Ok(())
                }
            },
        )?;
        Directive::new(reply.text, failed.addressed_goal_ids.clone(), failed.mode)
    }

    fn improvement_confidence(
        &self,
        ledger: &GoalLedger,
        goals: &[Goal],
        _history: &Trajectory,
    ) -> Result<f64, BackendError> {
        let pending: Vec<Goal> = goals.iter().filter(|g| ledger.is_pending(&g.id)).cloned().collect();
        let listing = goal_listing(&pending);
        let system = self.prompts.render("self_query", &[("pending", &listing)])?;
        let reply: ConfidenceReply = chat_structured(
            &self.endpoint,
            vec![ChatMessage::system(system), ChatMessage::user("Can the image still improve?")],
            |r: &ConfidenceReply| {
                if (0.0..=1.0).contains(&r.confidence) {
                    Ok(())
                } else {
                    Err("confidence must be in [0, 1]".into())
                }
            },
        )?;
        Ok(reply.confidence)
    }
}

#[derive(Debug, Clone)]
pub struct HttpVerifier {
    pub endpoint: HttpEndpoint,
    pub prompts: PromptSet,
}

impl Verifier for HttpVerifier {
    fn verify(&self, image: &ImageHandle, goals: &[Goal]) -> Result<Vec<Verdict>, BackendError> {
        let listing = goal_listing(goals);
        let system = self.prompts.render("verifier", &[("goals", &listing)])?;
        let expected: Vec<String> = goals.iter().map(|g| g.id.clone()).collect();
        let reply: VerifyReply = chat_structured(
            &self.endpoint,
            vec![ChatMessage::system(system), ChatMessage::user_with_image(listing, image_data_url(image)?)],
            |r: &VerifyReply| {
                let mut got: Vec<String> = r.verdicts.iter().map(|v| v.goal_id.clone()).collect();
                let mut want = expected.clone();
                got.sort();
                want.sort();
                if got != want {
                    return Err("exactly one verdict per listed goal id is required".into());
                }
                if r.verdicts.iter().any(|v| !(0.0..=1.0).contains(&v.confidence)) {
                    return Err("confidence must be in [0, 1]".into());
                }
                Ok(())
            },
        )?;
        Ok(reply.verdicts)
    }
}

#[derive(Debug, Clone)]
pub struct HttpJudge {
    pub endpoint: HttpEndpoint,
    pub prompts: PromptSet,
}

impl Judge for HttpJudge {
    fn score(&self, image: &ImageHandle, goals: &[Goal]) -> Result<f64, BackendError> {
        let listing = goal_listing(goals);
        let system = self.prompts.render("judge", &[("goals", &listing)])?;
        let reply: ScoreReply = chat_structured(
            &self.endpoint,
            vec![ChatMessage::system(system), ChatMessage::user_with_image(listing, image_data_url(image)?)],
            |r: &ScoreReply| {
                if (0.0..=5.0).contains(&r.score) {
                    Ok(())
                } else {
                    Err("score must be in [0, 5]".into())
                }
            },
        )?;
        Ok(reply.score)
    }
}

/// Image endpoint client: `<base>/images/generations` without a base image,
/// `<base>/images/edits` with one. Results are written under `out_dir`.
#[derive(Debug, Clone)]
pub struct HttpEditor {
    pub endpoint: HttpEndpoint,
    pub out_dir: PathBuf,
    pub source_image: Option<PathBuf>,
}

impl Editor for HttpEditor {
    fn initial_image(&self) -> Option<ImageHandle> {
        self.source_image.clone().map(ImageHandle::File)
    }

    fn edit(&self, directive: &Directive, seed: u64, base: Option<&ImageHandle>) -> Result<ImageHandle, BackendError> {
        let mut body = json!({
            "model": self.endpoint.model,
            "prompt": directive.text,
            "n": 1,
            "seed": seed,
            "response_format": "b64_json",
        });
        let path = match base {
            Some(img) => {
                body["image"] = Value::String(image_data_url(img)?);
                "/images/edits"
            }
            None if directive.mode == EditMode::LocalEdit => {
                return Err(BackendError::Precondition("local edit requires a base image".into()))
            }
            None => "/images/generations",
        };
        let resp = self.endpoint.post_json(path, &body)?;
        let b64 = resp
            .pointer("/data/0/b64_json")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Transport {
                endpoint: self.endpoint.name.clone(),
                message: "response has no data[0].b64_json".into(),
            })?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64)
            .map_err(|e| BackendError::Transport {
                endpoint: self.endpoint.name.clone(),
                message: format!("bad base64 image: {e}"),
            })?;
        std::fs::create_dir_all(&self.out_dir)?;
        let file = self.out_dir.join(format!("{seed:016x}.png"));
        std::fs::write(&file, bytes)?;
        Ok(ImageHandle::File(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_fenced_and_bare_json() {
        assert_eq!(extract_json("sure\n```json\n{\"a\": 1}\n```\nbye"), Some("{\"a\": 1}"));
        assert_eq!(extract_json("x {\"a\": {\"b\": 2}} y"), Some("{\"a\": {\"b\": 2}}"));
        assert_eq!(extract_json("no json here"), None);
    }

    #[test]
    fn renders_placeholders() {
        let set = PromptSet::from_map([("planner".to_string(), "Split: {{instruction}}!".to_string())].into());
        assert_eq!(set.render("planner", &[("instruction", "a; b")]).unwrap(), "Split: a; b!");
        assert!(matches!(set.render("judge", &[]), Err(BackendError::Prompt { .. })));
    }

    #[test]
    fn canvas_images_are_rejected() {
        let canvas = crate::sim::Canvas {
            attributes: Default::default(),
            revision: 0,
            origin_seed: 0,
        };
        assert!(matches!(
            image_data_url(&ImageHandle::Canvas(canvas)),
            Err(BackendError::UnsupportedImage(_))
        ));
    }
}
