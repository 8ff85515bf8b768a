//! Application config: per-role backend selection, simulator, run, training
//! and path settings, loaded from TOML.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use director_core::backends::http::{HttpEditor, HttpEndpoint, HttpJudge, HttpPlanner, HttpVerifier, PromptSet};
use director_core::backends::sim::{SimEditor, SimJudge, SimPlanner, SimVerifier};
use director_core::backends::{BackendError, BackendFactory, Backends};
use director_core::director::RunConfig;
use director_core::grpo::TrainConfig;
use director_core::sim::SimConfig;
use director_core::suite::SuiteSpec;
use director_core::task::Task;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Sim,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model: String::new(),
            temperature: 0.0,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendsConfig {
    pub planner: BackendKind,
    pub editor: BackendKind,
    pub verifier: BackendKind,
    pub judge: BackendKind,
    /// Chat-completion endpoint shared by planner, verifier and judge.
    pub chat: EndpointConfig,
    /// Image generation and editing endpoint.
    pub image: EndpointConfig,
}

impl BackendsConfig {
    pub fn roles(&self) -> [(&'static str, BackendKind); 4] {
        [
            ("planner", self.planner),
            ("editor", self.editor),
            ("verifier", self.verifier),
            ("judge", self.judge),
        ]
    }

    pub fn all_sim(&self) -> bool {
        self.roles().iter().all(|(_, k)| *k == BackendKind::Sim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub grpo: TrainConfig,
    /// Generated training suite, used when no `--suite` is given.
    pub suite: SuiteSpec,
    /// Generated held-out suite for the before/after comparison.
    pub holdout: SuiteSpec,
    /// Simulator settings for rollouts; `[sim]` applies when absent.
    pub sim: Option<SimConfig>,
    pub eval_seeds: Vec<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let suite = SuiteSpec {
            tasks: 20,
            conflict_rate: 0.0,
            seed: 10,
            ..SuiteSpec::default()
        };
        Self {
            grpo: TrainConfig::default(),
            holdout: SuiteSpec { seed: 11, ..suite.clone() },
            suite,
            // Noise-free verdicts let the all-satisfied stop fire, which is
            // what shortens runs.
            sim: Some(SimConfig {
                verifier_noise: 0.0,
                ..SimConfig::default()
            }),
            eval_seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub suite: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub prompts: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            suite: None,
            out: None,
            prompts: "prompts".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    /// When set, overrides `run.seed`, `sim.seed` and `train.seed`.
    pub seed: Option<u64>,
    pub backends: BackendsConfig,
    pub sim: SimConfig,
    pub run: RunConfig,
    pub train: TrainSection,
    pub paths: PathsConfig,
}

impl AppConfig {
    /// Parses and validates a config file. Relative paths resolve against
    /// the file's directory; `Path::join` keeps absolute ones as they are.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Path {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| base.join(p);
        cfg.paths.prompts = base.join(&cfg.paths.prompts);
        cfg.paths.suite = cfg.paths.suite.as_deref().map(resolve);
        cfg.paths.out = cfg.paths.out.as_deref().map(resolve);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: AppConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.run.seed = seed;
        self.sim.seed = seed;
        self.train.grpo.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.run.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.sim.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.grpo.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let b = &self.backends;
        if (b.editor == BackendKind::Sim) != (b.verifier == BackendKind::Sim && b.judge == BackendKind::Sim) {
            return Err(CliError::Config(
                "editor, verifier and judge must all be sim or all be http (they exchange images)".into(),
            ));
        }
        for (role, kind) in b.roles() {
            if kind == BackendKind::Http {
                let endpoint = if role == "editor" { &b.image } else { &b.chat };
                if endpoint.base_url.is_empty() || endpoint.model.is_empty() {
                    return Err(CliError::Config(format!("http {role} needs base_url and model")));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the effective config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Backend factory for a suite rooted at `suite_dir`, writing images under `image_dir`.
    pub fn factory(&self, suite_dir: &Path, image_dir: &Path) -> Result<RoleFactory, CliError> {
        let b = &self.backends;
        let needs_http = !b.all_sim();
        let prompts = if needs_http {
            if !self.paths.prompts.is_dir() {
                return Err(CliError::Path {
                    path: self.paths.prompts.clone(),
                    message: "prompt directory not found".into(),
                });
            }
            Some(PromptSet::load(&self.paths.prompts).map_err(|e| CliError::Config(e.to_string()))?)
        } else {
            None
        };
        let endpoint = |role: &str, e: &EndpointConfig| -> Result<HttpEndpoint, CliError> {
            let mut ep = HttpEndpoint::from_env(role, &e.base_url, &e.model, e.temperature)
                .map_err(|e| CliError::Config(e.to_string()))?;
            ep.timeout_secs = e.timeout_secs;
            Ok(ep)
        };
        let mut endpoints = Endpoints::default();
        for (role, kind) in b.roles() {
            if kind == BackendKind::Http {
                let ep = endpoint(role, if role == "editor" { &b.image } else { &b.chat })?;
                match role {
                    "planner" => endpoints.planner = Some(ep),
                    "editor" => endpoints.editor = Some(ep),
                    "verifier" => endpoints.verifier = Some(ep),
                    _ => endpoints.judge = Some(ep),
                }
            }
        }
        Ok(RoleFactory {
            sim: self.sim.clone(),
            endpoints,
            prompts,
            suite_dir: suite_dir.to_path_buf(),
            image_dir: image_dir.to_path_buf(),
        })
    }
}

#[derive(Debug, Clone, Default)]
struct Endpoints {
    planner: Option<HttpEndpoint>,
    editor: Option<HttpEndpoint>,
    verifier: Option<HttpEndpoint>,
    judge: Option<HttpEndpoint>,
}

/// Builds each role from its configured backend kind.
#[derive(Debug, Clone)]
pub struct RoleFactory {
    sim: SimConfig,
    endpoints: Endpoints,
    prompts: Option<PromptSet>,
    suite_dir: PathBuf,
    image_dir: PathBuf,
}

impl BackendFactory for RoleFactory {
    fn for_task(&self, task: &Task) -> Result<Backends, BackendError> {
        self.sim.validate()?;
        let prompts = || self.prompts.clone().expect("prompts are loaded for http roles");
        let e = &self.endpoints;
        Ok(Backends {
            planner: match &e.planner {
                Some(ep) => Arc::new(HttpPlanner {
                    endpoint: ep.clone(),
                    prompts: prompts(),
                }),
                None => Arc::new(SimPlanner::default()),
            },
            editor: match &e.editor {
                Some(ep) => Arc::new(HttpEditor {
                    endpoint: ep.clone(),
                    out_dir: self.image_dir.join(&task.id),
                    source_image: task.source_image.as_ref().map(|p| self.suite_dir.join(p)),
                }),
                None => Arc::new(SimEditor::new(task, &self.sim)),
            },
            verifier: match &e.verifier {
                Some(ep) => Arc::new(HttpVerifier {
                    endpoint: ep.clone(),
                    prompts: prompts(),
                }),
                None => Arc::new(SimVerifier::new(task, &self.sim)),
            },
            judge: match &e.judge {
                Some(ep) => Arc::new(HttpJudge {
                    endpoint: ep.clone(),
                    prompts: prompts(),
                }),
                None => Arc::new(SimJudge),
            },
        })
    }

    fn is_simulated(&self) -> bool {
        self.endpoints.planner.is_none()
            && self.endpoints.editor.is_none()
            && self.endpoints.verifier.is_none()
            && self.endpoints.judge.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_document() {
        let cfg = AppConfig::parse("").unwrap();
        assert_eq!(cfg.run.max_iterations, 6);
        assert_eq!(cfg.run.confidence_threshold, 0.81);
        assert!(cfg.backends.all_sim());
    }

    #[test]
    fn top_level_seed_propagates() {
        let cfg = AppConfig::parse("seed = 42\n[run]\nseed = 1\n").unwrap();
        assert_eq!((cfg.run.seed, cfg.sim.seed, cfg.train.grpo.seed), (42, 42, 42));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(AppConfig::parse("[run]\nmax_iterations = 0\n"), Err(CliError::Config(_))));
        assert!(matches!(AppConfig::parse("[sim]\np_success = 2.0\n"), Err(CliError::Config(_))));
        assert!(matches!(AppConfig::parse("[backends]\neditor = \"http\"\n"), Err(CliError::Config(_))));
        assert!(matches!(AppConfig::parse("[run]\nmax_iterations = \"six\"\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = AppConfig::parse("").unwrap();
        let b = AppConfig::parse("[sim]\np_success = 0.5\n").unwrap();
        assert_eq!(a.hash(), AppConfig::parse("").unwrap().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn checked_in_default_config_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/default.toml");
        let cfg = AppConfig::load(&path).unwrap();
        assert_eq!(cfg.run, RunConfig::default());
        assert_eq!(cfg.train.grpo, TrainConfig::default());
        assert_eq!(cfg.train, TrainSection::default());
        assert!(PromptSet::load(&cfg.paths.prompts).is_ok());
    }
}
