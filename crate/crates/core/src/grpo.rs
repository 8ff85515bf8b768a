//! Group-relative policy optimization of a small linear-softmax planner policy.
//!
//! The policy scores every action symbol as `W[a] · φ / τ` and normalizes over
//! the legal subset at each decision. Trajectories from the director become
//! token sequences; tool outputs (judge picks, verdicts, accept/rollback) are
//! kept in order but masked out of the objective.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actions::{ActionSymbol, Origin, FEATURE_DIM, MAX_JUDGE_CANDIDATES};
use crate::backends::BackendFactory;
use crate::director::{run_task_with_policy, DecisionPoint, DecisionPolicy, RunConfig};
use crate::ledger::GoalLedger;
use crate::stream::StreamKey;
use crate::task::{GoalTag, Task};
use crate::trajectory::Trajectory;

/// Added to the group standard deviation before dividing.
pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("trajectory has no steps to encode")]
    EmptyTrajectory,
    #[error("cannot encode step {iteration}: {reason}")]
    Unencodable { iteration: usize, reason: String },
    #[error("every token of a trajectory is masked")]
    AllMasked,
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training setting: {0}")]
    Config(String),
    #[error("no rollout group succeeded in epoch {0}")]
    NoGroups(usize),
    #[error("training diverged at epoch {epoch}: mean reward {reward:.4} below half of peak {peak:.4} for 10 epochs")]
    Diverged { epoch: usize, reward: f64, peak: f64, history: Vec<HistoryRow> },
    #[error("policy file {path}: {message}")]
    PolicyFile { path: String, message: String },
}

/// Linear-softmax policy parameters: one weight row per action symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// Row-major `vocabulary_size × FEATURE_DIM`.
    pub weights: Vec<f64>,
    pub temperature: f64,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    vocabulary: Vec<ActionSymbol>,
    feature_dim: usize,
    temperature: f64,
    weights: Vec<Vec<f64>>,
}

impl PolicyParams {
    pub fn zeros(temperature: f64) -> Self {
        Self {
            weights: vec![0.0; ActionSymbol::vocabulary_size() * FEATURE_DIM],
            temperature,
        }
    }

    /// Initialization that reproduces the controller's built-in preferences:
    /// keep going, scene-level batches before local ones, rephrase retries.
    pub fn heuristic_prior() -> Self {
        let mut p = Self::zeros(1.0);
        let bias = [
            (ActionSymbol::Continue, 3.0),
            (ActionSymbol::Batch(GoalTag::Global), 3.0),
            (ActionSymbol::Batch(GoalTag::Layout), 2.5),
            (ActionSymbol::Batch(GoalTag::Local), 2.0),
            (ActionSymbol::Batch(GoalTag::TextOverlay), 1.5),
            (ActionSymbol::BatchAll, 1.0),
            (ActionSymbol::ModeFullCompose, 1.0),
            (ActionSymbol::ModeLocalEdit, 1.0),
            (ActionSymbol::ModeRegenerate, 0.5),
            (ActionSymbol::Template(1), 1.0),
        ];
        for (a, b) in bias {
            p.weights[a.index() * FEATURE_DIM] = b;
        }
        p
    }

    pub fn row(&self, a: ActionSymbol) -> &[f64] {
        let i = a.index() * FEATURE_DIM;
        &self.weights[i..i + FEATURE_DIM]
    }

    fn check_shape(&self) -> Result<(), GrpoError> {
        let want = ActionSymbol::vocabulary_size() * FEATURE_DIM;
        if self.weights.len() != want {
            return Err(GrpoError::Shape(format!("expected {want} weights, got {}", self.weights.len())));
        }
        if !(self.temperature > 0.0) || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(GrpoError::Shape("parameters must be finite with positive temperature".into()));
        }
        Ok(())
    }

    /// Probabilities over `legal` at state `features`.
    pub fn probs(&self, features: &[f64], legal: &[ActionSymbol]) -> Vec<f64> {
        let logits: Vec<f64> = legal
            .iter()
            .map(|a| self.row(*a).iter().zip(features).map(|(w, f)| w * f).sum::<f64>() / self.temperature)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    }

    pub fn log_prob(&self, token: &Token) -> f64 {
        let p = self.probs(&token.features, &token.legal);
        let i = token.legal.iter().position(|a| *a == token.symbol).expect("validated token");
        p[i].ln()
    }

    pub fn save(&self, path: &Path) -> Result<(), GrpoError> {
        let file = PolicyFile {
            vocabulary: ActionSymbol::vocabulary(),
            feature_dim: FEATURE_DIM,
            temperature: self.temperature,
            weights: self.weights.chunks(FEATURE_DIM).map(|r| r.to_vec()).collect(),
        };
        let body = serde_json::to_string_pretty(&file).expect("policy serializes");
        std::fs::write(path, body).map_err(|e| GrpoError::PolicyFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, GrpoError> {
        let err = |message: String| GrpoError::PolicyFile {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: PolicyFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if file.vocabulary != ActionSymbol::vocabulary() || file.feature_dim != FEATURE_DIM {
            return Err(err("vocabulary or feature layout does not match this build".into()));
        }
        if file.weights.iter().any(|r| r.len() != FEATURE_DIM) {
            return Err(err("ragged weight rows".into()));
        }
        let params = Self {
            weights: file.weights.concat(),
            temperature: file.temperature,
        };
        params.check_shape().map_err(|e| err(e.to_string()))?;
        Ok(params)
    }
}

/// How a [`PolicyDriver`] turns probabilities into an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Sample,
    Greedy,
}

/// Adapts [`PolicyParams`] to the director's decision hook.
#[derive(Debug, Clone)]
pub struct PolicyDriver {
    pub params: PolicyParams,
    pub selection: Selection,
}

impl DecisionPolicy for PolicyDriver {
    fn choose(&self, _point: DecisionPoint, features: &[f64], legal: &[ActionSymbol], key: StreamKey) -> ActionSymbol {
        let p = self.params.probs(features, legal);
        let i = match self.selection {
            Selection::Greedy => crate::backends::argmax_first(p.iter().copied()),
            Selection::Sample => {
                let u = key.unit();
                let mut acc = 0.0;
                p.iter()
                    .position(|pi| {
                        acc += pi;
                        u < acc
                    })
                    .unwrap_or(p.len() - 1)
            }
        };
        legal[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub symbol: ActionSymbol,
    pub origin: Origin,
    pub features: Vec<f64>,
    pub legal: Vec<ActionSymbol>,
}

impl Token {
    pub fn masked(&self) -> bool {
        self.origin == Origin::Tool
    }

    fn tool(symbol: ActionSymbol, features: &[f64], legal: Vec<ActionSymbol>) -> Self {
        Self {
            symbol,
            origin: Origin::Tool,
            features: features.to_vec(),
            legal,
        }
    }
}

/// Flattens a trajectory into interleaved planner and tool tokens: per step
/// the planner decisions, then the judge pick, one verdict per goal and the
/// accept/rollback outcome; finally the closing stop decision.
pub fn encode_trajectory(traj: &Trajectory) -> Result<Vec<Token>, GrpoError> {
    let stop = traj.terminal.as_ref().map(|t| t.stop_decisions.as_slice()).unwrap_or_default();
    if traj.steps.is_empty() && stop.is_empty() {
        return Err(GrpoError::EmptyTrajectory);
    }
    let planner = |d: &crate::trajectory::DecisionRecord, features: &[f64], iteration: usize| {
        if !d.legal.contains(&d.symbol) || d.symbol.origin() != Origin::Planner {
            return Err(GrpoError::Unencodable {
                iteration,
                reason: format!("decision {} is not a legal planner action", d.symbol),
            });
        }
        Ok(Token {
            symbol: d.symbol,
            origin: Origin::Planner,
            features: features.to_vec(),
            legal: d.legal.clone(),
        })
    };
    let mut tokens = Vec::new();
    for step in &traj.steps {
        let it = step.iteration;
        if step.features.len() != FEATURE_DIM {
            return Err(GrpoError::Unencodable {
                iteration: it,
                reason: format!("feature vector has length {}", step.features.len()),
            });
        }
        for d in &step.decisions {
            tokens.push(planner(d, &step.features, it)?);
        }
        if step.error.is_some() {
            continue;
        }
        if !step.judge_scores.is_empty() {
            let n = step.judge_scores.len();
            if n > MAX_JUDGE_CANDIDATES as usize || step.chosen_index >= n {
                return Err(GrpoError::Unencodable {
                    iteration: it,
                    reason: format!("judge pick {} of {n} candidates", step.chosen_index),
                });
            }
            let legal = (0..n as u8).map(ActionSymbol::JudgePick).collect();
            tokens.push(Token::tool(ActionSymbol::JudgePick(step.chosen_index as u8), &step.features, legal));
        }
        for v in &step.verdicts {
            let symbol = if v.satisfied { ActionSymbol::VerdictSatisfied } else { ActionSymbol::VerdictUnsatisfied };
            let legal = vec![ActionSymbol::VerdictSatisfied, ActionSymbol::VerdictUnsatisfied];
            tokens.push(Token::tool(symbol, &step.features, legal));
        }
        let outcome = if step.rollback { ActionSymbol::Rollback } else { ActionSymbol::Accept };
        tokens.push(Token::tool(outcome, &step.features, vec![ActionSymbol::Accept, ActionSymbol::Rollback]));
    }
    if let Some(t) = &traj.terminal {
        for d in &t.stop_decisions {
            tokens.push(planner(d, &t.stop_features, traj.steps.len() + 1)?);
        }
    }
    Ok(tokens)
}

/// Linear map of effective coverage onto the 0 to 5 reward scale.
pub fn reward_score(ledger: &GoalLedger) -> f64 {
    if ledger.total() == 0 {
        return 0.0;
    }
    5.0 * ledger.completed().len() as f64 / ledger.total() as f64
}

pub fn trajectory_reward(traj: &Trajectory) -> f64 {
    traj.final_ledger().map(|l| reward_score(&l)).unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageNorm {
    /// `(r - mean) / (std + ε)`.
    #[default]
    Std,
    /// `r - mean`.
    MeanOnly,
}

/// Group-relative advantages. A group with identical rewards gets all zeros.
pub fn compute_advantages(rewards: &[f64], norm: AdvantageNorm) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    Ok(match norm {
        AdvantageNorm::MeanOnly => rewards.iter().map(|r| r - mean).collect(),
        AdvantageNorm::Std => {
            let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPS)).collect()
        }
    })
}

/// Token sequences of one group with their advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGroup {
    pub sequences: Vec<Vec<Token>>,
    pub advantages: Vec<f64>,
}

/// Value and analytic gradient of the clipped, KL-regularized objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Mean per-token KL to the reference over unmasked tokens.
    pub mean_kl: f64,
}

fn check_token(token: &Token) -> Result<(), GrpoError> {
    if token.features.len() != FEATURE_DIM {
        return Err(GrpoError::Shape(format!("token features have length {}", token.features.len())));
    }
    if !token.legal.contains(&token.symbol) {
        return Err(GrpoError::Shape(format!("token {} is not in its legal set", token.symbol)));
    }
    Ok(())
}

/// Objective averaged over groups. Per trajectory: the mean over unmasked
/// tokens of `min(ρÂ, clip(ρ, 1-ε, 1+ε)Â) - β·KL(π_θ‖π_ref)`, with
/// `ρ = π_θ(y)/π_old(y)`; then averaged within the group.
pub fn grpo_objective(
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    groups: &[TokenGroup],
    clip_eps: f64,
    beta: f64,
) -> Result<Objective, GrpoError> {
    if !(clip_eps > 0.0) || !(beta >= 0.0) {
        return Err(GrpoError::Config(format!("clip_eps must be > 0 and beta >= 0 (got {clip_eps}, {beta})")));
    }
    for p in [params, old, reference] {
        p.check_shape()?;
    }
    if params.temperature != old.temperature || params.temperature != reference.temperature {
        return Err(GrpoError::Shape("temperatures differ between policies".into()));
    }
    if groups.is_empty() {
        return Err(GrpoError::Config("no groups".into()));
    }
    let tau = params.temperature;
    let mut value = 0.0;
    let mut gradient = vec![0.0; params.weights.len()];
    let (mut kl_sum, mut kl_count) = (0.0, 0usize);
    for group in groups {
        let g = group.sequences.len();
        if g < 2 {
            return Err(GrpoError::GroupTooSmall(g));
        }
        if group.advantages.len() != g {
            return Err(GrpoError::Shape("one advantage per trajectory required".into()));
        }
        let group_weight = 1.0 / (groups.len() * g) as f64;
        for (seq, &adv) in group.sequences.iter().zip(&group.advantages) {
            let active: Vec<&Token> = seq.iter().filter(|t| !t.masked()).collect();
            if active.is_empty() {
                return Err(GrpoError::AllMasked);
            }
            let w = group_weight / active.len() as f64;
            for token in active {
                check_token(token)?;
                let p = params.probs(&token.features, &token.legal);
                let p_old = old.probs(&token.features, &token.legal);
                let q = reference.probs(&token.features, &token.legal);
                let y = token.legal.iter().position(|a| *a == token.symbol).expect("checked");
                let rho = p[y] / p_old[y];
                let unclipped = rho * adv;
                let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
                let surrogate = unclipped.min(clipped);
                let log_ratio: Vec<f64> = p.iter().zip(&q).map(|(pi, qi)| pi.ln() - qi.ln()).collect();
                let kl: f64 = p.iter().zip(&log_ratio).map(|(pi, l)| pi * l).sum();
                value += w * (surrogate - beta * kl);
                kl_sum += kl;
                kl_count += 1;

                // d/dz_b of the per-token term.
                let surrogate_active = unclipped <= clipped;
                for (b, action) in token.legal.iter().enumerate() {
                    let dlogp = if b == y { 1.0 } else { 0.0 } - p[b];
                    let mut dz = if surrogate_active { adv * rho * dlogp } else { 0.0 };
                    dz -= beta * p[b] * (log_ratio[b] - kl);
                    if dz == 0.0 {
                        continue;
                    }
                    let row = action.index() * FEATURE_DIM;
                    for (d, f) in token.features.iter().enumerate() {
                        gradient[row + d] += w * dz * f / tau;
                    }
                }
            }
        }
    }
    Ok(Objective {
        value,
        gradient,
        mean_kl: if kl_count == 0 { 0.0 } else { kl_sum / kl_count as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub group_size: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub clip_eps: f64,
    pub beta: f64,
    pub temperature: f64,
    /// Gradient steps per sampled batch; π_old is refreshed once per epoch.
    pub inner_steps: usize,
    pub advantage_norm: AdvantageNorm,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            epochs: 200,
            step_size: 5.0,
            clip_eps: 0.2,
            beta: 0.01,
            temperature: 1.0,
            inner_steps: 1,
            advantage_norm: AdvantageNorm::Std,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.clip_eps > 0.0) || !(self.beta >= 0.0) || !(self.step_size >= 0.0) || !(self.temperature > 0.0) {
            return Err(GrpoError::Config(
                "clip_eps and temperature must be > 0; beta and step_size must be >= 0".into(),
            ));
        }
        if self.inner_steps < 1 {
            return Err(GrpoError::Config("inner_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub tokens: Vec<Vec<Token>>,
    /// Per-token log-probabilities under the sampling policy.
    pub logp_current: Vec<Vec<f64>>,
    pub logp_reference: Vec<Vec<f64>>,
}

/// Runs the director `seeds.len()` times on `task` with `params` sampling the
/// decisions. Any failed run fails the whole group.
pub fn rollout_group(
    params: &PolicyParams,
    reference: &PolicyParams,
    task: &Task,
    factory: &dyn BackendFactory,
    run_cfg: &RunConfig,
    seeds: &[u64],
) -> Result<RolloutGroup, String> {
    if seeds.len() < 2 {
        return Err(GrpoError::GroupTooSmall(seeds.len()).to_string());
    }
    let driver = PolicyDriver {
        params: params.clone(),
        selection: Selection::Sample,
    };
    let runs: Vec<Result<(Trajectory, Vec<Token>), String>> = seeds
        .par_iter()
        .map(|seed| {
            let backends = factory.for_task(task).map_err(|e| e.to_string())?;
            let cfg = RunConfig {
                seed: *seed,
                ..run_cfg.clone()
            };
            let traj = run_task_with_policy(task, &cfg, &backends, Some(&driver)).map_err(|e| e.to_string())?;
            let tokens = encode_trajectory(&traj).map_err(|e| e.to_string())?;
            Ok((traj, tokens))
        })
        .collect();
    let mut group = RolloutGroup {
        task_id: task.id.clone(),
        trajectories: Vec::new(),
        rewards: Vec::new(),
        tokens: Vec::new(),
        logp_current: Vec::new(),
        logp_reference: Vec::new(),
    };
    for run in runs {
        let (traj, tokens) = run?;
        group.rewards.push(trajectory_reward(&traj));
        group.logp_current.push(tokens.iter().map(|t| params.log_prob(t)).collect());
        group.logp_reference.push(tokens.iter().map(|t| reference.log_prob(t)).collect());
        group.tokens.push(tokens);
        group.trajectories.push(traj);
    }
    Ok(group)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_iterations: f64,
    pub kl: f64,
}

pub fn history_to_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,mean_reward,mean_iterations,kl\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6},{:.8}\n", r.epoch, r.mean_reward, r.mean_iterations, r.kl));
    }
    out
}

pub fn history_from_csv(text: &str) -> Result<Vec<HistoryRow>, String> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || format!("history line {}: `{line}`", i + 2);
            if cols.len() != 4 {
                return Err(bad());
            }
            Ok(HistoryRow {
                epoch: cols[0].trim().parse().map_err(|_| bad())?,
                mean_reward: cols[1].trim().parse().map_err(|_| bad())?,
                mean_iterations: cols[2].trim().parse().map_err(|_| bad())?,
                kl: cols[3].trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub history: Vec<HistoryRow>,
    pub discarded_groups: usize,
}

/// Epochs a divergence must persist before training aborts.
pub const DIVERGENCE_PATIENCE: usize = 10;

/// Trains from `start` (or the heuristic prior) against a frozen `reference`.
/// `history` holds rows from a previous session; training resumes at its length.
pub fn train(
    cfg: &TrainConfig,
    run_cfg: &RunConfig,
    factory: &dyn BackendFactory,
    tasks: &[Task],
    start: PolicyParams,
    reference: &PolicyParams,
    mut history: Vec<HistoryRow>,
) -> Result<TrainOutcome, GrpoError> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(GrpoError::Config("training suite is empty".into()));
    }
    let mut params = start;
    params.check_shape()?;
    reference.check_shape()?;
    let root = StreamKey::root(cfg.seed).child_str("train");
    let (mut peak, mut below) = (f64::NEG_INFINITY, 0);
    for row in &history {
        peak = peak.max(row.mean_reward);
        below = if row.mean_reward < 0.5 * peak { below + 1 } else { 0 };
    }
    let mut discarded = 0;
    for epoch in history.len()..cfg.epochs {
        let old = params.clone();
        let key = root.child(epoch as u64);
        let results: Vec<Result<RolloutGroup, String>> = tasks
            .par_iter()
            .enumerate()
            .map(|(ti, task)| {
                let seeds: Vec<u64> = (0..cfg.group_size).map(|i| key.child(ti as u64).child(i as u64).value()).collect();
                rollout_group(&old, reference, task, factory, run_cfg, &seeds)
            })
            .collect();
        let mut groups = Vec::new();
        let (mut reward_sum, mut iter_sum, mut count) = (0.0, 0.0, 0usize);
        for r in results {
            match r {
                Ok(g) => {
                    reward_sum += g.rewards.iter().sum::<f64>();
                    iter_sum += g.trajectories.iter().map(|t| t.iterations() as f64).sum::<f64>();
                    count += g.rewards.len();
                    let advantages = compute_advantages(&g.rewards, cfg.advantage_norm)?;
                    groups.push(TokenGroup {
                        sequences: g.tokens,
                        advantages,
                    });
                }
                Err(_) => discarded += 1,
            }
        }
        if groups.is_empty() {
            return Err(GrpoError::NoGroups(epoch));
        }
        let mut kl = 0.0;
        for inner in 0..cfg.inner_steps {
            let obj = grpo_objective(&params, &old, reference, &groups, cfg.clip_eps, cfg.beta)?;
            if inner == 0 {
                kl = obj.mean_kl;
            }
            for (w, g) in params.weights.iter_mut().zip(&obj.gradient) {
                *w += cfg.step_size * g;
            }
        }
        let row = HistoryRow {
            epoch,
            mean_reward: reward_sum / count as f64,
            mean_iterations: iter_sum / count as f64,
            kl,
        };
        peak = peak.max(row.mean_reward);
        below = if row.mean_reward < 0.5 * peak { below + 1 } else { 0 };
        let reward = row.mean_reward;
        history.push(row);
        if below >= DIVERGENCE_PATIENCE {
            return Err(GrpoError::Diverged {
                epoch,
                reward,
                peak,
                history,
            });
        }
    }
    Ok(TrainOutcome {
        params,
        history,
        discarded_groups: discarded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub runs: usize,
    pub mean_reward: f64,
    pub mean_iterations: f64,
}

/// Greedy evaluation of `params` over `tasks`, once per seed in `seeds`.
pub fn evaluate_policy(
    params: &PolicyParams,
    tasks: &[Task],
    factory: &dyn BackendFactory,
    run_cfg: &RunConfig,
    seeds: &[u64],
) -> Result<EvalSummary, String> {
    let driver = PolicyDriver {
        params: params.clone(),
        selection: Selection::Greedy,
    };
    let jobs: Vec<(&Task, u64)> = tasks.iter().flat_map(|t| seeds.iter().map(move |s| (t, *s))).collect();
    let runs: Vec<Result<(f64, usize), String>> = jobs
        .par_iter()
        .map(|(task, seed)| {
            let backends = factory.for_task(task).map_err(|e| e.to_string())?;
            let cfg = RunConfig {
                seed: *seed,
                ..run_cfg.clone()
            };
            let traj = run_task_with_policy(task, &cfg, &backends, Some(&driver)).map_err(|e| e.to_string())?;
            Ok((trajectory_reward(&traj), traj.iterations()))
        })
        .collect();
    let mut summary = EvalSummary {
        runs: 0,
        mean_reward: 0.0,
        mean_iterations: 0.0,
    };
    for r in runs {
        let (reward, iterations) = r?;
        summary.runs += 1;
        summary.mean_reward += reward;
        summary.mean_iterations += iterations as f64;
    }
    if summary.runs > 0 {
        summary.mean_reward /= summary.runs as f64;
        summary.mean_iterations /= summary.runs as f64;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{DecisionRecord, StepRecord, VerdictRecord};

    fn token(symbol: ActionSymbol, legal: Vec<ActionSymbol>, f: f64) -> Token {
        let mut features = vec![f; FEATURE_DIM];
        features[0] = 1.0;
        Token {
            symbol,
            origin: symbol.origin(),
            features,
            legal,
        }
    }

    #[test]
    fn advantage_examples() {
        let a = compute_advantages(&[3.0, 5.0, 4.0, 4.0], AdvantageNorm::Std).unwrap();
        let expected = [-2f64.sqrt(), 2f64.sqrt(), 0.0, 0.0];
        for (x, e) in a.iter().zip(expected) {
            assert!((x - e).abs() < 1e-7, "{x} vs {e}");
        }
        assert_eq!(compute_advantages(&[4.0, 4.0, 4.0], AdvantageNorm::Std).unwrap(), [0.0; 3]);
        let b = compute_advantages(&[0.0, 5.0], AdvantageNorm::Std).unwrap();
        assert!((b[0] + 1.0).abs() < 1e-8 && (b[1] - 1.0).abs() < 1e-8);
        assert_eq!(compute_advantages(&[0.0, 5.0], AdvantageNorm::MeanOnly).unwrap(), [-2.5, 2.5]);
        assert!(matches!(compute_advantages(&[1.0], AdvantageNorm::Std), Err(GrpoError::GroupTooSmall(1))));
    }

    #[test]
    fn reward_examples() {
        let ledger = GoalLedger::from_goals((0..18).map(|i| (format!("g{i}"), crate::task::GoalType::Text)));
        assert_eq!(reward_score(&ledger), 0.0);
        let half: Vec<_> = (0..9).map(|i| crate::ledger::Verdict::new(format!("g{i}"), true, 1.0)).collect();
        assert_eq!(reward_score(&ledger.apply(&half).unwrap()), 2.5);
        let all: Vec<_> = (0..18).map(|i| crate::ledger::Verdict::new(format!("g{i}"), true, 1.0)).collect();
        assert_eq!(reward_score(&ledger.apply(&all).unwrap()), 5.0);
    }

    #[test]
    fn identity_case_is_zero() {
        let p = PolicyParams::heuristic_prior();
        let legal = vec![ActionSymbol::Continue, ActionSymbol::Stop];
        let seq = vec![token(ActionSymbol::Continue, legal.clone(), 0.3), token(ActionSymbol::Stop, legal, 0.1)];
        let group = TokenGroup {
            sequences: vec![seq.clone(), seq],
            advantages: vec![0.0, 0.0],
        };
        let obj = grpo_objective(&p, &p, &p, &[group], 0.2, 0.01).unwrap();
        assert_eq!(obj.value, 0.0);
        assert!(obj.gradient.iter().all(|g| *g == 0.0));
        assert_eq!(obj.mean_kl, 0.0);
    }

    #[test]
    fn clip_arithmetic() {
        // One legal pair with logits chosen so that ρ = 1.3 exactly in probability terms.
        let legal = vec![ActionSymbol::Continue, ActionSymbol::Stop];
        let mut features = vec![0.0; FEATURE_DIM];
        features[0] = 1.0;
        let tok = Token {
            symbol: ActionSymbol::Continue,
            origin: Origin::Planner,
            features,
            legal,
        };
        let old = PolicyParams::zeros(1.0); // π_old(Continue) = 0.5
        let mut new = PolicyParams::zeros(1.0);
        // π(Continue) = 0.65 → logit gap ln(0.65 / 0.35).
        new.weights[ActionSymbol::Continue.index() * FEATURE_DIM] = (0.65f64 / 0.35).ln();
        let group = TokenGroup {
            sequences: vec![vec![tok.clone()], vec![tok]],
            advantages: vec![1.0, 1.0],
        };
        let obj = grpo_objective(&new, &old, &new, &[group], 0.2, 0.0).unwrap();
        assert!((obj.value - 1.2).abs() < 1e-12, "{}", obj.value);
        assert!(obj.gradient.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn all_masked_is_an_error() {
        let p = PolicyParams::zeros(1.0);
        let legal = vec![ActionSymbol::Accept, ActionSymbol::Rollback];
        let seq = vec![token(ActionSymbol::Accept, legal, 0.2)];
        let group = TokenGroup {
            sequences: vec![seq.clone(), seq],
            advantages: vec![1.0, -1.0],
        };
        assert!(matches!(grpo_objective(&p, &p, &p, &[group], 0.2, 0.0), Err(GrpoError::AllMasked)));
    }

    fn step(iteration: usize) -> StepRecord {
        StepRecord {
            iteration,
            directive: "d".into(),
            mode: crate::backends::EditMode::LocalEdit,
            addressed: vec!["g1".into()],
            reprompted: false,
            candidate_seeds: vec![1, 2],
            judge_scores: vec![1.0, 2.0],
            chosen_index: 1,
            verdicts: vec![
                VerdictRecord {
                    goal_id: "g1".into(),
                    satisfied: true,
                    confidence: 1.0,
                },
                VerdictRecord {
                    goal_id: "g2".into(),
                    satisfied: false,
                    confidence: 1.0,
                },
            ],
            coverage: 1,
            rollback: false,
            best_coverage: 1,
            pending_after: vec![],
            completed_after: vec![],
            features: vec![0.5; FEATURE_DIM],
            decisions: vec![DecisionRecord {
                symbol: ActionSymbol::Batch(GoalTag::Local),
                legal: vec![ActionSymbol::Batch(GoalTag::Local), ActionSymbol::BatchAll],
            }],
            error: None,
        }
    }

    #[test]
    fn encodes_interleaved_tokens() {
        let mut t = Trajectory::new("t");
        for i in 1..=3 {
            t.steps.push(step(i));
        }
        let tokens = encode_trajectory(&t).unwrap();
        let planner = tokens.iter().filter(|t| !t.masked()).count();
        assert_eq!(planner, 3);
        assert_eq!(tokens.len(), 3 * 5);
        // Each step: planner, judge, two verdicts, accept.
        assert!(!tokens[0].masked() && tokens[1..5].iter().all(|t| t.masked()));
        assert_eq!(tokens[1].symbol, ActionSymbol::JudgePick(1));
        assert!(matches!(encode_trajectory(&Trajectory::new("e")), Err(GrpoError::EmptyTrajectory)));
    }

    #[test]
    fn policy_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = PolicyParams::heuristic_prior();
        p.save(&path).unwrap();
        assert_eq!(PolicyParams::load(&path).unwrap(), p);
        std::fs::write(&path, "{}").unwrap();
        assert!(PolicyParams::load(&path).is_err());
    }

    #[test]
    fn history_csv_round_trip() {
        let rows = vec![HistoryRow {
            epoch: 0,
            mean_reward: 3.5,
            mean_iterations: 4.25,
            kl: 0.001,
        }];
        let csv = history_to_csv(&rows);
        assert!(csv.starts_with("epoch,mean_reward,mean_iterations,kl\n"));
        assert_eq!(history_from_csv(&csv).unwrap(), rows);
    }
}
