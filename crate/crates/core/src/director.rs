//! Closed-loop controller: gate, schedule, generate and judge candidates,
//! verify, roll back on regression, decide whether to continue.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::actions::{state_features, ActionSymbol};
use crate::backends::{
    candidate_seeds, generate_candidates, judge_select, verify, BackendError, Backends, Directive, EditMode,
    ExtractedPlan, ImageHandle, Planner,
};
use crate::ledger::{GoalLedger, LedgerError, Verdict};
use crate::metrics::filter_verdicts;
use crate::sim::{Canvas, SimConfig, SimWorld};
use crate::stream::StreamKey;
use crate::task::{Goal, GoalTag, Modality, Task};
use crate::trajectory::{
    DecisionRecord, FinalRecord, GateDecision, StepRecord, StopReason, Trajectory, VerdictRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Strategies {
    /// Rephrase the directive when a batch comes back after a failed attempt.
    pub reprompting: bool,
    /// Generate a micro-grid of candidates and let the judge pick.
    pub best_of_n: bool,
    /// Keep iterating after the first pass.
    pub refinement: bool,
}

impl Default for Strategies {
    fn default() -> Self {
        Self::all()
    }
}

impl Strategies {
    pub fn all() -> Self {
        Self {
            reprompting: true,
            best_of_n: true,
            refinement: true,
        }
    }

    pub fn none() -> Self {
        Self {
            reprompting: false,
            best_of_n: false,
            refinement: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub max_iterations: usize,
    pub microgrid_t2i: usize,
    pub microgrid_i2i: usize,
    pub confidence_threshold: f64,
    pub one_shot_feasibility_gate: f64,
    pub one_shot_goal_cap: usize,
    pub self_query_cadence: usize,
    pub self_query_threshold: f64,
    pub max_in_flight: usize,
    pub strategies: Strategies,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_iterations: 6,
            microgrid_t2i: 4,
            microgrid_i2i: 1,
            confidence_threshold: 0.81,
            one_shot_feasibility_gate: 0.7,
            one_shot_goal_cap: 15,
            self_query_cadence: 2,
            self_query_threshold: 0.5,
            max_in_flight: 4,
            strategies: Strategies::all(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), DirectorError> {
        let bad = |m: &str| Err(DirectorError::Config(m.to_string()));
        if self.max_iterations < 1 {
            return bad("max_iterations must be at least 1");
        }
        if self.microgrid_t2i < 1 || self.microgrid_i2i < 1 {
            return bad("micro-grid sizes must be at least 1");
        }
        if self.self_query_cadence < 1 {
            return bad("self_query_cadence must be at least 1");
        }
        if self.max_in_flight < 1 {
            return bad("max_in_flight must be at least 1");
        }
        for (name, v) in [
            ("confidence_threshold", self.confidence_threshold),
            ("one_shot_feasibility_gate", self.one_shot_feasibility_gate),
            ("self_query_threshold", self.self_query_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DirectorError::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Candidates per iteration for `modality` under the current strategies.
    pub fn microgrid(&self, modality: Modality) -> usize {
        if !self.strategies.best_of_n {
            return 1;
        }
        match modality {
            Modality::T2I => self.microgrid_t2i,
            Modality::I2I => self.microgrid_i2i,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DirectorError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("invalid task: {0}")]
    Task(#[from] LedgerError),
    #[error("task {task_id} aborted at iteration {iteration}: {source}")]
    Aborted {
        task_id: String,
        iteration: usize,
        #[source]
        source: BackendError,
        partial: Box<Trajectory>,
    },
}

impl DirectorError {
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            DirectorError::Aborted { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

pub fn gate_one_shot(plan: &ExtractedPlan, cfg: &RunConfig) -> GateDecision {
    let conflicts = plan.goals.iter().any(|g| g.conflict);
    if plan.one_shot_feasibility >= cfg.one_shot_feasibility_gate && plan.goals.len() <= cfg.one_shot_goal_cap && !conflicts
    {
        GateDecision::OneShot
    } else {
        GateDecision::Staged
    }
}

/// Orders goals by tag precedence (stable in instruction order) and pairs
/// adjacent same-tag goals.
pub fn schedule_batches(pending: &[Goal]) -> Vec<Vec<String>> {
    let mut sorted: Vec<&Goal> = pending.iter().collect();
    sorted.sort_by_key(|g| g.tag.precedence());
    let mut batches: Vec<Vec<String>> = Vec::new();
    let mut open: Option<(GoalTag, usize)> = None;
    for g in sorted {
        match open {
            Some((tag, i)) if tag == g.tag && batches[i].len() < 2 => {
                batches[i].push(g.id.clone());
                open = None;
            }
            _ => {
                batches.push(vec![g.id.clone()]);
                open = Some((g.tag, batches.len() - 1));
            }
        }
    }
    batches
}

/// Controller decision sites a policy can take over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionPoint {
    Continue,
    Batch,
    Template,
    Mode,
}

/// Replaces the built-in heuristics at each decision point. Must return a
/// member of `legal`.
pub trait DecisionPolicy: Send + Sync {
    fn choose(&self, point: DecisionPoint, features: &[f64], legal: &[ActionSymbol], key: StreamKey) -> ActionSymbol;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectorState {
    pub ledger: GoalLedger,
    pub best_image: Option<ImageHandle>,
    pub best_coverage: usize,
    pub iteration: usize,
    pub queue: VecDeque<Vec<String>>,
    pub last_rollback: bool,
}

impl DirectorState {
    pub fn new(task: &Task, best_image: Option<ImageHandle>) -> Result<Self, DirectorError> {
        let ledger = GoalLedger::new(task)?;
        Ok(Self {
            queue: schedule_batches(&task.goals).into(),
            ledger,
            best_image,
            best_coverage: 0,
            iteration: 0,
            last_rollback: false,
        })
    }

    /// Drops settled goals from queued batches and appends batches for pending
    /// goals no batch covers.
    pub fn normalize_queue(&mut self, goals: &[Goal]) {
        let ledger = &self.ledger;
        for batch in self.queue.iter_mut() {
            batch.retain(|id| ledger.is_pending(id));
        }
        self.queue.retain(|b| !b.is_empty());
        let queued: BTreeSet<&String> = self.queue.iter().flatten().collect();
        let missing: Vec<Goal> = goals
            .iter()
            .filter(|g| ledger.is_pending(&g.id) && !queued.contains(&g.id))
            .cloned()
            .collect();
        let extra = schedule_batches(&missing);
        self.queue.extend(extra);
    }
}

fn coverage_of(verdicts: &[Verdict]) -> usize {
    verdicts.iter().filter(|v| v.satisfied).count()
}

/// Accepts `candidate` when its effective coverage is at least the best so
/// far (ties accept); otherwise keeps the previous best image and ledger and
/// requeues `batch` last. Returns whether a rollback happened.
pub fn apply_rollback(
    state: &mut DirectorState,
    candidate: ImageHandle,
    effective: &[Verdict],
    batch: &[String],
) -> Result<bool, LedgerError> {
    let new_coverage = coverage_of(effective);
    let rollback = new_coverage < state.best_coverage;
    if rollback {
        if !batch.is_empty() {
            state.queue.retain(|b| b.as_slice() != batch);
            state.queue.push_back(batch.to_vec());
        }
    } else {
        state.ledger = state.ledger.apply(effective)?;
        state.best_image = Some(candidate);
        state.best_coverage = new_coverage;
    }
    state.last_rollback = rollback;
    Ok(rollback)
}

/// Stops that need no planner input: nothing pending, budget spent, or a
/// single-pass run that has had its pass.
pub fn forced_stop(state: &DirectorState, cfg: &RunConfig) -> Option<StopReason> {
    if state.ledger.pending().is_empty() {
        Some(StopReason::AllSatisfied)
    } else if state.iteration >= cfg.max_iterations {
        Some(StopReason::Budget)
    } else if !cfg.strategies.refinement && state.iteration >= 1 {
        Some(StopReason::SinglePass)
    } else {
        None
    }
}

/// Heuristic stopping rule: forced stops, then every `self_query_cadence`
/// rounds the planner's improvement confidence against the threshold.
pub fn should_stop(
    state: &DirectorState,
    cfg: &RunConfig,
    planner: &dyn Planner,
    goals: &[Goal],
    history: &Trajectory,
) -> Result<Option<StopReason>, BackendError> {
    if let Some(reason) = forced_stop(state, cfg) {
        return Ok(Some(reason));
    }
    if state.iteration > 0 && state.iteration.is_multiple_of(cfg.self_query_cadence) {
        let confidence = planner.improvement_confidence(&state.ledger, goals, history)?;
        if confidence < cfg.self_query_threshold {
            return Ok(Some(StopReason::SelfQuery));
        }
    }
    Ok(None)
}

/// Rephrases the last failed directive for `batch`.
pub fn reprompt(planner: &dyn Planner, batch: &[Goal], history: &Trajectory) -> Result<Directive, BackendError> {
    let ids: Vec<String> = batch.iter().map(|g| g.id.clone()).collect();
    let failed = history
        .last_failed_attempt(&ids)
        .ok_or_else(|| BackendError::Precondition("reprompt requires a prior failed attempt".into()))?;
    let failed = Directive {
        text: failed.directive.clone(),
        addressed_goal_ids: ids,
        mode: failed.mode,
    };
    planner.reprompt(&failed, batch, history)
}

fn legal_modes(has_base: bool, scene_level: bool) -> Vec<ActionSymbol> {
    if !has_base {
        vec![ActionSymbol::ModeFullCompose]
    } else if scene_level {
        vec![ActionSymbol::ModeFullCompose, ActionSymbol::ModeRegenerate]
    } else {
        vec![ActionSymbol::ModeLocalEdit, ActionSymbol::ModeRegenerate]
    }
}

fn mode_of(symbol: ActionSymbol) -> EditMode {
    match symbol {
        ActionSymbol::ModeLocalEdit => EditMode::LocalEdit,
        ActionSymbol::ModeRegenerate => EditMode::Regenerate,
        _ => EditMode::FullCompose,
    }
}

fn symbol_of(mode: EditMode) -> ActionSymbol {
    match mode {
        EditMode::FullCompose => ActionSymbol::ModeFullCompose,
        EditMode::LocalEdit => ActionSymbol::ModeLocalEdit,
        EditMode::Regenerate => ActionSymbol::ModeRegenerate,
    }
}

struct Run<'a> {
    task: &'a Task,
    cfg: &'a RunConfig,
    backends: &'a Backends,
    policy: Option<&'a dyn DecisionPolicy>,
    gate: GateDecision,
    state: DirectorState,
    trajectory: Trajectory,
    initial_verdicts: Vec<VerdictRecord>,
    stream: StreamKey,
}

impl Run<'_> {
    fn decide(
        &self,
        point: DecisionPoint,
        heuristic: ActionSymbol,
        features: &[f64],
        legal: Vec<ActionSymbol>,
        decisions: &mut Vec<DecisionRecord>,
    ) -> Result<ActionSymbol, BackendError> {
        let symbol = match self.policy {
            Some(p) if legal.len() > 1 => {
                let key = self
                    .stream
                    .child_str("policy")
                    .child(self.state.iteration as u64)
                    .child(decisions.len() as u64);
                p.choose(point, features, &legal, key)
            }
            _ => heuristic,
        };
        if !legal.contains(&symbol) {
            return Err(BackendError::Precondition(format!("action {symbol} is not legal here")));
        }
        decisions.push(DecisionRecord { symbol, legal });
        Ok(symbol)
    }

    fn goals_for(&self, ids: &[String]) -> Vec<Goal> {
        ids.iter().filter_map(|id| self.task.goal(id)).cloned().collect()
    }

    /// Continue/stop decision ahead of iteration `state.iteration + 1`.
    fn continue_decision(&self, features: &[f64], decisions: &mut Vec<DecisionRecord>) -> Result<Option<StopReason>, BackendError> {
        if let Some(reason) = forced_stop(&self.state, self.cfg) {
            return Ok(Some(reason));
        }
        if self.state.iteration == 0 {
            return Ok(None);
        }
        let legal = vec![ActionSymbol::Continue, ActionSymbol::Stop];
        let (heuristic, reason) = if self.policy.is_some() {
            (ActionSymbol::Continue, StopReason::PolicyStop)
        } else {
            let stop = should_stop(&self.state, self.cfg, self.backends.planner.as_ref(), &self.task.goals, &self.trajectory)?;
            (if stop.is_some() { ActionSymbol::Stop } else { ActionSymbol::Continue }, StopReason::SelfQuery)
        };
        let symbol = self.decide(DecisionPoint::Continue, heuristic, features, legal, decisions)?;
        Ok((symbol == ActionSymbol::Stop).then_some(reason))
    }

    /// Picks the goals this iteration addresses. Returns the ids and whether
    /// the batch is "everything pending".
    fn batch_decision(&mut self, features: &[f64], decisions: &mut Vec<DecisionRecord>) -> Result<(Vec<String>, bool), BackendError> {
        let first = self.state.iteration == 0;
        let (heuristic, legal) = if self.state.best_image.is_none() || (first && !self.cfg.strategies.refinement) {
            (ActionSymbol::BatchAll, vec![ActionSymbol::BatchAll])
        } else {
            let mut legal: Vec<ActionSymbol> = GoalTag::ALL
                .into_iter()
                .filter(|t| self.state.queue.iter().any(|b| self.batch_tag(b) == Some(*t)))
                .map(ActionSymbol::Batch)
                .collect();
            legal.push(ActionSymbol::BatchAll);
            let heuristic = if first && self.gate == GateDecision::OneShot {
                ActionSymbol::BatchAll
            } else {
                self.state
                    .queue
                    .front()
                    .and_then(|b| self.batch_tag(b))
                    .map(ActionSymbol::Batch)
                    .unwrap_or(ActionSymbol::BatchAll)
            };
            (heuristic, legal)
        };
        let symbol = self.decide(DecisionPoint::Batch, heuristic, features, legal, decisions)?;
        match symbol {
            ActionSymbol::Batch(tag) => {
                let pos = self
                    .state
                    .queue
                    .iter()
                    .position(|b| self.batch_tag(b) == Some(tag))
                    .expect("legal tags have a queued batch");
                Ok((self.state.queue.remove(pos).expect("position is valid"), false))
            }
            _ => Ok((self.state.ledger.pending().to_vec(), true)),
        }
    }

    fn batch_tag(&self, batch: &[String]) -> Option<GoalTag> {
        batch.first().and_then(|id| self.task.goal(id)).map(|g| g.tag)
    }

    fn compose_directive(&self, ids: &[String]) -> Result<Directive, BackendError> {
        let text = if ids.len() == self.task.goals.len() {
            self.task.instruction.clone()
        } else {
            let clauses: Vec<String> = self.goals_for(ids).into_iter().map(|g| g.text).collect();
            format!("Revise the image so that: {}", clauses.join("; "))
        };
        Directive::new(text, ids.to_vec(), EditMode::FullCompose)
    }

    fn execute_iteration(&mut self, step: &mut StepRecord, ids: Vec<String>, all: bool) -> Result<(), BackendError> {
        let features = step.features.clone();
        let mut decisions = std::mem::take(&mut step.decisions);
        let result = self.execute_inner(step, &features, &mut decisions, ids, all);
        step.decisions = decisions;
        result
    }

    fn execute_inner(
        &mut self,
        step: &mut StepRecord,
        features: &[f64],
        decisions: &mut Vec<DecisionRecord>,
        ids: Vec<String>,
        all: bool,
    ) -> Result<(), BackendError> {
        let batch = self.goals_for(&ids);
        step.addressed = ids.clone();

        let can_reprompt =
            !all && self.cfg.strategies.reprompting && self.trajectory.last_failed_attempt(&ids).is_some();
        let mut legal = vec![ActionSymbol::Template(0)];
        if can_reprompt {
            legal.push(ActionSymbol::Template(1));
        }
        let heuristic = *legal.last().expect("non-empty");
        let template = self.decide(DecisionPoint::Template, heuristic, features, legal, decisions)?;

        let proposed = if all {
            self.compose_directive(&ids)?
        } else if template == ActionSymbol::Template(1) {
            step.reprompted = true;
            reprompt(self.backends.planner.as_ref(), &batch, &self.trajectory)?
        } else {
            self.backends
                .planner
                .propose_directive(&self.state.ledger, &batch, &self.trajectory)?
        };
        step.directive = proposed.text.clone();

        let has_base = self.state.best_image.is_some();
        let scene_level = all || batch.iter().any(|g| g.tag.is_scene_level());
        let legal = legal_modes(has_base, scene_level);
        let preferred = symbol_of(proposed.mode);
        let heuristic = if legal.contains(&preferred) { preferred } else { legal[0] };
        let mode = mode_of(self.decide(DecisionPoint::Mode, heuristic, features, legal, decisions)?);
        step.mode = mode;
        let directive = Directive::new(proposed.text, proposed.addressed_goal_ids, mode)?;

        let n = self.cfg.microgrid(self.task.modality);
        let seed_key = self.stream.child_str("candidates").child(self.state.iteration as u64 + 1);
        step.candidate_seeds = candidate_seeds(seed_key, n);
        let mut candidates = generate_candidates(
            self.backends.editor.as_ref(),
            &directive,
            n,
            self.state.best_image.as_ref(),
            seed_key,
            self.cfg.max_in_flight,
        )?;
        let chosen = if candidates.len() > 1 {
            let i = judge_select(self.backends.judge.as_ref(), &mut candidates, &self.task.goals)?;
            step.judge_scores = candidates.iter().map(|c| c.judge_score.unwrap_or(0.0)).collect();
            i
        } else {
            0
        };
        step.chosen_index = chosen;

        let verdicts = verify(self.backends.verifier.as_ref(), &candidates[chosen].image, &self.task.goals)?;
        let effective = filter_verdicts(&verdicts, self.cfg.confidence_threshold);
        step.verdicts = verdicts.iter().map(VerdictRecord::from).collect();
        step.coverage = coverage_of(&effective);

        let requeue = if all { Vec::new() } else { ids };
        let image = candidates.swap_remove(chosen).image;
        step.rollback = apply_rollback(&mut self.state, image, &effective, &requeue)
            .map_err(|e| BackendError::Precondition(e.to_string()))?;
        Ok(())
    }

    fn finish(&mut self, stop_reason: StopReason, stop_features: Vec<f64>, stop_decisions: Vec<DecisionRecord>) {
        let terminal = FinalRecord {
            task_id: self.task.id.clone(),
            gate: self.gate,
            final_image: self.state.best_image.clone(),
            stop_reason,
            iterations: self.trajectory.iterations(),
            editor_calls: self.trajectory.editor_calls(),
            best_coverage: self.state.best_coverage,
            goal_types: self.task.goals.iter().map(|g| (g.id.clone(), g.goal_type)).collect(),
            initial_verdicts: self.initial_verdicts.clone(),
            final_verdicts: self.state.ledger.latest_verdicts().map(VerdictRecord::from).collect(),
            stop_features,
            stop_decisions,
        };
        self.trajectory.terminal = Some(terminal);
    }

    fn abort(mut self, source: BackendError) -> DirectorError {
        self.finish(StopReason::Error, Vec::new(), Vec::new());
        DirectorError::Aborted {
            task_id: self.task.id.clone(),
            iteration: self.state.iteration,
            source,
            partial: Box::new(self.trajectory),
        }
    }
}

/// Runs one task with the built-in heuristics.
pub fn run_task(task: &Task, cfg: &RunConfig, backends: &Backends) -> Result<Trajectory, DirectorError> {
    run_task_with_policy(task, cfg, backends, None)
}

/// Runs one task, letting `policy` take every decision that has more than one
/// legal option.
pub fn run_task_with_policy(
    task: &Task,
    cfg: &RunConfig,
    backends: &Backends,
    policy: Option<&dyn DecisionPolicy>,
) -> Result<Trajectory, DirectorError> {
    cfg.validate()?;
    let initial = backends.editor.initial_image();
    let mut run = Run {
        task,
        cfg,
        backends,
        policy,
        gate: GateDecision::Staged,
        state: DirectorState::new(task, initial.clone())?,
        trajectory: Trajectory::new(task.id.clone()),
        initial_verdicts: Vec::new(),
        stream: StreamKey::root(cfg.seed).child_str(&task.id),
    };

    let plan = match backends.planner.plan_goals(&task.instruction, initial.as_ref()) {
        Ok(plan) => plan,
        Err(e) => return Err(run.abort(e)),
    };
    run.gate = gate_one_shot(&plan, cfg);

    if let Some(image) = &initial {
        let verdicts = match verify(backends.verifier.as_ref(), image, &task.goals) {
            Ok(v) => v,
            Err(e) => return Err(run.abort(e)),
        };
        let effective = filter_verdicts(&verdicts, cfg.confidence_threshold);
        run.initial_verdicts = verdicts.iter().map(VerdictRecord::from).collect();
        run.state.ledger = run.state.ledger.apply(&effective)?;
        run.state.best_coverage = coverage_of(&effective);
        run.state.normalize_queue(&task.goals);
    }

    loop {
        let features = state_features(
            &run.state.ledger,
            &task.goals,
            run.state.iteration,
            cfg.max_iterations,
            run.state.last_rollback,
        );
        let mut decisions = Vec::new();
        match run.continue_decision(&features, &mut decisions) {
            Ok(Some(reason)) => {
                run.finish(reason, features, decisions);
                return Ok(run.trajectory);
            }
            Ok(None) => {}
            Err(e) => return Err(run.abort(e)),
        }

        let mut step = StepRecord {
            iteration: run.state.iteration + 1,
            directive: String::new(),
            mode: EditMode::FullCompose,
            addressed: Vec::new(),
            reprompted: false,
            candidate_seeds: Vec::new(),
            judge_scores: Vec::new(),
            chosen_index: 0,
            verdicts: Vec::new(),
            coverage: 0,
            rollback: false,
            best_coverage: run.state.best_coverage,
            pending_after: Vec::new(),
            completed_after: Vec::new(),
            features: features.clone(),
            decisions,
            error: None,
        };
        let outcome = run
            .batch_decision(&features, &mut step.decisions)
            .and_then(|(ids, all)| run.execute_iteration(&mut step, ids, all));
        run.state.iteration += 1;
        run.state.normalize_queue(&task.goals);
        step.best_coverage = run.state.best_coverage;
        step.pending_after = run.state.ledger.pending().to_vec();
        step.completed_after = run.state.ledger.completed().iter().cloned().collect();
        if let Err(e) = outcome {
            step.error = Some(e.to_string());
            run.trajectory.steps.push(step);
            return Err(run.abort(e));
        }
        run.trajectory.steps.push(step);
    }
}

/// Re-applies the recorded chosen edits to a fresh simulated world and
/// returns the final best canvas.
pub fn replay_sim(task: &Task, sim: &SimConfig, trajectory: &Trajectory) -> Result<Canvas, BackendError> {
    let world = SimWorld::new(task, sim);
    let mut best = world.canvas().clone();
    for step in trajectory.steps.iter().filter(|s| s.error.is_none()) {
        let seed = *step
            .candidate_seeds
            .get(step.chosen_index)
            .ok_or_else(|| BackendError::Precondition(format!("step {} has no chosen seed", step.iteration)))?;
        let mut w = world.clone();
        w.set_canvas(best.clone());
        let addressed: BTreeSet<String> = step.addressed.iter().cloned().collect();
        let candidate = w.apply_edit(&addressed, seed)?;
        if !step.rollback {
            best = candidate;
        }
    }
    Ok(best)
}
